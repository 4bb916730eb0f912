//! Cross-run aggregation and plot-ready data files.
//!
//! Reads only `seed-*/metrics.jsonl` (and `resolved_config.toml` for the
//! mode label), so every number in a report can be traced to raw records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dfa_core::trainer::MetricsRecord;
use serde::{Deserialize, Serialize};

use crate::artifacts;
use crate::config;
use crate::error::{Error, Result};
use crate::run::{mean_std, METRICS, RESOLVED_CONFIG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub history: Vec<MetricsRecord>,
}

impl SeedMetrics {
    pub fn final_record(&self) -> &MetricsRecord {
        self.history.last().expect("non-empty history")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub dir: PathBuf,
    /// From the resolved config, when it is readable.
    pub mode: Option<String>,
    pub seeds: Vec<SeedMetrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl RunReport {
    pub fn final_accuracy(&self, seed: u64) -> Option<f64> {
        self.seeds.iter().find(|s| s.seed == seed).map(|s| s.final_record().target_accuracy)
    }
}

/// Per-seed differences of one run against the baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub run: String,
    pub baseline: String,
    pub seeds: Vec<u64>,
    pub differences: Vec<f64>,
    pub mean_difference: f64,
    pub std_difference: f64,
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunReport>,
    pub paired: Vec<PairedComparison>,
    /// Runs that could not be read, with the reason.
    pub errors: Vec<(PathBuf, String)>,
}

fn seed_dirs(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(seed) = name.to_str().and_then(|n| n.strip_prefix("seed-")).and_then(|s| s.parse().ok()) else {
            continue;
        };
        if entry.path().is_dir() {
            out.push((seed, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_run(dir: &Path) -> Result<RunReport> {
    let seeds = seed_dirs(dir)?;
    if seeds.is_empty() {
        return Err(Error::Usage(format!("{}: no seed-* directories", dir.display())));
    }
    let mut out = Vec::new();
    for (seed, sdir) in seeds {
        let path = sdir.join(METRICS);
        if !path.exists() {
            return Err(Error::Usage(format!("{}: missing metrics file {}", dir.display(), path.display())));
        }
        let history = artifacts::read_metrics(&path)?;
        if history.is_empty() {
            return Err(Error::Usage(format!("{}: metrics file is empty", path.display())));
        }
        out.push(SeedMetrics { seed, history });
    }
    let mode = config::load_file(&dir.join(RESOLVED_CONFIG), &[]).ok().map(|c| c.train.mode.to_string());
    let accs: Vec<f64> = out.iter().map(|s| s.final_record().target_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(RunReport { name, dir: dir.to_path_buf(), mode, seeds: out, mean_accuracy, std_accuracy })
}

pub fn paired(run: &RunReport, baseline: &RunReport) -> PairedComparison {
    let mut seeds = Vec::new();
    let mut differences = Vec::new();
    for s in &run.seeds {
        if let Some(b) = baseline.final_accuracy(s.seed) {
            seeds.push(s.seed);
            differences.push(s.final_record().target_accuracy - b);
        }
    }
    let (mean_difference, std_difference) = mean_std(&differences);
    let wins = differences.iter().filter(|&&d| d > 0.0).count();
    PairedComparison {
        run: run.name.clone(),
        baseline: baseline.name.clone(),
        seeds,
        differences,
        mean_difference,
        std_difference,
        wins,
    }
}

/// Reads every run; unreadable runs are listed in `errors`. Each later run
/// is compared against the first readable one on their common seeds.
pub fn build(run_dirs: &[PathBuf]) -> Report {
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for d in run_dirs {
        match load_run(d) {
            Ok(r) => runs.push(r),
            Err(e) => errors.push((d.clone(), e.to_string())),
        }
    }
    let paired = match runs.split_first() {
        Some((base, rest)) => rest.iter().map(|r| paired(r, base)).collect(),
        None => Vec::new(),
    };
    Report { runs, paired, errors }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

impl Report {
    pub fn accuracy_markdown(&self) -> String {
        let mut out = String::from("| run | mode | seeds | accuracy |\n|---|---|---:|---:|\n");
        for r in &self.runs {
            let mode = r.mode.as_deref().unwrap_or("?");
            writeln!(out, "| {} | {} | {} | {:.4} ± {:.4} |", r.name, mode, r.seeds.len(), r.mean_accuracy, r.std_accuracy)
                .unwrap();
        }
        if !self.paired.is_empty() {
            out.push_str("\n| run | baseline | common seeds | mean diff | wins |\n|---|---|---:|---:|---:|\n");
            for p in &self.paired {
                writeln!(
                    out,
                    "| {} | {} | {} | {:+.4} ± {:.4} | {}/{} |",
                    p.run,
                    p.baseline,
                    p.seeds.len(),
                    p.mean_difference,
                    p.std_difference,
                    p.wins,
                    p.seeds.len()
                )
                .unwrap();
            }
        }
        for (d, e) in &self.errors {
            writeln!(out, "\nerror in {}: {e}", d.display()).unwrap();
        }
        out
    }

    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("run,mode,seed,final_iteration,accuracy\n");
        for r in &self.runs {
            for s in &r.seeds {
                let f = s.final_record();
                writeln!(out, "{},{},{},{},{}", r.name, r.mode.as_deref().unwrap_or(""), s.seed, f.iteration, f.target_accuracy)
                    .unwrap();
            }
        }
        out
    }

    pub fn loss_curves_csv(&self) -> String {
        let mut out = String::from("run,seed,iteration,lr,l_cls,l_mmd,l_pseudo,l_perturb,l_ent,total,target_accuracy\n");
        for r in &self.runs {
            for s in &r.seeds {
                for m in &s.history {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{},{}",
                        r.name, s.seed, m.iteration, m.lr, m.l_cls, m.l_mmd, m.l_pseudo, m.l_perturb, m.l_ent, m.total, m.target_accuracy
                    )
                    .unwrap();
                }
            }
        }
        out
    }

    pub fn selection_curves_csv(&self) -> String {
        let mut out = String::from("run,seed,iteration,n_unlabeled_seen,n_dist,n_ent,n_pse,pseudo_precision,bank_drift\n");
        for r in &self.runs {
            for s in &r.seeds {
                for m in &s.history {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{}",
                        r.name,
                        s.seed,
                        m.iteration,
                        m.n_unlabeled_seen,
                        m.n_dist,
                        m.n_ent,
                        m.n_pse,
                        opt(m.pseudo_precision),
                        m.bank_drift
                    )
                    .unwrap();
                }
            }
        }
        out
    }

    /// Existing `embeddings.tsv` files, one per run and seed.
    pub fn embeddings_csv(&self) -> String {
        let mut out = String::from("run,seed,path\n");
        for r in &self.runs {
            for s in &r.seeds {
                let p = r.dir.join(format!("seed-{}", s.seed)).join("embeddings.tsv");
                if p.exists() {
                    writeln!(out, "{},{},{}", r.name, s.seed, p.display()).unwrap();
                }
            }
        }
        out
    }

    /// Writes `report.{md,json}`, `accuracy.csv`, `loss_curves.csv`,
    /// `selection_curves.csv` and `embeddings.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.md", self.accuracy_markdown()),
            ("accuracy.csv", self.accuracy_csv()),
            ("loss_curves.csv", self.loss_curves_csv()),
            ("selection_curves.csv", self.selection_curves_csv()),
            ("embeddings.csv", self.embeddings_csv()),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        artifacts::write_json(&dir.join("report.json"), self)
    }
}
