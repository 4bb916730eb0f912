//! The `run` verb: train every configured seed and write its artifacts.
//!
//! ```text
//! <out>/resolved_config.toml
//! <out>/summary.json, summary.md
//! <out>/seed-<n>/metrics.jsonl
//! <out>/seed-<n>/checkpoint.json        final state
//! <out>/seed-<n>/checkpoints/iter-*.json at train.checkpoint_interval
//! <out>/seed-<n>/bank_log.jsonl         when train.bank_log is set
//! <out>/seed-<n>/embeddings.tsv         final target features
//! <out>/seed-<n>/abort.json             only after a NaN abort
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dfa_core::trainer::{self, MetricsRecord, Mode};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, Checkpoint, JsonlWriter};
use crate::config::ExperimentConfig;
use crate::dataset;
use crate::error::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_MD: &str = "summary.md";
pub const METRICS: &str = "metrics.jsonl";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Final numbers of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub final_record: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std_accuracy: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Diagnostic written next to the metrics when a loss turns non-finite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbortReport {
    pub seed: u64,
    pub term: String,
    pub iteration: usize,
    pub value: String,
    pub message: String,
    pub last_record: Option<MetricsRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Also write each seed's episode to `<dir>/episode-seed-<n>.tsv`.
    pub dataset_dump: Option<PathBuf>,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run_seed(config: &ExperimentConfig, hash: &str, seed: u64, out: &Path, opts: &RunOptions) -> Result<SeedResult> {
    let dir = seed_dir(out, seed);
    create_dir(&dir)?;
    let episode = dataset::build_episode(config, seed)?;
    if let Some(dump) = &opts.dataset_dump {
        create_dir(dump)?;
        dataset::write_episode(&episode, &dump.join(format!("episode-seed-{seed}.tsv")))?;
    }
    let tc = config.train_config(seed);
    let mut metrics = JsonlWriter::create(&dir.join(METRICS))?;
    let every = config.train.checkpoint_interval;
    if every > 0 {
        create_dir(&dir.join("checkpoints"))?;
    }
    let mut io_error: Option<Error> = None;
    let mut last: Option<MetricsRecord> = None;
    let result = trainer::train_with(&episode, &tc, |state, record| {
        if io_error.is_some() {
            return;
        }
        let mut step = || -> Result<()> {
            metrics.push(record)?;
            if every > 0 && record.iteration % every == 0 {
                let p = dir.join("checkpoints").join(format!("iter-{:06}.json", record.iteration));
                Checkpoint::capture(state, hash, seed).save(&p)?;
            }
            Ok(())
        };
        io_error = step().err();
        last = Some(record.clone());
    });
    metrics.flush()?;
    if let Some(e) = io_error {
        return Err(e);
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e @ dfa_core::Error::NonFinite { .. }) => {
            if let dfa_core::Error::NonFinite { term, iteration, value } = &e {
                let report = AbortReport {
                    seed,
                    term: term.to_string(),
                    iteration: *iteration,
                    value: value.to_string(),
                    message: e.to_string(),
                    last_record: last,
                };
                artifacts::write_json(&dir.join("abort.json"), &report)?;
            }
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };

    Checkpoint::capture(&outcome.state, hash, seed).save(&dir.join("checkpoint.json"))?;
    if config.train.bank_log {
        let mut log = JsonlWriter::create(&dir.join("bank_log.jsonl"))?;
        for r in &outcome.bank_log.records {
            log.push(r)?;
        }
        log.flush()?;
    }
    let emb = artifacts::embeddings(&outcome.state.model, &episode)?;
    artifacts::write_embeddings(&emb, &dir.join("embeddings.tsv"))?;
    let final_record = outcome.history.last().cloned().expect("at least one record");
    Ok(SeedResult {
        seed,
        accuracy: outcome.final_evaluation.accuracy,
        per_class: outcome.final_evaluation.per_class,
        final_record,
    })
}

/// Trains every seed of `config` in order, writing artifacts under `out`.
/// Stops at the first failing seed.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    create_dir(out)?;
    let resolved = config.to_toml();
    std::fs::write(out.join(RESOLVED_CONFIG), &resolved).map_err(|e| Error::io(out.join(RESOLVED_CONFIG), e))?;
    let hash = config.hash();
    let mut seeds = Vec::new();
    for &seed in &config.train.seeds {
        seeds.push(run_seed(config, &hash, seed, out, opts)?);
    }
    let accs: Vec<f64> = seeds.iter().map(|s| s.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let summary = RunSummary { mode: config.train.mode, config_hash: hash, seeds, mean_accuracy, std_accuracy };
    artifacts::write_json(&out.join(SUMMARY_JSON), &summary)?;
    let md = summary_markdown(&summary);
    std::fs::write(out.join(SUMMARY_MD), md).map_err(|e| Error::io(out.join(SUMMARY_MD), e))?;
    Ok(summary)
}

pub fn summary_markdown(s: &RunSummary) -> String {
    let mut out = String::new();
    writeln!(out, "mode: {}  config: {}\n", s.mode, &s.config_hash[..12.min(s.config_hash.len())]).unwrap();
    writeln!(out, "| seed | accuracy | l_cls | l_mmd | l_pseudo | l_perturb | n_pse | pseudo precision |").unwrap();
    writeln!(out, "|---:|---:|---:|---:|---:|---:|---:|---:|").unwrap();
    for r in &s.seeds {
        let f = &r.final_record;
        let prec = f.pseudo_precision.map_or("-".to_string(), |p| format!("{p:.3}"));
        writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} |",
            r.seed, r.accuracy, f.l_cls, f.l_mmd, f.l_pseudo, f.l_perturb, f.n_pse, prec
        )
        .unwrap();
    }
    writeln!(out, "\nmean accuracy {:.4} ± {:.4} over {} seed(s)", s.mean_accuracy, s.std_accuracy, s.seeds.len()).unwrap();
    out
}
