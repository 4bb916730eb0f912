//! The γ ablation grid.
//!
//! Every (γ, seed) cell trains independently on the episode of its seed, so
//! the grid gives the same numbers whether cells run serially or on rayon.

use std::fmt::Write as _;
use std::path::Path;

use dfa_core::trainer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts;
use crate::config::ExperimentConfig;
use crate::dataset;
use crate::error::{Error, Result};
use crate::run::mean_std;

pub const DEFAULT_GAMMAS: [f64; 4] = [0.0, 0.1, 0.25, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub gamma: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    /// Seeds that finished; failed cells are left out of the statistics.
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<GammaRow>,
    pub cells: Vec<Cell>,
}

impl SweepTable {
    pub fn row(&self, gamma: f64) -> Option<&GammaRow> {
        self.rows.iter().find(|r| r.gamma == gamma)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.error.is_some())
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| gamma | accuracy | seeds |\n|---:|---:|---:|\n");
        for r in &self.rows {
            if r.n == 0 {
                writeln!(out, "| {} | failed | 0 |", r.gamma).unwrap();
            } else {
                writeln!(out, "| {} | {:.4} ± {:.4} | {} |", r.gamma, r.mean, r.std, r.n).unwrap();
            }
        }
        for c in self.failures() {
            writeln!(out, "\ngamma {} seed {}: {}", c.gamma, c.seed, c.error.as_deref().unwrap_or("")).unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,n,mean,std\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.gamma, r.n, r.mean, r.std).unwrap();
        }
        out
    }

    /// Writes `sweep_gamma.{md,csv,json}` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let md = dir.join("sweep_gamma.md");
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        let csv = dir.join("sweep_gamma.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        artifacts::write_json(&dir.join("sweep_gamma.json"), self)
    }
}

fn run_cell(config: &ExperimentConfig, gamma: f64, seed: u64) -> Cell {
    let result = (|| -> Result<f64> {
        let mut c = config.clone();
        c.bank.gamma = gamma;
        c.check().map_err(|(key, message)| Error::Config { location: format!("gamma {gamma}"), message: format!("{key}: {message}") })?;
        let episode = dataset::build_episode(&c, seed)?;
        Ok(trainer::train(&episode, &c.train_config(seed))?.final_evaluation.accuracy)
    })();
    match result {
        Ok(a) => Cell { gamma, seed, accuracy: Some(a), error: None },
        Err(e) => Cell { gamma, seed, accuracy: None, error: Some(e.to_string()) },
    }
}

/// Trains every (γ, seed) pair. A failing cell is recorded and the grid
/// continues.
pub fn sweep_gamma(config: &ExperimentConfig, gammas: &[f64], seeds: &[u64], parallel: bool) -> Result<SweepTable> {
    if gammas.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("sweep-gamma needs at least one gamma and one seed".into()));
    }
    let pairs: Vec<(f64, u64)> = gammas.iter().flat_map(|&g| seeds.iter().map(move |&s| (g, s))).collect();
    let cells: Vec<Cell> = if parallel {
        pairs.par_iter().map(|&(g, s)| run_cell(config, g, s)).collect()
    } else {
        pairs.iter().map(|&(g, s)| run_cell(config, g, s)).collect()
    };
    let rows = gammas
        .iter()
        .map(|&gamma| {
            let accs: Vec<f64> = cells.iter().filter(|c| c.gamma == gamma).filter_map(|c| c.accuracy).collect();
            let (mean, std) = mean_std(&accs);
            GammaRow { gamma, n: accs.len(), mean, std }
        })
        .collect();
    Ok(SweepTable { config_hash: config.hash(), seeds: seeds.to_vec(), rows, cells })
}
