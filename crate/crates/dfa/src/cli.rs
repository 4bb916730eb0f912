//! Command-line verbs.
//!
//! Settings are layered: config file, then `DFA__SECTION__KEY` environment
//! variables, then `--set key=value` flags in order, then the dedicated
//! flags (`--mode`, `--seeds`, `--out`).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::artifacts::{self, Checkpoint};
use crate::config::{self, ExperimentConfig, Override};
use crate::error::{Error, Result};
use crate::{dataset, report, run, sweep};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;
/// The verb finished but some sweep cells or report runs failed.
pub const EXIT_PARTIAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dfa", version, about = "Semi-supervised domain adaptation with dynamic feature alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every configured seed and write metrics, checkpoints and a summary.
    Run(RunArgs),
    /// Train a grid of bank momenta and tabulate accuracy per gamma.
    SweepGamma(SweepArgs),
    /// Aggregate finished runs into tables and plot-ready CSV files.
    Report(ReportArgs),
    /// Recompute target features from a checkpoint.
    ExportEmbeddings(ExportArgs),
    /// Write the episode a seed trains on.
    DumpDataset(DumpArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override one key, e.g. `--set optimizer.lr=0.02` or `--set gamma=0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1.., action = clap::ArgAction::Append)]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// dfa, s+t or ent.
    #[arg(long)]
    pub mode: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output directory (default: `output.dir` from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write each seed's episode into this directory.
    #[arg(long, value_name = "DIR")]
    pub dataset_dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated gamma grid.
    #[arg(long, value_delimiter = ',', default_values_t = sweep::DEFAULT_GAMMAS.to_vec())]
    pub gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run cells one after another instead of on a thread pool.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories; the first is the baseline of the paired comparison.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output TSV file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run seed (default: first seed of the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output TSV file.
    #[arg(long)]
    pub out: PathBuf,
}

fn flag(key: &str, value: String, origin: &str) -> Override {
    Override { key: key.into(), value, origin: origin.into() }
}

fn load(args: &ConfigArgs, env: &[(String, String)], extra: Vec<Override>) -> Result<ExperimentConfig> {
    let mut overrides = config::env_overrides(env.iter().cloned());
    for s in &args.set {
        overrides.push(Override::parse(s)?);
    }
    overrides.extend(extra);
    config::load_file(&args.config, &overrides)
}

fn seeds_flag(seeds: &[u64]) -> Option<Override> {
    if seeds.is_empty() {
        return None;
    }
    let list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
    Some(flag("train.seeds", format!("[{list}]"), "--seeds"))
}

fn out_flag(out: &Option<PathBuf>) -> Option<Override> {
    out.as_ref().map(|p| flag("output.dir", toml::Value::String(p.display().to_string()).to_string(), "--out"))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        _ if e.is_non_finite() => EXIT_NON_FINITE,
        Error::Config { .. } | Error::MissingKey { .. } | Error::Usage(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Runs one parsed command. Human-readable output goes to stdout.
pub fn execute(cli: Cli, env: &[(String, String)]) -> Result<i32> {
    match cli.command {
        Command::Run(a) => {
            let mut extra = Vec::new();
            extra.extend(a.mode.map(|m| flag("train.mode", m, "--mode")));
            extra.extend(seeds_flag(&a.seeds));
            extra.extend(out_flag(&a.out));
            let cfg = load(&a.config, env, extra)?;
            let out = PathBuf::from(&cfg.output.dir);
            let summary = run::run_experiment(&cfg, &out, &run::RunOptions { dataset_dump: a.dataset_dump })?;
            print!("{}", run::summary_markdown(&summary));
            println!("artifacts in {}", out.display());
            Ok(EXIT_OK)
        }
        Command::SweepGamma(a) => {
            let extra: Vec<Override> = seeds_flag(&a.seeds).into_iter().chain(out_flag(&a.out)).collect();
            let cfg = load(&a.config, env, extra)?;
            let table = sweep::sweep_gamma(&cfg, &a.gammas, &cfg.train.seeds, !a.serial)?;
            let out = Path::new(&cfg.output.dir);
            table.write(out)?;
            print!("{}", table.to_markdown());
            println!("tables in {}", out.display());
            Ok(if table.failures().next().is_some() { EXIT_PARTIAL } else { EXIT_OK })
        }
        Command::Report(a) => {
            let rep = report::build(&a.runs);
            rep.write(&a.out)?;
            print!("{}", rep.accuracy_markdown());
            if rep.runs.is_empty() {
                return Err(Error::Usage("no run could be read".into()));
            }
            Ok(if rep.errors.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::ExportEmbeddings(a) => {
            let cfg = load(&a.config, env, Vec::new())?;
            let ck = Checkpoint::load(&a.checkpoint)?;
            let hash = cfg.hash();
            if ck.config_hash != hash {
                return Err(Error::Usage(format!(
                    "{} was written under config {} but {} resolves to {}",
                    a.checkpoint.display(),
                    ck.config_hash,
                    a.config.config.display(),
                    hash
                )));
            }
            let ep = dataset::build_episode(&cfg, ck.seed)?;
            let recs = artifacts::embeddings(&ck.model, &ep)?;
            artifacts::write_embeddings(&recs, &a.out)?;
            println!("{} embeddings written to {}", recs.len(), a.out.display());
            Ok(EXIT_OK)
        }
        Command::DumpDataset(a) => {
            let cfg = load(&a.config, env, Vec::new())?;
            let seed = a.seed.or_else(|| cfg.train.seeds.first().copied()).unwrap_or(0);
            let ep = dataset::build_episode(&cfg, seed)?;
            dataset::write_episode(&ep, &a.out)?;
            println!("episode for seed {seed} written to {}", a.out.display());
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args`, runs the command and maps errors to exit codes.
pub fn main_with<I, T>(args: I, env: &[(String, String)]) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli, env) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
