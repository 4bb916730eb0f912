//! Experiment configuration: a TOML file, environment overrides and
//! `--set key=value` overrides, resolved into one validated structure.
//!
//! Precedence, lowest first: defaults, file, `DFA__SECTION__KEY` environment
//! variables, `--set` flags. Unknown keys are rejected everywhere.

use std::path::Path;

use dfa_core::alignment::{BandwidthStrategy, KernelSpec};
use dfa_core::datasets::{ShiftKind, ShiftSpec};
use dfa_core::model::Activation;
use dfa_core::perturb::PerturbSpec;
use dfa_core::trainer::{LossWeights, LrSchedule, Mode, ModelConfig, OptimizerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "DFA__";

/// Short names accepted by `--set` and the environment.
pub const ALIASES: &[(&str, &str)] = &[
    ("alpha1", "loss.alpha_mmd"),
    ("alpha2", "loss.alpha_pseudo"),
    ("alpha3", "loss.alpha_perturb"),
    ("gamma", "bank.gamma"),
    ("tau", "model.temperature"),
    ("tau_p", "pseudo.tau_p"),
    ("eps_dist", "pseudo.eps_dist"),
    ("eps_ent", "pseudo.eps_ent"),
    ("mode", "train.mode"),
    ("seeds", "train.seeds"),
    ("iterations", "optimizer.iterations"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    GaussianMixture,
    TwoMoons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    #[serde(default = "d::shift_kind")]
    pub kind: ShiftKind,
    #[serde(default = "d::shift_magnitude")]
    pub magnitude: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_imbalance: Option<Vec<f64>>,
}

impl Default for ShiftSection {
    fn default() -> Self {
        ShiftSection { kind: d::shift_kind(), magnitude: d::shift_magnitude(), noise_std: 0.0, class_imbalance: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub kind: DatasetKind,
    pub n_classes: usize,
    #[serde(default = "d::dim")]
    pub dim: usize,
    #[serde(default = "d::n_samples")]
    pub n_source: usize,
    #[serde(default = "d::n_samples")]
    pub n_unlabeled: usize,
    #[serde(default = "d::shots")]
    pub shots: usize,
    /// Radius of the circle the cluster means sit on.
    #[serde(default = "d::radius")]
    pub radius: f64,
    #[serde(default = "d::cluster_std")]
    pub cluster_std: f64,
    /// Jitter of the two-moons generator.
    #[serde(default = "d::moon_noise")]
    pub moon_noise: f64,
    /// Fixed episode seed. When absent every run seed draws its own episode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub shift: ShiftSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub temperature: f64,
    pub normalize_weights: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            hidden: m.hidden,
            feature_dim: m.feature_dim,
            activation: m.activation,
            temperature: m.temperature,
            normalize_weights: m.normalize_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankSection {
    pub gamma: f64,
}

impl Default for BankSection {
    fn default() -> Self {
        BankSection { gamma: dfa_core::membank::DEFAULT_GAMMA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    #[default]
    Median,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentSection {
    pub bandwidth: Bandwidth,
    pub n_kernels: usize,
    /// Used when `bandwidth = "fixed"`.
    pub sigmas: Vec<f64>,
}

impl Default for AlignmentSection {
    fn default() -> Self {
        AlignmentSection { bandwidth: Bandwidth::Median, n_kernels: KernelSpec::default().n_kernels, sigmas: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    pub tau_p: f64,
    pub eps_dist: f64,
    pub eps_ent: f64,
    /// Fraction of iterations during which the pseudo-label weight is zero.
    pub warmup_frac: f64,
}

impl Default for PseudoSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        PseudoSection { tau_p: t.tau_p, eps_dist: t.eps_dist, eps_ent: t.eps_ent, warmup_frac: t.warmup_frac }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSection {
    pub radius: f64,
    pub xi: f64,
    pub power_iters: usize,
}

impl Default for PerturbSection {
    fn default() -> Self {
        let p = PerturbSpec::default();
        PerturbSection { radius: p.radius, xi: p.xi, power_iters: p.power_iters }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha_mmd: f64,
    pub alpha_pseudo: f64,
    pub alpha_perturb: f64,
    /// Weight of the entropy term in `ent` mode.
    pub ent_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            alpha_mmd: w.mmd,
            alpha_pseudo: w.pseudo,
            alpha_perturb: w.perturb,
            ent_weight: TrainConfig::default().ent_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    InverseDecay,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub schedule: Schedule,
    pub decay_rate: f64,
    pub decay_power: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        let (decay_rate, decay_power) = match LrSchedule::default() {
            LrSchedule::InverseDecay { rate, power } => (rate, power),
            LrSchedule::Constant => (0.0, 0.0),
        };
        OptimizerSection {
            lr: o.lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            iterations: o.iterations,
            schedule: Schedule::InverseDecay,
            decay_rate,
            decay_power,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    /// Half source, half labeled target.
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub eval_interval: usize,
    /// Write a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    /// Also write every bank event to `bank_log.jsonl`.
    pub bank_log: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            mode: Mode::Dfa,
            seeds: vec![0],
            labeled_batch: t.labeled_batch,
            unlabeled_batch: t.unlabeled_batch,
            eval_interval: t.eval_interval,
            checkpoint_interval: 0,
            bank_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs/default".into() }
    }
}

/// Every setting of an experiment. Only `dataset.n_classes` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub bank: BankSection,
    #[serde(default)]
    pub alignment: AlignmentSection,
    #[serde(default)]
    pub pseudo: PseudoSection,
    #[serde(default)]
    pub perturb: PerturbSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

mod d {
    use dfa_core::datasets::{MixtureSpec, ShiftKind};

    pub fn shift_kind() -> ShiftKind {
        ShiftKind::Rotation
    }
    pub fn shift_magnitude() -> f64 {
        30.0
    }
    pub fn dim() -> usize {
        MixtureSpec::benchmark().dim
    }
    pub fn n_samples() -> usize {
        MixtureSpec::benchmark().n_source
    }
    pub fn shots() -> usize {
        MixtureSpec::benchmark().shots
    }
    pub fn radius() -> f64 {
        MixtureSpec::benchmark().radius
    }
    pub fn cluster_std() -> f64 {
        MixtureSpec::benchmark().cluster_std
    }
    pub fn moon_noise() -> f64 {
        0.1
    }
}

/// One `key=value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
    pub origin: String,
}

impl Override {
    /// Parses `key=value` from a `--set` flag.
    pub fn parse(s: &str) -> Result<Self> {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{s}` is not of the form key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Usage(format!("override `{s}` has an empty key")));
        }
        Ok(Override { key: key.to_string(), value: value.trim().to_string(), origin: format!("--set {s}") })
    }

    /// Full dotted key after alias expansion.
    pub fn path(&self) -> String {
        resolve_alias(&self.key)
    }
}

pub fn resolve_alias(key: &str) -> String {
    ALIASES.iter().find(|(a, _)| *a == key).map(|(_, full)| full.to_string()).unwrap_or_else(|| key.to_string())
}

/// Overrides from `DFA__SECTION__KEY=value` pairs; other variables are ignored.
pub fn env_overrides<I>(vars: I) -> Vec<Override>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut out: Vec<Override> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let key = rest.split("__").map(str::to_ascii_lowercase).collect::<Vec<_>>().join(".");
            Some(Override { key, value: v, origin: format!("environment variable {k}") })
        })
        .collect();
    out.sort_by(|a, b| a.key.cmp(&b.key));
    out
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, ov: &Override) -> Result<()> {
    let path = ov.path();
    let parts: Vec<&str> = path.split('.').collect();
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("{}: `{p}` is not a table", ov.origin)))?;
    }
    node.insert(last.to_string(), parse_value(&ov.value));
    Ok(())
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Line of `key` in a TOML document, found by tracking `[section]` headers.
pub fn find_key_line(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = match dotted.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", dotted),
    };
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            if current == dotted {
                return Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn has_key(table: &toml::Table, dotted: &str) -> bool {
    let mut node = table;
    let parts: Vec<&str> = dotted.split('.').collect();
    let (last, parents) = parts.split_last().expect("non-empty key");
    for p in parents {
        match node.get(*p).and_then(|v| v.as_table()) {
            Some(t) => node = t,
            None => return false,
        }
    }
    node.contains_key(*last)
}

const REQUIRED: &[&str] = &["dataset.n_classes"];

/// Parses `text` (named `source` in messages), applies `overrides` in order
/// and validates the result.
pub fn load_str(text: &str, source: &str, overrides: &[Override]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let location = match e.span() {
            Some(span) => {
                let (l, c) = line_col(text, span.start);
                format!("{source}:{l}:{c}")
            }
            None => source.to_string(),
        };
        Error::Config { location, message: e.message().to_string() }
    })?;

    // Structural errors in the file itself (unknown keys, wrong types) are
    // reported against the file, where toml knows the exact span.
    if let Err(e) = toml::from_str::<ExperimentConfig>(text) {
        if !e.message().starts_with("missing field") {
            if let Some(span) = e.span() {
                let (l, c) = line_col(text, span.start);
                return Err(Error::Config { location: format!("{source}:{l}:{c}"), message: e.message().to_string() });
            }
        }
    }

    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    for key in REQUIRED {
        if !has_key(&table, key) {
            let section = key.rsplit_once('.').map_or("", |(s, _)| s);
            let location = match find_key_line(text, section) {
                Some(l) => format!("{source}:{l} (section [{section}])"),
                None => source.to_string(),
            };
            return Err(Error::MissingKey { key: key.to_string(), location });
        }
    }
    let config: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| {
        let message = e.message();
        let field = message.split('`').nth(1);
        let culprit = overrides.iter().rev().find(|o| o.path().split('.').any(|seg| Some(seg) == field));
        let origin = match culprit {
            Some(o) => o.origin.clone(),
            None if overrides.is_empty() => source.to_string(),
            None => format!("{source} with overrides"),
        };
        Error::Config { location: origin, message: e.message().to_string() }
    })?;

    if let Err((key, message)) = config.check() {
        let location = if let Some(ov) = overrides.iter().rev().find(|o| o.path() == key) {
            ov.origin.clone()
        } else if let Some(l) = find_key_line(text, &key) {
            format!("{source}:{l}")
        } else {
            source.to_string()
        };
        return Err(Error::Config { location, message: format!("`{key}` {message}") });
    }
    Ok(config)
}

pub fn load_file(path: &Path, overrides: &[Override]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_str(&text, &path.display().to_string(), overrides)
}

type Check = std::result::Result<(), (String, String)>;

fn ensure(ok: bool, key: &str, message: &str) -> Check {
    if ok {
        Ok(())
    } else {
        Err((key.to_string(), message.to_string()))
    }
}

fn finite_nonneg(v: f64, key: &str) -> Check {
    ensure(v.is_finite() && v >= 0.0, key, "must be finite and >= 0")
}

fn positive(v: f64, key: &str) -> Check {
    ensure(v.is_finite() && v > 0.0, key, "must be finite and > 0")
}

impl ExperimentConfig {
    /// Defaults everywhere, with the benchmark dataset.
    pub fn benchmark() -> Self {
        load_str("[dataset]\nn_classes = 5\n", "<builtin>", &[]).expect("builtin config is valid")
    }

    /// Range checks, each reporting the offending dotted key.
    pub fn check(&self) -> Check {
        let ds = &self.dataset;
        ensure(ds.n_classes >= 2, "dataset.n_classes", "must be >= 2")?;
        ensure(ds.shots >= 1, "dataset.shots", "must be >= 1")?;
        ensure(ds.n_source >= ds.n_classes, "dataset.n_source", "must be >= dataset.n_classes")?;
        ensure(ds.n_unlabeled >= ds.n_classes, "dataset.n_unlabeled", "must be >= dataset.n_classes")?;
        ensure(ds.dim >= 1, "dataset.dim", "must be >= 1")?;
        if ds.kind == DatasetKind::TwoMoons {
            ensure(ds.n_classes == 2, "dataset.n_classes", "must be 2 for two_moons")?;
            ensure(ds.dim == 2, "dataset.dim", "must be 2 for two_moons")?;
        }
        finite_nonneg(ds.cluster_std, "dataset.cluster_std")?;
        finite_nonneg(ds.moon_noise, "dataset.moon_noise")?;
        ensure(ds.radius.is_finite(), "dataset.radius", "must be finite")?;
        ensure(ds.shift.magnitude.is_finite(), "dataset.shift.magnitude", "must be finite")?;
        finite_nonneg(ds.shift.noise_std, "dataset.shift.noise_std")?;
        if matches!(ds.shift.kind, ShiftKind::Rotation | ShiftKind::Mixed) {
            ensure(ds.dim >= 2, "dataset.dim", "must be >= 2 for a rotation shift")?;
        }
        if let Some(w) = &ds.shift.class_imbalance {
            ensure(w.len() == ds.n_classes, "dataset.shift.class_imbalance", "needs one weight per class")?;
            ensure(w.iter().all(|v| v.is_finite() && *v > 0.0), "dataset.shift.class_imbalance", "weights must be > 0")?;
        }

        let m = &self.model;
        ensure(m.hidden.iter().all(|&h| h > 0), "model.hidden", "widths must be >= 1")?;
        ensure(m.feature_dim >= 1, "model.feature_dim", "must be >= 1")?;
        positive(m.temperature, "model.temperature")?;

        ensure((0.0..=1.0).contains(&self.bank.gamma), "bank.gamma", "must lie in [0, 1]")?;

        let a = &self.alignment;
        match a.bandwidth {
            Bandwidth::Median => ensure(a.n_kernels >= 1, "alignment.n_kernels", "must be >= 1")?,
            Bandwidth::Fixed => ensure(
                !a.sigmas.is_empty() && a.sigmas.iter().all(|s| s.is_finite() && *s > 0.0),
                "alignment.sigmas",
                "must be a non-empty list of positive bandwidths",
            )?,
        }

        let p = &self.pseudo;
        positive(p.tau_p, "pseudo.tau_p")?;
        ensure(p.eps_dist.is_finite(), "pseudo.eps_dist", "must be finite")?;
        ensure(p.eps_ent.is_finite(), "pseudo.eps_ent", "must be finite")?;
        ensure((0.0..=1.0).contains(&p.warmup_frac), "pseudo.warmup_frac", "must lie in [0, 1]")?;

        positive(self.perturb.radius, "perturb.radius")?;
        positive(self.perturb.xi, "perturb.xi")?;
        ensure(self.perturb.power_iters >= 1, "perturb.power_iters", "must be >= 1")?;

        let l = &self.loss;
        finite_nonneg(l.alpha_mmd, "loss.alpha_mmd")?;
        finite_nonneg(l.alpha_pseudo, "loss.alpha_pseudo")?;
        finite_nonneg(l.alpha_perturb, "loss.alpha_perturb")?;
        finite_nonneg(l.ent_weight, "loss.ent_weight")?;

        let o = &self.optimizer;
        positive(o.lr, "optimizer.lr")?;
        ensure((0.0..1.0).contains(&o.momentum), "optimizer.momentum", "must lie in [0, 1)")?;
        finite_nonneg(o.weight_decay, "optimizer.weight_decay")?;
        ensure(o.iterations >= 1, "optimizer.iterations", "must be >= 1")?;
        finite_nonneg(o.decay_rate, "optimizer.decay_rate")?;
        finite_nonneg(o.decay_power, "optimizer.decay_power")?;

        let t = &self.train;
        ensure(!t.seeds.is_empty(), "train.seeds", "must list at least one seed")?;
        ensure(t.labeled_batch >= 2 && t.labeled_batch.is_multiple_of(2), "train.labeled_batch", "must be even and >= 2")?;
        ensure(t.unlabeled_batch >= 2, "train.unlabeled_batch", "must be >= 2")?;
        ensure(t.eval_interval >= 1, "train.eval_interval", "must be >= 1")?;
        ensure(
            t.checkpoint_interval.is_multiple_of(t.eval_interval),
            "train.checkpoint_interval",
            "must be a multiple of train.eval_interval",
        )?;
        ensure(!self.output.dir.is_empty(), "output.dir", "must not be empty")?;
        Ok(())
    }

    pub fn shift(&self) -> ShiftSpec {
        let s = &self.dataset.shift;
        ShiftSpec { kind: s.kind, magnitude: s.magnitude, class_imbalance: s.class_imbalance.clone(), noise_std: s.noise_std }
    }

    /// Trainer settings for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let kernel = match self.alignment.bandwidth {
            Bandwidth::Median => KernelSpec {
                strategy: BandwidthStrategy::MedianHeuristic,
                sigmas: Vec::new(),
                n_kernels: self.alignment.n_kernels,
            },
            Bandwidth::Fixed => KernelSpec::fixed(self.alignment.sigmas.clone()),
        };
        let o = &self.optimizer;
        TrainConfig {
            mode: self.train.mode,
            seed,
            model: ModelConfig {
                hidden: self.model.hidden.clone(),
                feature_dim: self.model.feature_dim,
                activation: self.model.activation,
                temperature: self.model.temperature,
                normalize_weights: self.model.normalize_weights,
            },
            optimizer: OptimizerConfig {
                lr: o.lr,
                momentum: o.momentum,
                weight_decay: o.weight_decay,
                iterations: o.iterations,
                schedule: match o.schedule {
                    Schedule::InverseDecay => LrSchedule::InverseDecay { rate: o.decay_rate, power: o.decay_power },
                    Schedule::Constant => LrSchedule::Constant,
                },
            },
            weights: LossWeights { mmd: self.loss.alpha_mmd, pseudo: self.loss.alpha_pseudo, perturb: self.loss.alpha_perturb },
            ent_weight: self.loss.ent_weight,
            warmup_frac: self.pseudo.warmup_frac,
            gamma: self.bank.gamma,
            tau_p: self.pseudo.tau_p,
            eps_dist: self.pseudo.eps_dist,
            eps_ent: self.pseudo.eps_ent,
            kernel,
            perturb: PerturbSpec {
                radius: self.perturb.radius,
                xi: self.perturb.xi,
                power_iters: self.perturb.power_iters,
            },
            labeled_batch: self.train.labeled_batch,
            unlabeled_batch: self.train.unlabeled_batch,
            eval_interval: self.train.eval_interval,
        }
    }

    /// Seed the episode for run seed `seed` is generated from.
    pub fn episode_seed(&self, seed: u64) -> u64 {
        self.dataset.seed.unwrap_or(seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML as lowercase hex, ignoring the output
    /// directory and the seed list: two configs with equal hashes train any
    /// given seed identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        c.train.seeds.clear();
        Sha256::digest(c.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[dataset]\nn_classes = 5\n";

    fn set(s: &str) -> Override {
        Override::parse(s).unwrap()
    }

    #[test]
    fn defaults_match_the_trainer() {
        let c = load_str(MINIMAL, "t", &[]).unwrap();
        let t = c.train_config(3);
        let expected = TrainConfig { seed: 3, ..TrainConfig::default() };
        assert_eq!(t, expected);
        assert_eq!(c.bank.gamma, 0.1);
        assert_eq!(c.model.temperature, 0.05);
        assert_eq!(c.pseudo.tau_p, 0.07);
    }

    #[test]
    fn missing_class_count_is_named() {
        let err = load_str("[dataset]\nshots = 3\n", "cfg.toml", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dataset.n_classes"), "{msg}");
        assert!(msg.contains("cfg.toml:1"), "{msg}");
        let err = load_str("[model]\nfeature_dim = 3\n", "cfg.toml", &[]).unwrap_err();
        assert!(err.to_string().contains("dataset.n_classes"));
        assert!(load_str("[dataset]\nshots = 3\n", "cfg.toml", &[set("dataset.n_classes=4")]).is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = "[dataset]\nn_classes = 5\n\n[bank]\ngama = 0.2\n";
        let msg = load_str(text, "cfg.toml", &[]).unwrap_err().to_string();
        assert!(msg.starts_with("cfg.toml:5:"), "{msg}");
        assert!(msg.contains("gama"), "{msg}");
        let msg = load_str(MINIMAL, "cfg.toml", &[set("bank.gama=0.2")]).unwrap_err().to_string();
        assert!(msg.starts_with("--set bank.gama=0.2:") && msg.contains("gama"), "{msg}");
        let msg = load_str(MINIMAL, "cfg.toml", &[set("lr=0.1"), set("eval_interval=5"), set("output.dir=x")]).unwrap_err().to_string();
        assert!(msg.starts_with("--set eval_interval=5:"), "{msg}");
    }

    #[test]
    fn wrong_types_and_ranges_are_located() {
        let text = "[dataset]\nn_classes = 5\n[optimizer]\nlr = \"fast\"\n";
        assert!(load_str(text, "c", &[]).unwrap_err().to_string().starts_with("c:4:"));
        let text = "[dataset]\nn_classes = 5\n[bank]\n\ngamma = 1.5\n";
        let msg = load_str(text, "c", &[]).unwrap_err().to_string();
        assert!(msg.starts_with("c:5:") && msg.contains("bank.gamma"), "{msg}");
        let msg = load_str(MINIMAL, "c", &[set("gamma=-1")]).unwrap_err().to_string();
        assert!(msg.contains("--set gamma=-1"), "{msg}");
        assert!(load_str("[dataset\n", "c", &[]).unwrap_err().to_string().starts_with("c:1:"));
    }

    #[test]
    fn aliases_and_multiple_overrides() {
        let ovs = [set("alpha1=0"), set("alpha2=0"), set("alpha3=0"), set("mode=s+t"), set("seeds=[1, 2]")];
        let c = load_str(MINIMAL, "c", &ovs).unwrap();
        assert_eq!((c.loss.alpha_mmd, c.loss.alpha_pseudo, c.loss.alpha_perturb), (0.0, 0.0, 0.0));
        assert_eq!(c.train.mode, Mode::SourceTarget);
        assert_eq!(c.train.seeds, vec![1, 2]);
        let c = load_str(MINIMAL, "c", &[set("dataset.shift.kind=translation"), set("gamma=0.25")]).unwrap();
        assert_eq!(c.dataset.shift.kind, ShiftKind::Translation);
        assert_eq!(c.bank.gamma, 0.25);
    }

    #[test]
    fn environment_variables_map_to_keys() {
        let vars = vec![
            ("DFA__BANK__GAMMA".to_string(), "0.75".to_string()),
            ("DFA__OPTIMIZER__ITERATIONS".to_string(), "7".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let ovs = env_overrides(vars);
        assert_eq!(ovs.len(), 2);
        let c = load_str(MINIMAL, "c", &ovs).unwrap();
        assert_eq!(c.bank.gamma, 0.75);
        assert_eq!(c.optimizer.iterations, 7);
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "[dataset]\nn_classes = 3\nseed = 4\n[dataset.shift]\nclass_imbalance = [1.0, 2.0, 0.5]\n[alignment]\nbandwidth = \"fixed\"\nsigmas = [0.5, 1.0]\n";
        let c = load_str(text, "c", &[set("optimizer.schedule=constant")]).unwrap();
        let again = load_str(&c.to_toml(), "resolved", &[]).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        assert_eq!(c.hash().len(), 64);
        assert_ne!(c.hash(), ExperimentConfig::benchmark().hash());
    }

    #[test]
    fn two_moons_needs_two_classes() {
        let msg = load_str("[dataset]\nkind = \"two_moons\"\nn_classes = 3\n", "c", &[]).unwrap_err().to_string();
        assert!(msg.contains("c:3") && msg.contains("two_moons"), "{msg}");
    }

    #[test]
    fn malformed_set_flags() {
        assert!(Override::parse("gamma").is_err());
        assert!(Override::parse("=3").is_err());
        assert_eq!(Override::parse("output.dir=runs/x").unwrap().value, "runs/x");
    }
}
