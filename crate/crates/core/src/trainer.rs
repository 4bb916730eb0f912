//! The training loop: weighted objective, SGD with momentum, and evaluation
//! on the hidden unlabeled labels.
//!
//! One iteration runs, in order: the labeled forward pass and supervised
//! loss; the intermediate-bank update with this batch's predictions followed
//! by the EWMA of the dynamic bank; a prototype snapshot; MMD of the unlabeled
//! batch against the snapshot; selection and pseudo-label loss; the
//! perturbation loss on unlabeled plus labeled-target inputs; one SGD step on
//! the weighted sum.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{self, KernelSpec};
use crate::datasets::{self, Domain, LabeledBatch, SSDAEpisode, UnlabeledBatch};
use crate::error::{config_err, Error, Result};
use crate::linalg::{self, Matrix};
use crate::membank::{self, DynamicBank, IntermediateBank, UpdateLog};
use crate::model::{self, Activation, Backbone, Grads, Mlp, MlpSpec, Model};
use crate::perturb::{self, PerturbSpec};
use crate::pseudolabel::{self, PseudoBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Mode {
    /// Full objective: supervised, MMD, pseudo-label and perturbation terms.
    #[default]
    #[cfg_attr(feature = "serde", serde(rename = "dfa"))]
    Dfa,
    /// Supervised loss on labeled source and target only.
    #[cfg_attr(feature = "serde", serde(rename = "s+t"))]
    SourceTarget,
    /// Supervised loss plus entropy minimization on unlabeled target.
    #[cfg_attr(feature = "serde", serde(rename = "ent"))]
    Ent,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dfa => "dfa",
            Mode::SourceTarget => "s+t",
            Mode::Ent => "ent",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "dfa" => Ok(Mode::Dfa),
            "s+t" | "st" | "source-target" => Ok(Mode::SourceTarget),
            "ent" => Ok(Mode::Ent),
            other => Err(config_err(alloc::format!("unknown mode `{other}` (expected dfa, s+t or ent)"))),
        }
    }
}

/// Weights of the MMD, pseudo-label and perturbation terms.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub mmd: f64,
    pub pseudo: f64,
    pub perturb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mmd: 1.0, pseudo: 1.0, perturb: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LrSchedule {
    /// `lr_t = lr_0 * (1 + rate * t)^(-power)`.
    InverseDecay { rate: f64, power: f64 },
    Constant,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::InverseDecay { rate: 1e-4, power: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 0.01, momentum: 0.9, weight_decay: 5e-4, iterations: 1000, schedule: LrSchedule::default() }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::InverseDecay { rate, power } => self.lr * libm::pow(1.0 + rate * iteration as f64, -power),
        }
    }
}

/// Extractor and classifier shape.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub temperature: f64,
    pub normalize_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32, 32],
            feature_dim: 16,
            activation: Activation::Tanh,
            temperature: model::DEFAULT_TEMPERATURE,
            normalize_weights: true,
        }
    }
}

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    /// Weight of the entropy term in `ent` mode.
    pub ent_weight: f64,
    /// Fraction of iterations during which the pseudo-label weight is zero.
    pub warmup_frac: f64,
    pub gamma: f64,
    pub tau_p: f64,
    pub eps_dist: f64,
    pub eps_ent: f64,
    pub kernel: KernelSpec,
    pub perturb: PerturbSpec,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Iterations between metrics records; the last iteration is always recorded.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Dfa,
            seed: 0,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            ent_weight: 0.1,
            warmup_frac: 0.1,
            gamma: membank::DEFAULT_GAMMA,
            tau_p: pseudolabel::DEFAULT_PROTO_TEMPERATURE,
            eps_dist: pseudolabel::EPS_DIST_STRONG,
            eps_ent: pseudolabel::DEFAULT_EPS_ENT,
            kernel: KernelSpec::default(),
            perturb: PerturbSpec::default(),
            labeled_batch: 32,
            unlabeled_batch: 32,
            eval_interval: 100,
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v < 0.0 || !v.is_finite() {
        return Err(config_err(alloc::format!("{name} must be finite and >= 0")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if o.lr <= 0.0 || !o.lr.is_finite() {
            return Err(config_err("optimizer.lr must be > 0"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(config_err("optimizer.momentum must lie in [0, 1)"));
        }
        non_negative("optimizer.weight_decay", o.weight_decay)?;
        if o.iterations == 0 {
            return Err(config_err("optimizer.iterations must be >= 1"));
        }
        if let LrSchedule::InverseDecay { rate, power } = o.schedule {
            non_negative("lr schedule rate", rate)?;
            non_negative("lr schedule power", power)?;
        }
        non_negative("alpha1", self.weights.mmd)?;
        non_negative("alpha2", self.weights.pseudo)?;
        non_negative("alpha3", self.weights.perturb)?;
        non_negative("ent_weight", self.ent_weight)?;
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(config_err("warmup_frac must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(config_err("gamma must lie in [0, 1]"));
        }
        if self.tau_p <= 0.0 || !self.tau_p.is_finite() {
            return Err(config_err("tau_p must be > 0"));
        }
        if self.model.temperature <= 0.0 || !self.model.temperature.is_finite() {
            return Err(config_err("model.temperature must be > 0"));
        }
        if !self.eps_dist.is_finite() || !self.eps_ent.is_finite() {
            return Err(config_err("selection thresholds must be finite"));
        }
        self.kernel.validate()?;
        self.perturb.validate()?;
        if self.labeled_batch < 2 || !self.labeled_batch.is_multiple_of(2) {
            return Err(config_err("labeled_batch must be even and >= 2"));
        }
        if self.unlabeled_batch < 2 {
            return Err(config_err("unlabeled_batch must be >= 2"));
        }
        if self.eval_interval == 0 {
            return Err(config_err("eval_interval must be >= 1"));
        }
        Ok(())
    }

    pub fn warmup_iters(&self) -> usize {
        libm::floor(self.warmup_frac * self.optimizer.iterations as f64) as usize
    }

    /// Weights actually applied at `iteration`, after mode and warm-up.
    pub fn effective_weights(&self, iteration: usize) -> LossWeights {
        match self.mode {
            Mode::Dfa => LossWeights {
                pseudo: if iteration < self.warmup_iters() { 0.0 } else { self.weights.pseudo },
                ..self.weights
            },
            Mode::SourceTarget | Mode::Ent => LossWeights { mmd: 0.0, pseudo: 0.0, perturb: 0.0 },
        }
    }

    pub fn mlp_spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden: self.model.hidden.clone(),
            output_dim: self.model.feature_dim,
            activation: self.model.activation,
        }
    }
}

/// Independent seed for one consumer of randomness (splitmix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_MODEL: u64 = 1;
const STREAM_LABELED: u64 = 2;
const STREAM_UNLABELED: u64 = 3;
const STREAM_PERTURB: u64 = 4;

/// SGD with momentum and decoupled-from-nothing (L2) weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n_params: usize) -> Self {
        Sgd { velocity: vec![0.0; n_params] }
    }

    /// `v <- mu v + (g + wd theta)`, `theta <- theta - lr v`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g + weight_decay * *p;
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Mutable state of a run.
#[derive(Debug, Clone)]
pub struct TrainState<B = Mlp> {
    pub model: Model<B>,
    pub optimizer: Sgd,
    pub intermediate: IntermediateBank,
    pub bank: DynamicBank,
    /// Number of completed steps.
    pub iteration: usize,
    perturb_rng: ChaCha8Rng,
}

impl TrainState<Mlp> {
    /// Seeded MLP model plus banks initialized from labeled class means.
    pub fn new(episode: &SSDAEpisode, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::mlp(
            &config.mlp_spec(episode.dim()),
            episode.n_classes(),
            config.model.temperature,
            config.model.normalize_weights,
            sub_seed(config.seed, STREAM_MODEL),
        )?;
        TrainState::with_model(episode, model, config)
    }
}

impl<B: Backbone> TrainState<B> {
    pub fn with_model(episode: &SSDAEpisode, model: Model<B>, config: &TrainConfig) -> Result<Self> {
        let (intermediate, bank) = membank::init_banks(episode, &model, config.gamma)?;
        Ok(TrainState {
            optimizer: Sgd::new(model.num_params()),
            model,
            intermediate,
            bank,
            iteration: 0,
            perturb_rng: ChaCha8Rng::seed_from_u64(sub_seed(config.seed, STREAM_PERTURB)),
        })
    }
}

/// Everything one step computed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub ent_weight: f64,
    pub l_cls: f64,
    pub l_mmd: f64,
    pub l_pseudo: f64,
    pub l_perturb: f64,
    pub l_ent: f64,
    pub total: f64,
    pub labeled_predictions: Vec<usize>,
    pub n_unlabeled: usize,
    pub n_dist: usize,
    pub n_ent: usize,
    pub n_pse: usize,
    /// Rows of the episode's unlabeled set that were pseudo-labeled, with their labels.
    pub pseudo_labeled: Vec<(usize, usize)>,
    pub perturb_fallbacks: usize,
    pub bank_log: UpdateLog,
}

impl StepReport {
    /// Recombines the logged terms with the logged weights.
    pub fn recomputed_total(&self) -> f64 {
        self.l_cls
            + self.weights.mmd * self.l_mmd
            + self.weights.pseudo * self.l_pseudo
            + self.weights.perturb * self.l_perturb
            + self.ent_weight * self.l_ent
    }
}

fn check_finite(term: &'static str, iteration: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, iteration, value })
    }
}

/// Mean prediction entropy over a batch and its gradient w.r.t. the logits.
pub fn entropy_loss(probs: &Matrix) -> (f64, Matrix) {
    let n = probs.rows() as f64;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    let mut total = 0.0;
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let h = pseudolabel::entropy(p);
        total += h;
        // dH/dz_k = -p_k (ln p_k + H)
        for (g, &pk) in grad.row_mut(i).iter_mut().zip(p) {
            let lp = if pk > 0.0 { libm::log(pk) } else { 0.0 };
            *g = -pk * (lp + h) / n;
        }
    }
    (total / n, grad)
}

/// Quantities a step treats as constants: the prototype snapshot, kernel
/// bandwidths, pseudo-labels, perturbations and clean perturbation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenStep {
    pub prototypes: Matrix,
    pub sigmas: Vec<f64>,
    pub pseudo: PseudoBatch,
    pub perturb_x: Matrix,
    pub perturb_r: Matrix,
    pub perturb_target: Matrix,
}

/// Everything but the update: all loss terms of one iteration and the parameter
/// gradient of their weighted sum. Updates the banks and the perturbation
/// stream but not the parameters.
pub fn step_gradients<B: Backbone>(
    state: &mut TrainState<B>,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    config: &TrainConfig,
) -> Result<(StepReport, Grads, Option<FrozenStep>)> {
    let it = state.iteration;
    let weights = config.effective_weights(it);
    let model = &state.model;

    // (1) supervised term
    let pass_l = model.forward(&labeled.x)?;
    let (l_cls, g_cls) = model::classification_loss(&pass_l.logits, &labeled.y)?;
    let l_cls = check_finite("cls", it, l_cls)?;
    let (mut grads, _) = model.backward(&pass_l, Some(&g_cls), None)?;
    let labeled_predictions = pass_l.predictions();

    let mut report = StepReport {
        iteration: it,
        lr: config.optimizer.lr_at(it),
        weights,
        ent_weight: 0.0,
        l_cls,
        l_mmd: 0.0,
        l_pseudo: 0.0,
        l_perturb: 0.0,
        l_ent: 0.0,
        total: 0.0,
        labeled_predictions,
        n_unlabeled: 0,
        n_dist: 0,
        n_ent: 0,
        n_pse: 0,
        pseudo_labeled: Vec::new(),
        perturb_fallbacks: 0,
        bank_log: UpdateLog::default(),
    };
    let mut frozen = None;

    match config.mode {
        Mode::SourceTarget => {}
        Mode::Ent => {
            let ub = unlabeled.ok_or_else(|| config_err("ent mode needs an unlabeled batch"))?;
            let pass_u = model.forward(&ub.x)?;
            let (l_ent, g_ent) = entropy_loss(&pass_u.probs);
            report.l_ent = check_finite("ent", it, l_ent)?;
            report.ent_weight = config.ent_weight;
            report.n_unlabeled = ub.x.rows();
            if config.ent_weight != 0.0 {
                let (g, _) = model.backward(&pass_u, Some(&g_ent), None)?;
                grads.add_scaled(&g, config.ent_weight);
            }
        }
        Mode::Dfa => {
            let ub = unlabeled.ok_or_else(|| config_err("dfa mode needs an unlabeled batch"))?;
            // (2) banks
            let mut bank_log =
                state.intermediate.update(&pass_l.features, &labeled.y, &report.labeled_predictions, it)?;
            bank_log.extend(state.bank.ewma_update(&state.intermediate)?);
            report.bank_log = bank_log;
            // (3) snapshot
            let prototypes = state.bank.prototypes();

            // (4) alignment
            let pass_u = model.forward(&ub.x)?;
            let sigmas = config.kernel.resolve(&prototypes, &pass_u.features)?;
            let (l_mmd, g_mmd) = alignment::mmd_and_grad(&prototypes, &pass_u.features, &sigmas)?;
            report.l_mmd = check_finite("mmd", it, l_mmd)?;

            // (5) selection and pseudo-labels
            let scores = pseudolabel::selection_scores(&pass_u.features, &prototypes, config.tau_p)?;
            let mask = pseudolabel::threshold(&scores, config.eps_dist, config.eps_ent)?;
            let pseudo = PseudoBatch::build(&mask, &scores, &pass_u.probs);
            let (l_pseudo, g_pseudo) = pseudolabel::pseudo_loss(&pass_u.logits, &pseudo)?;
            report.l_pseudo = check_finite("pseudo", it, l_pseudo)?;
            report.n_unlabeled = mask.len();
            report.n_dist = mask.n_dist();
            report.n_ent = mask.n_ent();
            report.n_pse = mask.n_pse();
            report.pseudo_labeled =
                pseudo.rows.iter().zip(&pseudo.labels).map(|(&r, &y)| (ub.rows[r], y)).collect();

            let mut g_feat = None;
            let mut g_logits = None;
            if weights.mmd != 0.0 {
                let mut g = g_mmd;
                g.scale(weights.mmd);
                g_feat = Some(g);
            }
            if weights.pseudo != 0.0 {
                let mut g = g_pseudo;
                g.scale(weights.pseudo);
                g_logits = Some(g);
            }
            if g_feat.is_some() || g_logits.is_some() {
                let (g, _) = model.backward(&pass_u, g_logits.as_ref(), g_feat.as_ref())?;
                grads.add_scaled(&g, 1.0);
            }

            // (6) perturbation consistency on unlabeled and labeled-target inputs
            let target_rows = labeled.target_rows();
            assert!(target_rows.iter().all(|&r| labeled.domain[r] == Domain::Target));
            let x_pert = ub.x.vstack(&labeled.x.select_rows(&target_rows));
            let pl = perturb::perturb_loss(&x_pert, model, &config.perturb, &mut state.perturb_rng)?;
            report.l_perturb = check_finite("perturb", it, pl.loss)?;
            report.perturb_fallbacks = pl.perturbation.fallback_rows.len();
            if weights.perturb != 0.0 {
                grads.add_scaled(&pl.grads, weights.perturb);
            }
            frozen = Some(FrozenStep {
                prototypes,
                sigmas,
                pseudo,
                perturb_target: perturb::clean_targets(&x_pert, model)?,
                perturb_x: x_pert,
                perturb_r: pl.perturbation.r,
            });
        }
    }

    report.total = check_finite("total", it, report.recomputed_total())?;
    if let Some(bad) = grads.flatten().into_iter().find(|g| !g.is_finite()) {
        return Err(Error::NonFinite { term: "gradient", iteration: it, value: bad });
    }
    Ok((report, grads, frozen))
}

/// One optimization step: [`step_gradients`] followed by an SGD update.
/// `unlabeled` may be `None` only in `s+t` mode.
pub fn train_step<B: Backbone>(
    state: &mut TrainState<B>,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    config: &TrainConfig,
) -> Result<StepReport> {
    let it = state.iteration;
    let (report, grads, _) = step_gradients(state, labeled, unlabeled, config).map_err(|e| match e {
        // A NaN feature norm means the network itself has diverged.
        Error::DegenerateFeature { norm } if !norm.is_finite() => Error::NonFinite { term: "features", iteration: it, value: norm },
        e => e,
    })?;
    let mut params = state.model.params();
    state.optimizer.step(
        &mut params,
        &grads.flatten(),
        report.lr,
        config.optimizer.momentum,
        config.optimizer.weight_decay,
    );
    if let Some(&bad) = params.iter().find(|p| !p.is_finite()) {
        return Err(Error::NonFinite { term: "parameters", iteration: it, value: bad });
    }
    state.model.set_params(&params);
    state.iteration += 1;
    Ok(report)
}

/// Target accuracy on the hidden labels of the unlabeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the unlabeled set.
    pub per_class: Vec<Option<f64>>,
    pub n: usize,
}

/// Argmax accuracy of `model` on the episode's unlabeled set.
pub fn evaluate<B: Backbone>(model: &Model<B>, episode: &SSDAEpisode) -> Result<Evaluation> {
    let pass = model.forward(episode.unlabeled_inputs())?;
    let preds = pass.predictions();
    Ok(score_predictions(&preds, episode.hidden_labels(), episode.n_classes()))
}

pub fn score_predictions(predictions: &[usize], labels: &[usize], n_classes: usize) -> Evaluation {
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let n = labels.len();
    let correct: usize = hits.iter().sum();
    Evaluation {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { None } else { Some(h as f64 / t as f64) })
            .collect(),
        n,
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRecord {
    /// Completed iterations at the time of the record.
    pub iteration: usize,
    pub lr: f64,
    pub alpha_mmd: f64,
    pub alpha_pseudo: f64,
    pub alpha_perturb: f64,
    pub ent_weight: f64,
    pub l_cls: f64,
    pub l_mmd: f64,
    pub l_pseudo: f64,
    pub l_perturb: f64,
    pub l_ent: f64,
    pub total: f64,
    pub target_accuracy: f64,
    /// Selection-set sizes summed over the interval.
    pub n_unlabeled_seen: usize,
    pub n_dist: usize,
    pub n_ent: usize,
    pub n_pse: usize,
    /// Fraction of pseudo-labels in the interval that match the hidden label.
    pub pseudo_precision: Option<f64>,
    /// Mean angle (radians) each prototype moved since the previous record.
    pub bank_drift: f64,
    pub perturb_fallbacks: usize,
}

/// Final state and history of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<B = Mlp> {
    pub state: TrainState<B>,
    pub history: Vec<MetricsRecord>,
    pub bank_log: UpdateLog,
    pub final_evaluation: Evaluation,
}

fn mean_row_angle(a: &Matrix, b: &Matrix) -> f64 {
    let k = a.rows();
    (0..k).map(|i| linalg::angle_between(a.row(i), b.row(i))).sum::<f64>() / k as f64
}

#[derive(Debug, Default)]
struct IntervalStats {
    n_unlabeled: usize,
    n_dist: usize,
    n_ent: usize,
    n_pse: usize,
    pseudo_correct: usize,
    fallbacks: usize,
}

/// Runs `config.optimizer.iterations` steps. `on_record` sees the state after
/// every metrics record (used for checkpointing).
pub fn train_with<F>(episode: &SSDAEpisode, config: &TrainConfig, mut on_record: F) -> Result<TrainOutcome>
where
    F: FnMut(&TrainState, &MetricsRecord),
{
    let mut state = TrainState::new(episode, config)?;
    let mut labeled = datasets::balanced_labeled_iterator(episode, config.labeled_batch, sub_seed(config.seed, STREAM_LABELED))?;
    let needs_unlabeled = config.mode != Mode::SourceTarget;
    let mut unlabeled = datasets::unlabeled_iterator(episode, config.unlabeled_batch, sub_seed(config.seed, STREAM_UNLABELED))?;
    let hidden = episode.hidden_labels();

    let mut history = Vec::new();
    let mut bank_log = UpdateLog::default();
    let mut stats = IntervalStats::default();
    let mut last_prototypes = state.bank.prototypes();
    let total_iters = config.optimizer.iterations;

    for _ in 0..total_iters {
        let lb = labeled.next().expect("endless iterator");
        let ub = if needs_unlabeled { unlabeled.next() } else { None };
        let report = train_step(&mut state, &lb, ub.as_ref(), config)?;

        stats.n_unlabeled += report.n_unlabeled;
        stats.n_dist += report.n_dist;
        stats.n_ent += report.n_ent;
        stats.n_pse += report.n_pse;
        stats.pseudo_correct += report.pseudo_labeled.iter().filter(|&&(row, y)| hidden[row] == y).count();
        stats.fallbacks += report.perturb_fallbacks;
        bank_log.extend(report.bank_log.clone());

        let done = state.iteration;
        if done % config.eval_interval == 0 || done == total_iters {
            let eval = evaluate(&state.model, episode)?;
            let prototypes = state.bank.prototypes();
            let record = MetricsRecord {
                iteration: done,
                lr: report.lr,
                alpha_mmd: report.weights.mmd,
                alpha_pseudo: report.weights.pseudo,
                alpha_perturb: report.weights.perturb,
                ent_weight: report.ent_weight,
                l_cls: report.l_cls,
                l_mmd: report.l_mmd,
                l_pseudo: report.l_pseudo,
                l_perturb: report.l_perturb,
                l_ent: report.l_ent,
                total: report.total,
                target_accuracy: eval.accuracy,
                n_unlabeled_seen: stats.n_unlabeled,
                n_dist: stats.n_dist,
                n_ent: stats.n_ent,
                n_pse: stats.n_pse,
                pseudo_precision: if stats.n_pse == 0 {
                    None
                } else {
                    Some(stats.pseudo_correct as f64 / stats.n_pse as f64)
                },
                bank_drift: mean_row_angle(&last_prototypes, &prototypes),
                perturb_fallbacks: stats.fallbacks,
            };
            on_record(&state, &record);
            history.push(record);
            last_prototypes = prototypes;
            stats = IntervalStats::default();
        }
    }
    let final_evaluation = evaluate(&state.model, episode)?;
    Ok(TrainOutcome { state, history, bank_log, final_evaluation })
}

pub fn train(episode: &SSDAEpisode, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(episode, config, |_, _| {})
}
