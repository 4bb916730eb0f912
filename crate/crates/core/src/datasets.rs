//! Synthetic semi-supervised domain adaptation episodes and the mini-batch
//! streams the trainer consumes.
//!
//! An episode holds a labeled source set, a `shots`-per-class labeled target
//! set and an unlabeled target set whose ground-truth labels are kept aside
//! for evaluation only. Training code reaches unlabeled data exclusively
//! through [`UnlabeledIter`], whose batches carry inputs and sample ids but no
//! labels.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, input_err, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: usize,
    pub domain: Domain,
    /// Identity of the sample within its domain's generation pool.
    pub id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ShiftKind {
    /// Rotation by `magnitude` degrees in the plane of the first two axes.
    Rotation,
    /// Translation by `magnitude` along the all-ones diagonal.
    Translation,
    /// Scaling of every coordinate by `1 + magnitude`.
    Scale,
    /// Rotation by `magnitude` degrees followed by scaling by `1 + magnitude / 180`.
    Mixed,
}

/// How the target domain differs from the source domain.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    /// Relative class frequencies in the target pool. Balanced when `None`.
    pub class_imbalance: Option<Vec<f64>>,
    /// Extra isotropic Gaussian noise added to target inputs only.
    pub noise_std: f64,
}

impl ShiftSpec {
    pub fn none() -> Self {
        ShiftSpec { kind: ShiftKind::Rotation, magnitude: 0.0, class_imbalance: None, noise_std: 0.0 }
    }

    pub fn rotation(degrees: f64) -> Self {
        ShiftSpec { magnitude: degrees, ..ShiftSpec::none() }
    }

    fn validate(&self, n_classes: usize, dim: usize) -> Result<()> {
        if !self.magnitude.is_finite() {
            return Err(config_err("shift magnitude must be finite"));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(config_err("shift noise_std must be finite and >= 0"));
        }
        if let Some(w) = &self.class_imbalance {
            if w.len() != n_classes {
                return Err(config_err("class_imbalance must have one weight per class"));
            }
            if w.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
                return Err(config_err("class_imbalance weights must be positive and finite"));
            }
        }
        match self.kind {
            ShiftKind::Rotation | ShiftKind::Mixed if dim < 2 => {
                Err(config_err("rotation shift needs dim >= 2"))
            }
            ShiftKind::Scale if self.magnitude.is_nan() || 1.0 + self.magnitude <= 0.0 => {
                Err(config_err("scale shift needs magnitude > -1"))
            }
            ShiftKind::Mixed if self.magnitude.is_nan() || 1.0 + self.magnitude / 180.0 <= 0.0 => {
                Err(config_err("mixed shift needs magnitude > -180"))
            }
            _ => Ok(()),
        }
    }

    fn apply(&self, x: &mut [f64]) {
        let rotate = |x: &mut [f64], degrees: f64| {
            let (s, c) = libm::sincos(degrees * PI / 180.0);
            let (a, b) = (x[0], x[1]);
            x[0] = c * a - s * b;
            x[1] = s * a + c * b;
        };
        match self.kind {
            ShiftKind::Rotation => rotate(x, self.magnitude),
            ShiftKind::Translation => {
                let step = self.magnitude / libm::sqrt(x.len() as f64);
                x.iter_mut().for_each(|v| *v += step);
            }
            ShiftKind::Scale => x.iter_mut().for_each(|v| *v *= 1.0 + self.magnitude),
            ShiftKind::Mixed => {
                rotate(x, self.magnitude);
                let s = 1.0 + self.magnitude / 180.0;
                x.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// Gaussian-mixture episode shape: one isotropic cluster per class, with
/// cluster means evenly spaced on a circle of `radius` in the first two axes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MixtureSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub n_source: usize,
    pub n_unlabeled: usize,
    pub shots: usize,
    pub radius: f64,
    pub cluster_std: f64,
}

impl MixtureSpec {
    /// Five classes in 2-D, 3 shots, 500 source and 500 unlabeled samples.
    pub fn benchmark() -> Self {
        MixtureSpec { n_classes: 5, dim: 2, n_source: 500, n_unlabeled: 500, shots: 3, radius: 2.0, cluster_std: 0.5 }
    }
}

/// A labeled source set, `shots` labeled target examples per class and an
/// unlabeled target set with hidden labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SSDAEpisode {
    n_classes: usize,
    shots: usize,
    dim: usize,
    source: Vec<LabeledExample>,
    target_labeled: Vec<LabeledExample>,
    unlabeled: Matrix,
    unlabeled_ids: Vec<usize>,
    hidden_labels: Vec<usize>,
}

impl SSDAEpisode {
    /// Assembles an episode from parts, checking every structural invariant.
    pub fn from_parts(
        n_classes: usize,
        shots: usize,
        source: Vec<LabeledExample>,
        target_labeled: Vec<LabeledExample>,
        unlabeled: Matrix,
        unlabeled_ids: Vec<usize>,
        hidden_labels: Vec<usize>,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(input_err("an episode needs at least two classes"));
        }
        if shots == 0 {
            return Err(input_err("shots must be >= 1"));
        }
        let dim = unlabeled.cols();
        if unlabeled.rows() != unlabeled_ids.len() || unlabeled.rows() != hidden_labels.len() {
            return Err(input_err("unlabeled inputs, ids and hidden labels differ in length"));
        }
        if !unlabeled.is_finite() {
            return Err(input_err("unlabeled inputs must be finite"));
        }
        let mut per_class = vec![0usize; n_classes];
        for ex in source.iter().chain(&target_labeled) {
            if ex.y >= n_classes {
                return Err(input_err("label out of range"));
            }
            if ex.x.len() != dim || ex.x.iter().any(|v| !v.is_finite()) {
                return Err(input_err("labeled inputs must be finite and share one dimension"));
            }
        }
        for ex in &target_labeled {
            if ex.domain != Domain::Target {
                return Err(input_err("target_labeled holds a non-target example"));
            }
            per_class[ex.y] += 1;
        }
        if per_class.iter().any(|&c| c != shots) {
            return Err(input_err("target_labeled must hold exactly `shots` examples per class"));
        }
        if source.iter().any(|ex| ex.domain != Domain::Source) {
            return Err(input_err("source holds a non-source example"));
        }
        if hidden_labels.iter().any(|&y| y >= n_classes) {
            return Err(input_err("hidden label out of range"));
        }
        if target_labeled.iter().any(|ex| unlabeled_ids.contains(&ex.id)) {
            return Err(input_err("labeled and unlabeled target sets overlap"));
        }
        Ok(SSDAEpisode {
            n_classes,
            shots,
            dim,
            source,
            target_labeled,
            unlabeled,
            unlabeled_ids,
            hidden_labels,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> &[LabeledExample] {
        &self.source
    }

    pub fn target_labeled(&self) -> &[LabeledExample] {
        &self.target_labeled
    }

    /// Unlabeled target inputs, one row per sample.
    pub fn unlabeled_inputs(&self) -> &Matrix {
        &self.unlabeled
    }

    /// Generation-pool ids of the unlabeled target samples.
    pub fn unlabeled_ids(&self) -> &[usize] {
        &self.unlabeled_ids
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.rows()
    }

    /// Ground truth for the unlabeled target set. Evaluation only: nothing in
    /// the training path reads this.
    pub fn hidden_labels(&self) -> &[usize] {
        &self.hidden_labels
    }

    /// Every labeled example, source first.
    pub fn labeled(&self) -> impl Iterator<Item = &LabeledExample> {
        self.source.iter().chain(&self.target_labeled)
    }
}

fn check_sizes(n_classes: usize, n_source: usize, n_unlabeled: usize, shots: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(config_err("n_classes must be >= 2"));
    }
    if shots < 1 {
        return Err(config_err("shots must be >= 1"));
    }
    if n_source < n_classes {
        return Err(config_err("n_source must be >= n_classes"));
    }
    if n_unlabeled < n_classes {
        return Err(config_err("n_unlabeled must be >= n_classes"));
    }
    Ok(())
}

/// Largest-remainder split of `total` into counts proportional to `weights`.
fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| libm::floor(*e) as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps lower class indices first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra)
    });
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[k] += 1;
        rest -= 1;
    }
    counts
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Cluster centre for class `k`.
fn cluster_mean(k: usize, spec: &MixtureSpec) -> Vec<f64> {
    let mut mean = vec![0.0; spec.dim];
    if spec.dim == 1 {
        mean[0] = spec.radius * (k as f64 - (spec.n_classes as f64 - 1.0) / 2.0);
    } else {
        let angle = 2.0 * PI * k as f64 / spec.n_classes as f64;
        let (s, c) = libm::sincos(angle);
        mean[0] = spec.radius * c;
        mean[1] = spec.radius * s;
    }
    mean
}

/// Labeled examples, unlabeled rows, their pool ids and their hidden labels.
type TargetSplit = (Vec<LabeledExample>, Matrix, Vec<usize>, Vec<usize>);

/// Splits a shuffled target pool into `shots` labeled examples per class (the
/// first ones met in pool order) and the unlabeled remainder.
fn split_target_pool(
    pool: Vec<(Vec<f64>, usize)>,
    n_classes: usize,
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TargetSplit> {
    let dim = pool.first().map_or(0, |(x, _)| x.len());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut taken = vec![0usize; n_classes];
    let mut labeled = Vec::with_capacity(n_classes * shots);
    let mut unlabeled = Vec::with_capacity(pool.len() * dim);
    let mut ids = Vec::new();
    let mut hidden = Vec::new();
    for id in order {
        let (x, y) = &pool[id];
        if taken[*y] < shots {
            taken[*y] += 1;
            labeled.push(LabeledExample { x: x.clone(), y: *y, domain: Domain::Target, id });
        } else {
            unlabeled.extend_from_slice(x);
            ids.push(id);
            hidden.push(*y);
        }
    }
    if taken.iter().any(|&t| t < shots) {
        return Err(config_err("not enough target samples to draw `shots` per class"));
    }
    // labeled set ordered by class, then by draw order
    labeled.sort_by_key(|ex| ex.y);
    let n = ids.len();
    Ok((labeled, Matrix::from_vec(n, dim, unlabeled), ids, hidden))
}

/// Generates a Gaussian-mixture episode. Deterministic in `seed`.
///
/// The source set is class balanced. The target pool holds
/// `n_unlabeled + n_classes * shots` samples split across classes by the
/// shift's class weights; `shots` per class are carved out as the labeled
/// target set and the rest become the unlabeled set.
pub fn make_synthetic_episode(seed: u64, spec: &MixtureSpec, shift: &ShiftSpec) -> Result<SSDAEpisode> {
    check_sizes(spec.n_classes, spec.n_source, spec.n_unlabeled, spec.shots)?;
    if spec.dim == 0 {
        return Err(config_err("dim must be >= 1"));
    }
    if spec.cluster_std < 0.0 || !spec.radius.is_finite() || !spec.cluster_std.is_finite() {
        return Err(config_err("radius and cluster_std must be finite, cluster_std >= 0"));
    }
    shift.validate(spec.n_classes, spec.dim)?;
    let k = spec.n_classes;
    let means: Vec<Vec<f64>> = (0..k).map(|c| cluster_mean(c, spec)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let draw = |class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        means[class].iter().map(|m| m + spec.cluster_std * gaussian(rng)).collect()
    };

    let source: Vec<LabeledExample> = (0..spec.n_source)
        .map(|i| {
            let y = i % k;
            LabeledExample { x: draw(y, &mut rng), y, domain: Domain::Source, id: i }
        })
        .collect();

    let pool_size = spec.n_unlabeled + k * spec.shots;
    let weights = shift.class_imbalance.clone().unwrap_or_else(|| vec![1.0; k]);
    let counts = allocate(pool_size, &weights);
    let mut pool = Vec::with_capacity(pool_size);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut x = draw(class, &mut rng);
            shift.apply(&mut x);
            if shift.noise_std > 0.0 {
                x.iter_mut().for_each(|v| *v += shift.noise_std * gaussian(&mut rng));
            }
            pool.push((x, class));
        }
    }
    let (labeled, unlabeled, ids, hidden) = split_target_pool(pool, k, spec.shots, &mut rng)?;
    SSDAEpisode::from_parts(k, spec.shots, source, labeled, unlabeled, ids, hidden)
}

/// Generates a two-class interleaved half-moons episode in 2-D, centred on
/// the origin, with `noise` as the per-coordinate Gaussian jitter.
pub fn make_two_moons_episode(
    seed: u64,
    n_source: usize,
    n_unlabeled: usize,
    shots: usize,
    noise: f64,
    shift: &ShiftSpec,
) -> Result<SSDAEpisode> {
    check_sizes(2, n_source, n_unlabeled, shots)?;
    if noise < 0.0 || !noise.is_finite() {
        return Err(config_err("noise must be finite and >= 0"));
    }
    shift.validate(2, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let moon = |class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let t = PI * rand::Rng::random::<f64>(rng);
        let (s, c) = libm::sincos(t);
        let (x, y) = if class == 0 { (c, s) } else { (1.0 - c, 0.5 - s) };
        // centre the pair of moons on the origin
        vec![x - 0.5 + noise * gaussian(rng), y - 0.25 + noise * gaussian(rng)]
    };
    let source: Vec<LabeledExample> = (0..n_source)
        .map(|i| LabeledExample { x: moon(i % 2, &mut rng), y: i % 2, domain: Domain::Source, id: i })
        .collect();
    let pool_size = n_unlabeled + 2 * shots;
    let weights = shift.class_imbalance.clone().unwrap_or_else(|| vec![1.0; 2]);
    let counts = allocate(pool_size, &weights);
    let mut pool = Vec::with_capacity(pool_size);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut x = moon(class, &mut rng);
            shift.apply(&mut x);
            if shift.noise_std > 0.0 {
                x.iter_mut().for_each(|v| *v += shift.noise_std * gaussian(&mut rng));
            }
            pool.push((x, class));
        }
    }
    let (labeled, unlabeled, ids, hidden) = split_target_pool(pool, 2, shots, &mut rng)?;
    SSDAEpisode::from_parts(2, shots, source, labeled, unlabeled, ids, hidden)
}

/// A labeled mini-batch: the first half is source, the second half labeled target.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub domain: Vec<Domain>,
    /// Position of each example in `episode.source()` or `episode.target_labeled()`.
    pub index: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Row indices of the labeled-target half.
    pub fn target_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domain[i] == Domain::Target).collect()
    }
}

/// An unlabeled target mini-batch. Carries no labels by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch {
    pub x: Matrix,
    /// Row of each sample in `episode.unlabeled_inputs()`.
    pub rows: Vec<usize>,
}

/// Endless reshuffling cursor over `0..n`.
#[derive(Debug, Clone)]
struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
}

impl EpochCursor {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        EpochCursor { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Infinite stream of labeled batches, half source and half labeled target.
/// Both halves cycle through their sets in freshly shuffled epochs.
#[derive(Debug, Clone)]
pub struct BalancedLabeledIter<'a> {
    episode: &'a SSDAEpisode,
    half: usize,
    rng: ChaCha8Rng,
    source: EpochCursor,
    target: EpochCursor,
}

/// Stream of balanced labeled batches; `batch_size` must be even and >= 2.
pub fn balanced_labeled_iterator(
    episode: &SSDAEpisode,
    batch_size: usize,
    seed: u64,
) -> Result<BalancedLabeledIter<'_>> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(config_err("labeled batch_size must be even and >= 2"));
    }
    if episode.source.is_empty() || episode.target_labeled.is_empty() {
        return Err(input_err("balanced iterator needs non-empty source and labeled target sets"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = EpochCursor::new(episode.source.len(), &mut rng);
    let target = EpochCursor::new(episode.target_labeled.len(), &mut rng);
    Ok(BalancedLabeledIter { episode, half: batch_size / 2, rng, source, target })
}

impl Iterator for BalancedLabeledIter<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        let dim = self.episode.dim;
        let n = 2 * self.half;
        let mut data = Vec::with_capacity(n * dim);
        let mut y = Vec::with_capacity(n);
        let mut domain = Vec::with_capacity(n);
        let mut index = Vec::with_capacity(n);
        for _ in 0..self.half {
            let i = self.source.next(&mut self.rng);
            let ex = &self.episode.source[i];
            data.extend_from_slice(&ex.x);
            y.push(ex.y);
            domain.push(Domain::Source);
            index.push(i);
        }
        for _ in 0..self.half {
            let i = self.target.next(&mut self.rng);
            let ex = &self.episode.target_labeled[i];
            data.extend_from_slice(&ex.x);
            y.push(ex.y);
            domain.push(Domain::Target);
            index.push(i);
        }
        Some(LabeledBatch { x: Matrix::from_vec(n, dim, data), y, domain, index })
    }
}

/// Infinite stream of unlabeled batches cycling through shuffled epochs.
#[derive(Debug, Clone)]
pub struct UnlabeledIter<'a> {
    inputs: &'a Matrix,
    batch_size: usize,
    rng: ChaCha8Rng,
    cursor: EpochCursor,
}

pub fn unlabeled_iterator(episode: &SSDAEpisode, batch_size: usize, seed: u64) -> Result<UnlabeledIter<'_>> {
    if batch_size == 0 {
        return Err(config_err("unlabeled batch_size must be >= 1"));
    }
    if episode.n_unlabeled() == 0 {
        return Err(input_err("episode has no unlabeled samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cursor = EpochCursor::new(episode.n_unlabeled(), &mut rng);
    Ok(UnlabeledIter { inputs: &episode.unlabeled, batch_size, rng, cursor })
}

impl Iterator for UnlabeledIter<'_> {
    type Item = UnlabeledBatch;

    fn next(&mut self) -> Option<UnlabeledBatch> {
        let rows: Vec<usize> = (0..self.batch_size).map(|_| self.cursor.next(&mut self.rng)).collect();
        Some(UnlabeledBatch { x: self.inputs.select_rows(&rows), rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn spec(k: usize, shots: usize) -> MixtureSpec {
        MixtureSpec {
            n_classes: k,
            dim: 2,
            n_source: 100,
            n_unlabeled: 100,
            shots,
            radius: 2.0,
            cluster_std: 0.3,
        }
    }

    #[test]
    fn three_shot_episode_has_three_per_class() {
        let ep = make_synthetic_episode(0, &spec(5, 3), &ShiftSpec::rotation(30.0)).unwrap();
        assert_eq!(ep.target_labeled().len(), 15);
        let mut counts = [0; 5];
        ep.target_labeled().iter().for_each(|ex| counts[ex.y] += 1);
        assert_eq!(counts, [3; 5]);
        assert_eq!(ep.n_unlabeled(), 100);
        for ex in ep.target_labeled() {
            assert!(!ep.unlabeled_ids().contains(&ex.id));
        }
    }

    #[test]
    fn same_seed_same_episode() {
        let a = make_synthetic_episode(7, &spec(4, 2), &ShiftSpec::rotation(45.0)).unwrap();
        let b = make_synthetic_episode(7, &spec(4, 2), &ShiftSpec::rotation(45.0)).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_episode(8, &spec(4, 2), &ShiftSpec::rotation(45.0)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_shift_means_coincide() {
        let mut s = spec(3, 1);
        s.cluster_std = 0.0;
        let ep = make_synthetic_episode(1, &s, &ShiftSpec::none()).unwrap();
        for (row, &y) in ep.unlabeled_inputs().iter_rows().zip(ep.hidden_labels()) {
            let src = ep.source().iter().find(|ex| ex.y == y).unwrap();
            assert_eq!(row, src.x.as_slice());
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut s = spec(5, 3);
        s.dim = 1;
        assert!(make_synthetic_episode(0, &s, &ShiftSpec::rotation(30.0)).is_err());
        let translation = ShiftSpec { kind: ShiftKind::Translation, magnitude: 1.0, ..ShiftSpec::none() };
        assert!(make_synthetic_episode(0, &s, &translation).is_ok());
        assert!(make_synthetic_episode(0, &spec(1, 3), &ShiftSpec::none()).is_err());
        assert!(make_synthetic_episode(0, &spec(5, 0), &ShiftSpec::none()).is_err());
        let mut few = spec(5, 1);
        few.n_source = 4;
        assert!(make_synthetic_episode(0, &few, &ShiftSpec::none()).is_err());
    }

    #[test]
    fn imbalance_can_starve_a_class() {
        let mut s = spec(3, 5);
        s.n_unlabeled = 10;
        let shift = ShiftSpec { class_imbalance: Some(vec![100.0, 100.0, 1.0]), ..ShiftSpec::none() };
        let err = make_synthetic_episode(0, &s, &shift).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
        let bad_weights = ShiftSpec { class_imbalance: Some(vec![1.0, -1.0, 1.0]), ..ShiftSpec::none() };
        assert!(make_synthetic_episode(0, &spec(3, 1), &bad_weights).is_err());
    }

    #[test]
    fn imbalance_skews_unlabeled_counts() {
        let shift = ShiftSpec { class_imbalance: Some(vec![4.0, 1.0]), ..ShiftSpec::none() };
        let ep = make_synthetic_episode(3, &spec(2, 2), &shift).unwrap();
        let zeros = ep.hidden_labels().iter().filter(|&&y| y == 0).count();
        let ones = ep.hidden_labels().len() - zeros;
        assert!(zeros > 3 * ones);
    }

    #[test]
    fn two_moons_shape() {
        let ep = make_two_moons_episode(0, 50, 40, 2, 0.05, &ShiftSpec::rotation(20.0)).unwrap();
        assert_eq!(ep.n_classes(), 2);
        assert_eq!(ep.dim(), 2);
        assert_eq!(ep.target_labeled().len(), 4);
        assert_eq!(ep.n_unlabeled(), 40);
    }

    #[test]
    fn balanced_batches_are_half_and_half() {
        let ep = make_synthetic_episode(0, &spec(5, 3), &ShiftSpec::rotation(30.0)).unwrap();
        let it = balanced_labeled_iterator(&ep, 8, 0).unwrap();
        for batch in it.take(50) {
            assert_eq!(batch.len(), 8);
            let src = batch.domain.iter().filter(|&&d| d == Domain::Source).count();
            assert_eq!(src, 4);
            assert_eq!(batch.target_rows().len(), 4);
        }
        assert!(balanced_labeled_iterator(&ep, 7, 0).is_err());
        assert!(balanced_labeled_iterator(&ep, 0, 0).is_err());
    }

    #[test]
    fn target_half_is_resampled_uniformly() {
        let ep = make_synthetic_episode(0, &spec(5, 3), &ShiftSpec::rotation(30.0)).unwrap();
        let mut counts = BTreeMap::new();
        for batch in balanced_labeled_iterator(&ep, 8, 11).unwrap().take(10_000) {
            for &row in &batch.target_rows() {
                *counts.entry(batch.index[row]).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), 15);
        let expected = 10_000.0 * 4.0 / 15.0;
        for &c in counts.values() {
            assert!((c as f64 - expected).abs() <= 0.05 * expected, "{c} vs {expected}");
        }
    }

    #[test]
    fn unlabeled_epochs_cover_every_sample_once() {
        let ep = make_synthetic_episode(0, &spec(5, 1), &ShiftSpec::none()).unwrap();
        assert_eq!(ep.n_unlabeled(), 100);
        let mut it = unlabeled_iterator(&ep, 10, 3).unwrap();
        for _epoch in 0..3 {
            let mut seen: Vec<usize> = (0..10).flat_map(|_| it.next().unwrap().rows).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..100).collect::<Vec<_>>());
        }
        assert!(unlabeled_iterator(&ep, 0, 3).is_err());
    }

    #[test]
    fn unlabeled_seeds_change_order_not_content() {
        let ep = make_synthetic_episode(0, &spec(5, 1), &ShiftSpec::none()).unwrap();
        let a: Vec<usize> = unlabeled_iterator(&ep, 10, 1).unwrap().take(10).flat_map(|b| b.rows).collect();
        let b: Vec<usize> = unlabeled_iterator(&ep, 10, 2).unwrap().take(10).flat_map(|b| b.rows).collect();
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
        let again: Vec<usize> = unlabeled_iterator(&ep, 10, 1).unwrap().take(10).flat_map(|b| b.rows).collect();
        assert_eq!(a, again);
    }

    #[test]
    fn allocate_is_exact() {
        assert_eq!(allocate(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(allocate(7, &[3.0, 1.0]).iter().sum::<usize>(), 7);
    }
}
