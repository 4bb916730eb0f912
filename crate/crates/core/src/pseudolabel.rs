//! Prototype-gated pseudo-labels.
//!
//! A sample is kept when its best cosine similarity to any prototype exceeds
//! `eps_dist` and the entropy of its prototype softmax is below `eps_ent`.
//! Kept samples are trained towards the classifier's own argmax.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, input_err, Result};
use crate::linalg::{self, Matrix};

pub const DEFAULT_PROTO_TEMPERATURE: f64 = 0.07;
/// Similarity threshold suited to a strong backbone.
pub const EPS_DIST_STRONG: f64 = 0.3;
/// Similarity threshold suited to a weak backbone.
pub const EPS_DIST_WEAK: f64 = 0.1;
pub const DEFAULT_EPS_ENT: f64 = 0.5;

/// Row-wise softmax of `features . prototypes^T / tau_p`.
pub fn prototype_softmax(features: &Matrix, prototypes: &Matrix, tau_p: f64) -> Result<Matrix> {
    if tau_p <= 0.0 || !tau_p.is_finite() {
        return Err(config_err("pseudo-label temperature must be > 0"));
    }
    if features.cols() != prototypes.cols() {
        return Err(input_err("features and prototypes differ in dimension"));
    }
    let mut z = features.matmul_t(prototypes);
    z.scale(1.0 / tau_p);
    Ok(linalg::softmax_rows(&z))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * libm::log(v)).sum::<f64>()
}

/// Membership of each batch sample in the similarity set, the entropy set
/// and their intersection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    pub in_dist: Vec<bool>,
    pub in_ent: Vec<bool>,
    pub in_pse: Vec<bool>,
}

impl SelectionMask {
    pub fn len(&self) -> usize {
        self.in_pse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_pse.is_empty()
    }

    pub fn n_dist(&self) -> usize {
        self.in_dist.iter().filter(|&&b| b).count()
    }

    pub fn n_ent(&self) -> usize {
        self.in_ent.iter().filter(|&&b| b).count()
    }

    pub fn n_pse(&self) -> usize {
        self.in_pse.iter().filter(|&&b| b).count()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.in_pse.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Per-sample quantities the thresholds are applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionScores {
    /// Best cosine similarity to any prototype.
    pub max_similarity: Vec<f64>,
    /// Entropy of the prototype softmax.
    pub entropy: Vec<f64>,
}

pub fn selection_scores(features: &Matrix, prototypes: &Matrix, tau_p: f64) -> Result<SelectionScores> {
    let probs = prototype_softmax(features, prototypes, tau_p)?;
    let sims = features.matmul_t(prototypes);
    let max_similarity = sims
        .iter_rows()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let entropy = probs.iter_rows().map(entropy).collect();
    Ok(SelectionScores { max_similarity, entropy })
}

/// Applies both thresholds to precomputed scores.
pub fn threshold(scores: &SelectionScores, eps_dist: f64, eps_ent: f64) -> Result<SelectionMask> {
    if !eps_dist.is_finite() || !eps_ent.is_finite() {
        return Err(config_err("selection thresholds must be finite"));
    }
    let in_dist: Vec<bool> = scores.max_similarity.iter().map(|&s| s > eps_dist).collect();
    let in_ent: Vec<bool> = scores.entropy.iter().map(|&h| h < eps_ent).collect();
    let in_pse = in_dist.iter().zip(&in_ent).map(|(&a, &b)| a && b).collect();
    Ok(SelectionMask { in_dist, in_ent, in_pse })
}

pub fn select(
    features: &Matrix,
    prototypes: &Matrix,
    tau_p: f64,
    eps_dist: f64,
    eps_ent: f64,
) -> Result<SelectionMask> {
    threshold(&selection_scores(features, prototypes, tau_p)?, eps_dist, eps_ent)
}

/// Selected rows of an unlabeled batch with their frozen pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    /// Rows of the unlabeled batch that passed both thresholds.
    pub rows: Vec<usize>,
    /// Classifier argmax for each selected row.
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
    pub entropies: Vec<f64>,
    /// Size of the whole unlabeled batch the loss is averaged over.
    pub batch_size: usize,
}

impl PseudoBatch {
    /// Labels the selected rows with the argmax of `classifier_probs`, which
    /// must come from the same snapshot the selection was made on.
    pub fn build(mask: &SelectionMask, scores: &SelectionScores, classifier_probs: &Matrix) -> Self {
        let rows: Vec<usize> = mask.selected().collect();
        let labels = rows.iter().map(|&i| linalg::argmax(classifier_probs.row(i))).collect();
        PseudoBatch {
            labels,
            scores: rows.iter().map(|&i| scores.max_similarity[i]).collect(),
            entropies: rows.iter().map(|&i| scores.entropy[i]).collect(),
            rows,
            batch_size: mask.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `-(1/n) sum_{i selected} log p(yhat_i | x_i)` over the whole batch of `n`,
/// with its gradient w.r.t. the live logits.
pub fn pseudo_loss(logits: &Matrix, batch: &PseudoBatch) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    if logits.rows() != batch.batch_size {
        return Err(input_err("logits do not match the pseudo-labeled batch"));
    }
    let n = batch.batch_size as f64;
    let mut logp = vec![0.0; logits.cols()];
    let mut loss = 0.0;
    for (&row, &y) in batch.rows.iter().zip(&batch.labels) {
        linalg::log_softmax_into(logits.row(row), &mut logp);
        loss -= logp[y];
        let g = grad.row_mut(row);
        for (gk, &lp) in g.iter_mut().zip(&logp) {
            *gk = libm::exp(lp) / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equidistant_prototypes_give_uniform_rows() {
        let f = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let p = Matrix::from_vec(2, 2, vec![0.6, 0.8, 0.6, -0.8]);
        let probs = prototype_softmax(&f, &p, DEFAULT_PROTO_TEMPERATURE).unwrap();
        assert!((probs[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(prototype_softmax(&f, &p, 0.0).is_err());
    }

    #[test]
    fn entropy_limits() {
        assert!((entropy(&[0.25; 4]) - libm::log(4.0)).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.7, 0.2, 0.1]) - 0.801_818_9).abs() < 1e-6);
    }

    #[test]
    fn intersection_requires_both() {
        let scores = SelectionScores { max_similarity: vec![0.9, 0.9, 0.05], entropy: vec![2.0, 0.1, 0.1] };
        let m = threshold(&scores, EPS_DIST_STRONG, DEFAULT_EPS_ENT).unwrap();
        assert_eq!(m.in_dist, vec![true, true, false]);
        assert_eq!(m.in_ent, vec![false, true, true]);
        assert_eq!(m.in_pse, vec![false, true, false]);
        assert!(threshold(&scores, f64::NAN, 0.5).is_err());
    }

    #[test]
    fn empty_selection_gives_zero_loss() {
        let mask = SelectionMask { in_dist: vec![false; 3], in_ent: vec![true; 3], in_pse: vec![false; 3] };
        let scores = SelectionScores { max_similarity: vec![0.0; 3], entropy: vec![0.0; 3] };
        let logits = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let pb = PseudoBatch::build(&mask, &scores, &logits);
        let (loss, grad) = pseudo_loss(&logits, &pb).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn confident_agreement_gives_zero_loss() {
        let mask = SelectionMask { in_dist: vec![true; 2], in_ent: vec![true; 2], in_pse: vec![true; 2] };
        let scores = SelectionScores { max_similarity: vec![1.0; 2], entropy: vec![0.0; 2] };
        let logits = Matrix::from_vec(2, 2, vec![1e4, 0.0, 0.0, 1e4]);
        let pb = PseudoBatch::build(&mask, &scores, &linalg::softmax_rows(&logits));
        assert_eq!(pb.labels, vec![0, 1]);
        assert_eq!(pseudo_loss(&logits, &pb).unwrap().0, 0.0);
    }

    #[test]
    fn loss_averages_over_whole_batch() {
        let mask = SelectionMask { in_dist: vec![true, false], in_ent: vec![true, true], in_pse: vec![true, false] };
        let scores = SelectionScores { max_similarity: vec![0.9, 0.0], entropy: vec![0.1, 0.1] };
        let logits = Matrix::zeros(2, 2);
        let pb = PseudoBatch::build(&mask, &scores, &linalg::softmax_rows(&logits));
        let (loss, _) = pseudo_loss(&logits, &pb).unwrap();
        assert!((loss - libm::log(2.0) / 2.0).abs() < 1e-15);
    }
}
