//! Perturbation-consistency regularizer.
//!
//! For every input a perturbation of fixed radius is aimed, by power
//! iteration from a random probe, at the direction that most changes the
//! classifier output. The loss is the KL divergence from the clean
//! prediction (held constant) to the prediction on the perturbed input.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, input_err, Result};
use crate::linalg::{self, Matrix};
use crate::model::{Backbone, Grads, Model};

/// Probe gradients with a smaller norm than this count as zero.
const MIN_PROBE_GRAD: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PerturbSpec {
    /// Norm of the final perturbation, in input units.
    pub radius: f64,
    /// Scale of the probe used to estimate the adversarial direction.
    pub xi: f64,
    pub power_iters: usize,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec { radius: 0.5, xi: 1e-4, power_iters: 1 }
    }
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radius <= 0.0 || !self.radius.is_finite() {
            return Err(config_err("perturbation radius must be > 0"));
        }
        if self.xi <= 0.0 || !self.xi.is_finite() {
            return Err(config_err("perturbation xi must be > 0"));
        }
        if self.power_iters == 0 {
            return Err(config_err("perturbation power_iters must be >= 1"));
        }
        Ok(())
    }
}

/// Perturbations for a batch plus the rows whose probe gradient vanished.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub r: Matrix,
    /// Rows that kept their random direction because the probe gradient was zero.
    pub fallback_rows: Vec<usize>,
}

fn random_unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        let row = m.row_mut(i);
        loop {
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
            if linalg::normalize_in_place(row, 1e-12).is_some() {
                break;
            }
        }
    }
    m
}

fn log_probs(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        linalg::log_softmax_into(logits.row(i), out.row_mut(i));
    }
    out
}

fn add(x: &Matrix, r: &Matrix, scale: f64) -> Matrix {
    let mut out = x.clone();
    out.add_scaled(r, scale);
    out
}

/// Per-row `KL(p || q)` from log-probabilities, its batch mean, and the
/// gradient of the mean w.r.t. the logits of `q`.
fn kl_rows(target_logp: &Matrix, logits: &Matrix) -> (f64, Matrix) {
    let n = logits.rows();
    let logq = log_probs(logits);
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, logits.cols());
    for i in 0..n {
        let (lp, lq) = (target_logp.row(i), logq.row(i));
        let g = grad.row_mut(i);
        for k in 0..lp.len() {
            let p = libm::exp(lp[k]);
            if p > 0.0 {
                total += p * (lp[k] - lq[k]);
            }
            g[k] = (libm::exp(lq[k]) - p) / n as f64;
        }
    }
    ((total / n as f64).max(0.0), grad)
}

/// Aims a radius-`spec.radius` perturbation at the direction of largest KL
/// change for every input row.
pub fn compute_perturbation<B: Backbone>(
    x: &Matrix,
    model: &Model<B>,
    spec: &PerturbSpec,
    rng: &mut impl Rng,
) -> Result<Perturbation> {
    spec.validate()?;
    if x.rows() == 0 {
        return Err(input_err("perturbation of an empty batch"));
    }
    let clean = log_probs(&model.forward(x)?.logits);
    let mut d = random_unit_rows(x.rows(), x.cols(), rng);
    let mut fallback = vec![false; x.rows()];
    for _ in 0..spec.power_iters {
        let pass = model.forward(&add(x, &d, spec.xi))?;
        let (_, grad_logits) = kl_rows(&clean, &pass.logits);
        let (_, grad_x) = model.backward(&pass, Some(&grad_logits), None)?;
        for (i, fb) in fallback.iter_mut().enumerate() {
            let mut g = grad_x.row(i).to_vec();
            match linalg::normalize_in_place(&mut g, MIN_PROBE_GRAD) {
                Some(_) if g.iter().all(|v| v.is_finite()) => {
                    d.row_mut(i).copy_from_slice(&g);
                    *fb = false;
                }
                _ => *fb = true,
            }
        }
    }
    d.scale(spec.radius);
    let fallback_rows = fallback.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect();
    Ok(Perturbation { r: d, fallback_rows })
}

/// Mean `KL(p_target || p(x + r))` with `target_logp` and `r` held fixed,
/// and its parameter gradient.
pub fn consistency_loss<B: Backbone>(
    x: &Matrix,
    r: &Matrix,
    target_logp: &Matrix,
    model: &Model<B>,
) -> Result<(f64, Grads)> {
    let pass = model.forward(&add(x, r, 1.0))?;
    let (loss, grad_logits) = kl_rows(target_logp, &pass.logits);
    let (grads, _) = model.backward(&pass, Some(&grad_logits), None)?;
    Ok((loss, grads))
}

/// Output of [`perturb_loss`].
#[derive(Debug, Clone)]
pub struct PerturbLoss {
    pub loss: f64,
    pub grads: Grads,
    pub perturbation: Perturbation,
}

/// Computes the perturbation for `x` and the consistency loss against the
/// current clean predictions, which act as constants.
pub fn perturb_loss<B: Backbone>(
    x: &Matrix,
    model: &Model<B>,
    spec: &PerturbSpec,
    rng: &mut impl Rng,
) -> Result<PerturbLoss> {
    let perturbation = compute_perturbation(x, model, spec, rng)?;
    let target = log_probs(&model.forward(x)?.logits);
    let (loss, grads) = consistency_loss(x, &perturbation.r, &target, model)?;
    Ok(PerturbLoss { loss, grads, perturbation })
}

/// Clean log-probabilities used as the fixed target of the consistency loss.
pub fn clean_targets<B: Backbone>(x: &Matrix, model: &Model<B>) -> Result<Matrix> {
    Ok(log_probs(&model.forward(x)?.logits))
}
