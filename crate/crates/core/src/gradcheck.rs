//! Central finite-difference checks of the analytic gradients.
//!
//! The numeric side only ever evaluates loss *values*, through code paths
//! that do not share the reverse passes being checked (MMD values come from
//! Gram-matrix means, not from the gradient routine).

use alloc::vec::Vec;

use crate::alignment::{self, KernelSpec};
use crate::datasets::{LabeledBatch, UnlabeledBatch};
use crate::error::Result;
use crate::linalg::{self, Matrix};
use crate::model::{self, Backbone, Grads, Model};
use crate::pseudolabel::{self, PseudoBatch};
use crate::trainer::{FrozenStep, LossWeights};

/// Step used by every check unless stated otherwise.
pub const FD_STEP: f64 = 1e-5;

/// Central differences of `loss` w.r.t. every flat parameter of `model`.
pub fn finite_difference<B, F>(model: &Model<B>, step: f64, mut loss: F) -> Result<Vec<f64>>
where
    B: Backbone,
    F: FnMut(&Model<B>) -> Result<f64>,
{
    let base = model.params();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut shifted = base.clone();
    for i in 0..base.len() {
        shifted[i] = base[i] + step;
        probe.set_params(&shifted);
        let up = loss(&probe)?;
        shifted[i] = base[i] - step;
        probe.set_params(&shifted);
        let down = loss(&probe)?;
        shifted[i] = base[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// `max_i |a_i - n_i| / (|a_i| + 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}

fn cls_value<B: Backbone>(model: &Model<B>, x: &Matrix, y: &[usize]) -> Result<f64> {
    let pass = model.forward(x)?;
    Ok(model::classification_loss(&pass.logits, y)?.0)
}

fn pseudo_value<B: Backbone>(model: &Model<B>, x: &Matrix, pseudo: &PseudoBatch) -> Result<f64> {
    let pass = model.forward(x)?;
    let n = x.rows() as f64;
    let mut logp = alloc::vec![0.0; pass.logits.cols()];
    let mut total = 0.0;
    for (&row, &y) in pseudo.rows.iter().zip(&pseudo.labels) {
        linalg::log_softmax_into(pass.logits.row(row), &mut logp);
        total -= logp[y];
    }
    Ok(total / n)
}

fn kl_value<B: Backbone>(model: &Model<B>, x: &Matrix, r: &Matrix, target_logp: &Matrix) -> Result<f64> {
    let mut shifted = x.clone();
    shifted.add_scaled(r, 1.0);
    let pass = model.forward(&shifted)?;
    let mut logq = alloc::vec![0.0; pass.logits.cols()];
    let mut total = 0.0;
    for i in 0..x.rows() {
        linalg::log_softmax_into(pass.logits.row(i), &mut logq);
        for (lp, lq) in target_logp.row(i).iter().zip(&logq) {
            total += libm::exp(*lp) * (lp - lq);
        }
    }
    Ok(total / x.rows() as f64)
}

/// Analytic parameter gradient of the supervised loss.
pub fn cls_grads<B: Backbone>(model: &Model<B>, x: &Matrix, y: &[usize]) -> Result<Grads> {
    let pass = model.forward(x)?;
    let (_, g) = model::classification_loss(&pass.logits, y)?;
    Ok(model.backward(&pass, Some(&g), None)?.0)
}

/// Analytic parameter gradient of the MMD term against fixed prototypes and bandwidths.
pub fn mmd_grads<B: Backbone>(model: &Model<B>, prototypes: &Matrix, x: &Matrix, sigmas: &[f64]) -> Result<Grads> {
    let pass = model.forward(x)?;
    let (_, g) = alignment::mmd_and_grad(prototypes, &pass.features, sigmas)?;
    Ok(model.backward(&pass, None, Some(&g))?.0)
}

/// Analytic parameter gradient of the pseudo-label term with frozen labels.
pub fn pseudo_grads<B: Backbone>(model: &Model<B>, x: &Matrix, pseudo: &PseudoBatch) -> Result<Grads> {
    let pass = model.forward(x)?;
    let (_, g) = pseudolabel::pseudo_loss(&pass.logits, pseudo)?;
    Ok(model.backward(&pass, Some(&g), None)?.0)
}

pub fn cls_grad_check<B: Backbone>(model: &Model<B>, x: &Matrix, y: &[usize]) -> Result<f64> {
    let analytic = cls_grads(model, x, y)?.flatten();
    let numeric = finite_difference(model, FD_STEP, |m| cls_value(m, x, y))?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// MMD between `prototypes` and the features of `x`, bandwidths resolved
/// once at the current parameters and then held fixed.
pub fn mmd_loss_grad_check<B: Backbone>(
    model: &Model<B>,
    prototypes: &Matrix,
    x: &Matrix,
    kernel: &KernelSpec,
) -> Result<f64> {
    let features = model.forward(x)?.features;
    let sigmas = kernel.resolve(prototypes, &features)?;
    let analytic = mmd_grads(model, prototypes, x, &sigmas)?.flatten();
    let numeric = finite_difference(model, FD_STEP, |m| {
        alignment::mmd_with(prototypes, &m.forward(x)?.features, &sigmas)
    })?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn pseudo_grad_check<B: Backbone>(model: &Model<B>, x: &Matrix, pseudo: &PseudoBatch) -> Result<f64> {
    let analytic = pseudo_grads(model, x, pseudo)?.flatten();
    let numeric = finite_difference(model, FD_STEP, |m| pseudo_value(m, x, pseudo))?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Perturbation direction and clean targets frozen.
pub fn perturb_grad_check<B: Backbone>(model: &Model<B>, x: &Matrix, r: &Matrix, target_logp: &Matrix) -> Result<f64> {
    let (_, grads) = crate::perturb::consistency_loss(x, r, target_logp, model)?;
    let numeric = finite_difference(model, FD_STEP, |m| kl_value(m, x, r, target_logp))?;
    Ok(max_relative_error(&grads.flatten(), &numeric))
}

/// Value of the whole weighted objective of a DFA step with every frozen
/// quantity held fixed.
pub fn frozen_objective<B: Backbone>(
    model: &Model<B>,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    frozen: &FrozenStep,
    weights: &LossWeights,
) -> Result<f64> {
    let features = model.forward(&unlabeled.x)?.features;
    Ok(cls_value(model, &labeled.x, &labeled.y)?
        + weights.mmd * alignment::mmd_with(&frozen.prototypes, &features, &frozen.sigmas)?
        + weights.pseudo * pseudo_value(model, &unlabeled.x, &frozen.pseudo)?
        + weights.perturb * kl_value(model, &frozen.perturb_x, &frozen.perturb_r, &frozen.perturb_target)?)
}

/// Per-term maximum relative gradient errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub cls: f64,
    pub mmd: f64,
    pub pseudo: f64,
    pub perturb: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.cls.max(self.mmd).max(self.pseudo).max(self.perturb)
    }
}

/// Checks every loss term of one training step separately, with the
/// prototypes, bandwidths, pseudo-labels and perturbation of `frozen` fixed.
pub fn step_suite<B: Backbone>(
    model: &Model<B>,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    frozen: &FrozenStep,
) -> Result<GradCheckReport> {
    let mmd_analytic = mmd_grads(model, &frozen.prototypes, &unlabeled.x, &frozen.sigmas)?.flatten();
    let mmd_numeric = finite_difference(model, FD_STEP, |m| {
        alignment::mmd_with(&frozen.prototypes, &m.forward(&unlabeled.x)?.features, &frozen.sigmas)
    })?;
    Ok(GradCheckReport {
        cls: cls_grad_check(model, &labeled.x, &labeled.y)?,
        mmd: max_relative_error(&mmd_analytic, &mmd_numeric),
        pseudo: pseudo_grad_check(model, &unlabeled.x, &frozen.pseudo)?,
        perturb: perturb_grad_check(model, &frozen.perturb_x, &frozen.perturb_r, &frozen.perturb_target)?,
    })
}
