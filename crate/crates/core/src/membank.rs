//! Class-balanced prototype memory.
//!
//! The intermediate bank keeps, per class, the feature of the most recent
//! correctly classified labeled sample. The dynamic bank blends the
//! intermediate bank into its prototypes once per iteration with an EWMA, so
//! every class moves at the same pace no matter how often it is sampled.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{input_err, Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{Backbone, Model, MIN_FEATURE_NORM};
use crate::datasets::SSDAEpisode;

/// Bank pace used unless configured otherwise.
pub const DEFAULT_GAMMA: f64 = 0.1;

/// Per-class slot holding the latest correctly classified feature.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntermediateBank {
    slots: Matrix,
    filled: Vec<bool>,
}

/// Class prototypes updated by exponential moving average.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DynamicBank {
    prototypes: Matrix,
    gamma: f64,
    step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "event", rename_all = "snake_case"))]
pub enum BankEvent {
    /// Slot `class` of the intermediate bank took the feature at `batch_row`.
    Replaced { batch_row: usize, label: usize, prediction: usize },
    /// Row `class` of the dynamic bank received one EWMA contribution.
    Blended,
    /// Row `class` of the dynamic bank was skipped because its slot is empty.
    SkippedUnfilled,
}

/// One audit record of bank activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BankRecord {
    pub step: usize,
    pub class: usize,
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub event: BankEvent,
}

/// Append-only audit trail of bank updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateLog {
    pub records: Vec<BankRecord>,
}

impl UpdateLog {
    pub fn extend(&mut self, other: UpdateLog) {
        self.records.extend(other.records);
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

impl IntermediateBank {
    /// Empty bank; no slot is filled.
    pub fn empty(n_classes: usize, dim: usize) -> Self {
        IntermediateBank { slots: Matrix::zeros(n_classes, dim), filled: vec![false; n_classes] }
    }

    pub fn from_rows(rows: Matrix) -> Self {
        let n = rows.rows();
        IntermediateBank { slots: rows, filled: vec![true; n] }
    }

    pub fn slots(&self) -> &Matrix {
        &self.slots
    }

    pub fn is_filled(&self, class: usize) -> bool {
        self.filled[class]
    }

    pub fn n_classes(&self) -> usize {
        self.filled.len()
    }

    /// Replaces slot `label` with the feature of every correctly classified
    /// sample, in batch order, so the last correct sample of a class wins.
    pub fn update(
        &mut self,
        features: &Matrix,
        labels: &[usize],
        predictions: &[usize],
        step: usize,
    ) -> Result<UpdateLog> {
        if features.rows() != labels.len() || labels.len() != predictions.len() {
            return Err(input_err("features, labels and predictions differ in length"));
        }
        let k = self.n_classes();
        if let Some(&label) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label, n_classes: k });
        }
        let mut log = UpdateLog::default();
        for (row, (&label, &prediction)) in labels.iter().zip(predictions).enumerate() {
            if label != prediction {
                continue;
            }
            self.slots.row_mut(label).copy_from_slice(features.row(row));
            self.filled[label] = true;
            log.records.push(BankRecord {
                step,
                class: label,
                event: BankEvent::Replaced { batch_row: row, label, prediction },
            });
        }
        Ok(log)
    }
}

impl DynamicBank {
    /// Builds a bank from prototype rows, normalizing each one.
    pub fn new(mut prototypes: Matrix, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(crate::error::config_err("bank pace gamma must lie in [0, 1]"));
        }
        for class in 0..prototypes.rows() {
            linalg::normalize_in_place(prototypes.row_mut(class), MIN_FEATURE_NORM)
                .ok_or(Error::DegeneratePrototype { class })?;
        }
        Ok(DynamicBank { prototypes, gamma, step: 0 })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Number of EWMA updates applied so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.rows()
    }

    /// `B <- gamma * B + (1 - gamma) * b` row by row, then each row is
    /// renormalized. Rows whose intermediate slot was never written are left
    /// as they are.
    pub fn ewma_update(&mut self, intermediate: &IntermediateBank) -> Result<UpdateLog> {
        if intermediate.slots.rows() != self.prototypes.rows() || intermediate.slots.cols() != self.prototypes.cols() {
            return Err(input_err("intermediate and dynamic banks differ in shape"));
        }
        let step = self.step;
        let mut log = UpdateLog::default();
        for class in 0..self.prototypes.rows() {
            if !intermediate.filled[class] {
                log.records.push(BankRecord { step, class, event: BankEvent::SkippedUnfilled });
                continue;
            }
            let mut blended: Vec<f64> = self
                .prototypes
                .row(class)
                .iter()
                .zip(intermediate.slots.row(class))
                .map(|(old, new)| self.gamma * old + (1.0 - self.gamma) * new)
                .collect();
            linalg::normalize_in_place(&mut blended, MIN_FEATURE_NORM)
                .ok_or(Error::DegeneratePrototype { class })?;
            self.prototypes.row_mut(class).copy_from_slice(&blended);
            log.records.push(BankRecord { step, class, event: BankEvent::Blended });
        }
        self.step += 1;
        Ok(log)
    }

    /// Owned copy of the prototypes; later updates do not affect it.
    pub fn prototypes(&self) -> Matrix {
        self.prototypes.clone()
    }

    /// Borrowed view of the current prototypes.
    pub fn prototypes_ref(&self) -> &Matrix {
        &self.prototypes
    }
}

/// Per-class normalized mean of raw feature rows.
pub fn class_prototypes(features: &Matrix, labels: &[usize], n_classes: usize) -> Result<Matrix> {
    let mut sums = Matrix::zeros(n_classes, features.cols());
    let mut counts = vec![0usize; n_classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        if y >= n_classes {
            return Err(Error::LabelOutOfRange { label: y, n_classes });
        }
        linalg::axpy(sums.row_mut(y), row, 1.0);
        counts[y] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    for (class, &count) in counts.iter().enumerate() {
        let row = sums.row_mut(class);
        row.iter_mut().for_each(|v| *v /= count as f64);
        linalg::normalize_in_place(row, MIN_FEATURE_NORM).ok_or(Error::DegeneratePrototype { class })?;
    }
    Ok(sums)
}

/// Initializes both banks from the normalized per-class mean of every labeled
/// (source and target) feature under the current model.
pub fn init_banks<B: Backbone>(
    episode: &SSDAEpisode,
    model: &Model<B>,
    gamma: f64,
) -> Result<(IntermediateBank, DynamicBank)> {
    let labeled: Vec<&[f64]> = episode.labeled().map(|ex| ex.x.as_slice()).collect();
    let labels: Vec<usize> = episode.labeled().map(|ex| ex.y).collect();
    let x = Matrix::from_rows(episode.dim(), labeled);
    let pass = model.forward(&x)?;
    let protos = class_prototypes(&pass.features, &labels, episode.n_classes())?;
    Ok((IntermediateBank::from_rows(protos.clone()), DynamicBank::new(protos, gamma)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[[f64; 2]]) -> Matrix {
        let mut m = Matrix::from_rows(2, rows.iter().map(|r| r.as_slice()));
        for i in 0..m.rows() {
            linalg::normalize_in_place(m.row_mut(i), 0.0).unwrap();
        }
        m
    }

    #[test]
    fn misclassified_samples_leave_slots_untouched() {
        let mut b = IntermediateBank::from_rows(unit_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let before = b.clone();
        let feats = unit_rows(&[[0.6, 0.8], [0.8, 0.6]]);
        let log = b.update(&feats, &[0, 1], &[1, 0], 3).unwrap();
        assert!(log.is_empty());
        assert_eq!(b, before);
    }

    #[test]
    fn last_correct_sample_wins() {
        let mut b = IntermediateBank::empty(2, 2);
        let feats = unit_rows(&[[0.6, 0.8], [0.8, 0.6], [1.0, 0.0]]);
        let log = b.update(&feats, &[0, 0, 1], &[0, 0, 0], 0).unwrap();
        assert_eq!(b.slots().row(0), feats.row(1));
        assert!(b.is_filled(0) && !b.is_filled(1));
        assert_eq!(log.len(), 2);
        assert!(b.update(&feats, &[0, 2, 1], &[0, 2, 1], 1).is_err());
    }

    #[test]
    fn ewma_limits() {
        let b = IntermediateBank::from_rows(unit_rows(&[[0.0, 1.0]]));
        let mut fast = DynamicBank::new(unit_rows(&[[1.0, 0.0]]), 0.0).unwrap();
        fast.ewma_update(&b).unwrap();
        assert_eq!(fast.prototypes_ref().row(0), &[0.0, 1.0]);
        let mut frozen = DynamicBank::new(unit_rows(&[[1.0, 0.0]]), 1.0).unwrap();
        frozen.ewma_update(&b).unwrap();
        assert_eq!(frozen.prototypes_ref().row(0), &[1.0, 0.0]);
    }

    #[test]
    fn ewma_renormalizes() {
        let b = IntermediateBank::from_rows(unit_rows(&[[0.0, 1.0]]));
        let mut bank = DynamicBank::new(unit_rows(&[[1.0, 0.0]]), 0.1).unwrap();
        bank.ewma_update(&b).unwrap();
        let row = bank.prototypes_ref().row(0);
        // raw (0.1, 0.9) has norm sqrt(0.82) = 0.905539...
        assert!((row[0] - 0.110_431_526).abs() < 1e-8, "{row:?}");
        assert!((row[1] - 0.993_883_735).abs() < 1e-8, "{row:?}");
        assert!((linalg::norm(row) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unfilled_rows_are_skipped() {
        let b = IntermediateBank::empty(2, 2);
        let mut bank = DynamicBank::new(unit_rows(&[[1.0, 0.0], [0.0, 1.0]]), 0.5).unwrap();
        let before = bank.prototypes();
        let log = bank.ewma_update(&b).unwrap();
        assert_eq!(bank.prototypes(), before);
        assert!(log.records.iter().all(|r| r.event == BankEvent::SkippedUnfilled));
    }

    #[test]
    fn snapshots_are_copies() {
        let b = IntermediateBank::from_rows(unit_rows(&[[0.0, 1.0]]));
        let mut bank = DynamicBank::new(unit_rows(&[[1.0, 0.0]]), 0.5).unwrap();
        let snap = bank.prototypes();
        bank.ewma_update(&b).unwrap();
        assert_eq!(snap.row(0), &[1.0, 0.0]);
        assert_ne!(bank.prototypes(), snap);
    }

    #[test]
    fn antipodal_mean_is_degenerate() {
        let feats = unit_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]);
        let err = class_prototypes(&feats, &[0, 0, 1], 2).unwrap_err();
        assert_eq!(err, Error::DegeneratePrototype { class: 0 });
        let err = class_prototypes(&feats, &[0, 0, 0], 2).unwrap_err();
        assert_eq!(err, Error::EmptyClass { class: 1 });
    }

    #[test]
    fn rejects_out_of_range_gamma() {
        assert!(DynamicBank::new(unit_rows(&[[1.0, 0.0]]), 1.5).is_err());
        assert!(DynamicBank::new(unit_rows(&[[1.0, 0.0]]), -0.1).is_err());
    }
}
