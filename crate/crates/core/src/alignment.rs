//! Multi-kernel RBF maximum mean discrepancy between the prototype set and a
//! batch of unlabeled target features.
//!
//! The estimator is the biased V-statistic
//! `mean(K_pp) - 2 mean(K_pu) + mean(K_uu)`. Prototypes and bandwidths are
//! constants as far as gradients go; only the unlabeled features receive one.

use alloc::vec::Vec;

use crate::error::{config_err, input_err, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BandwidthStrategy {
    /// `sigma_med * 2^(j - (n-1)/2)` for `j in 0..n_kernels`, where
    /// `sigma_med` is the median pairwise distance of the combined set.
    #[default]
    MedianHeuristic,
    /// Use `sigmas` as given.
    FixedList,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelSpec {
    pub strategy: BandwidthStrategy,
    pub sigmas: Vec<f64>,
    pub n_kernels: usize,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { strategy: BandwidthStrategy::MedianHeuristic, sigmas: Vec::new(), n_kernels: 5 }
    }
}

impl KernelSpec {
    pub fn fixed(sigmas: Vec<f64>) -> Self {
        let n_kernels = sigmas.len();
        KernelSpec { strategy: BandwidthStrategy::FixedList, sigmas, n_kernels }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            BandwidthStrategy::FixedList => check_sigmas(&self.sigmas),
            BandwidthStrategy::MedianHeuristic if self.n_kernels == 0 => {
                Err(config_err("median heuristic needs n_kernels >= 1"))
            }
            BandwidthStrategy::MedianHeuristic => Ok(()),
        }
    }

    /// Concrete bandwidths for comparing `a` against `c`.
    pub fn resolve(&self, a: &Matrix, c: &Matrix) -> Result<Vec<f64>> {
        self.validate()?;
        match self.strategy {
            BandwidthStrategy::FixedList => Ok(self.sigmas.clone()),
            BandwidthStrategy::MedianHeuristic => {
                let med = median_pairwise_distance(a, c);
                // all points coincide: any bandwidth gives the same (zero) MMD
                let med = if med > 1e-12 { med } else { 1.0 };
                let centre = (self.n_kernels as f64 - 1.0) / 2.0;
                Ok((0..self.n_kernels).map(|j| med * libm::exp2(j as f64 - centre)).collect())
            }
        }
    }
}

fn check_sigmas(sigmas: &[f64]) -> Result<()> {
    if sigmas.is_empty() {
        return Err(config_err("at least one kernel bandwidth is required"));
    }
    if sigmas.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(config_err("kernel bandwidths must be positive and finite"));
    }
    Ok(())
}

/// Median Euclidean distance over all distinct pairs of rows of `a` and `c`
/// taken together. Zero when fewer than two rows exist.
pub fn median_pairwise_distance(a: &Matrix, c: &Matrix) -> f64 {
    let all = a.vstack(c);
    let n = all.rows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(libm::sqrt(linalg::sq_dist(all.row(i), all.row(j))));
        }
    }
    linalg::median(&mut d).unwrap_or(0.0)
}

#[inline]
fn kernel_sum(sq: f64, inv_two_sigma_sq: &[f64]) -> f64 {
    inv_two_sigma_sq.iter().map(|&c| libm::exp(-sq * c)).sum()
}

/// `sum_k exp(-|a - c|^2 / (2 sigma_k^2))` and its derivative w.r.t. `|a - c|^2`.
#[inline]
fn kernel_sum_and_slope(sq: f64, inv_two_sigma_sq: &[f64]) -> (f64, f64) {
    let mut value = 0.0;
    let mut slope = 0.0;
    for &c in inv_two_sigma_sq {
        let e = libm::exp(-sq * c);
        value += e;
        slope -= c * e;
    }
    (value, slope)
}

fn inv_two_sigma_sq(sigmas: &[f64]) -> Vec<f64> {
    sigmas.iter().map(|s| 1.0 / (2.0 * s * s)).collect()
}

/// Summed-kernel Gram matrix with explicit bandwidths.
pub fn rbf_gram_with(a: &Matrix, c: &Matrix, sigmas: &[f64]) -> Result<Matrix> {
    check_sigmas(sigmas)?;
    if a.cols() != c.cols() {
        return Err(input_err("gram operands differ in dimension"));
    }
    if !a.is_finite() || !c.is_finite() {
        return Err(input_err("gram operands must be finite"));
    }
    let coef = inv_two_sigma_sq(sigmas);
    let mut g = Matrix::zeros(a.rows(), c.rows());
    for i in 0..a.rows() {
        for j in 0..c.rows() {
            g[(i, j)] = kernel_sum(linalg::sq_dist(a.row(i), c.row(j)), &coef);
        }
    }
    Ok(g)
}

/// Summed-kernel Gram matrix with bandwidths resolved from `spec`.
pub fn rbf_gram(a: &Matrix, c: &Matrix, spec: &KernelSpec) -> Result<Matrix> {
    let sigmas = spec.resolve(a, c)?;
    rbf_gram_with(a, c, &sigmas)
}

fn mean(m: &Matrix) -> f64 {
    m.as_slice().iter().sum::<f64>() / m.as_slice().len() as f64
}

fn check_mmd_inputs(prototypes: &Matrix, features: &Matrix) -> Result<()> {
    if prototypes.rows() < 2 || features.rows() < 2 {
        return Err(input_err("MMD needs at least two rows in each set"));
    }
    Ok(())
}

/// Biased MMD estimate with explicit bandwidths.
pub fn mmd_with(prototypes: &Matrix, features: &Matrix, sigmas: &[f64]) -> Result<f64> {
    check_mmd_inputs(prototypes, features)?;
    let kpp = rbf_gram_with(prototypes, prototypes, sigmas)?;
    let kpu = rbf_gram_with(prototypes, features, sigmas)?;
    let kuu = rbf_gram_with(features, features, sigmas)?;
    Ok(mean(&kpp) - 2.0 * mean(&kpu) + mean(&kuu))
}

/// Biased MMD estimate with bandwidths resolved from `spec` on the combined set.
pub fn mmd(prototypes: &Matrix, features: &Matrix, spec: &KernelSpec) -> Result<f64> {
    let sigmas = spec.resolve(prototypes, features)?;
    mmd_with(prototypes, features, &sigmas)
}

/// MMD value and its gradient w.r.t. `features` (prototypes held constant).
pub fn mmd_and_grad(prototypes: &Matrix, features: &Matrix, sigmas: &[f64]) -> Result<(f64, Matrix)> {
    check_mmd_inputs(prototypes, features)?;
    check_sigmas(sigmas)?;
    if prototypes.cols() != features.cols() {
        return Err(input_err("prototypes and features differ in dimension"));
    }
    let coef = inv_two_sigma_sq(sigmas);
    let (k, n, d) = (prototypes.rows(), features.rows(), features.cols());
    let mut grad = Matrix::zeros(n, d);

    let kpp = mean(&rbf_gram_with(prototypes, prototypes, sigmas)?);

    let mut kpu = 0.0;
    let cross = -2.0 / (k * n) as f64;
    for j in 0..n {
        let u = features.row(j);
        for i in 0..k {
            let p = prototypes.row(i);
            let (value, slope) = kernel_sum_and_slope(linalg::sq_dist(p, u), &coef);
            kpu += value;
            // d|p-u|^2/du = 2(u - p)
            let g = grad.row_mut(j);
            for ((gj, &ui), &pi) in g.iter_mut().zip(u).zip(p) {
                *gj += cross * slope * 2.0 * (ui - pi);
            }
        }
    }
    kpu /= (k * n) as f64;

    let mut kuu = 0.0;
    let within = 1.0 / (n * n) as f64;
    for a in 0..n {
        kuu += kernel_sum(0.0, &coef);
        for b in a + 1..n {
            let (ua, ub) = (features.row(a), features.row(b));
            let (value, slope) = kernel_sum_and_slope(linalg::sq_dist(ua, ub), &coef);
            kuu += 2.0 * value;
            // pair (a, b) appears twice in the double sum
            let scale = within * 2.0 * slope * 2.0;
            for t in 0..d {
                let diff = ua[t] - ub[t];
                grad[(a, t)] += scale * diff;
                grad[(b, t)] -= scale * diff;
            }
        }
    }
    kuu *= within;

    Ok((kpp - 2.0 * kpu + kuu, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_distance_gives_n_kernels() {
        let a = Matrix::from_vec(1, 2, std::vec![0.3, 0.4]);
        let g = rbf_gram_with(&a, &a, &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(g[(0, 0)], 3.0);
        let far = Matrix::from_vec(1, 2, std::vec![1e3, 0.0]);
        assert!(rbf_gram_with(&a, &far, &[1.0]).unwrap()[(0, 0)] < 1e-300);
    }

    #[test]
    fn zero_bandwidth_is_rejected() {
        let a = Matrix::from_vec(1, 1, std::vec![0.0]);
        assert!(rbf_gram_with(&a, &a, &[0.0]).is_err());
        assert!(rbf_gram(&a, &a, &KernelSpec::fixed(std::vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn identical_sets_have_zero_mmd() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random(5, 3, &mut rng);
        let v = mmd(&a, &a, &KernelSpec::default()).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn symmetric_in_its_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(4, 3, &mut rng);
        let b = random(7, 3, &mut rng);
        let spec = KernelSpec::default();
        let ab = mmd(&a, &b, &spec).unwrap();
        let ba = mmd(&b, &a, &spec).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn grad_path_value_matches_plain_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(4, 3, &mut rng);
        let b = random(6, 3, &mut rng);
        let sig = [0.3, 1.0, 2.5];
        let (v, _) = mmd_and_grad(&a, &b, &sig).unwrap();
        assert!((v - mmd_with(&a, &b, &sig).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn rejects_single_row() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::zeros(1, 2);
        assert!(mmd_with(&a, &b, &[1.0]).is_err());
        assert!(mmd_and_grad(&a, &b, &[1.0]).is_err());
    }

    #[test]
    fn median_heuristic_grid() {
        let a = Matrix::from_vec(2, 1, std::vec![0.0, 2.0]);
        let c = Matrix::from_vec(1, 1, std::vec![4.0]);
        // distances 2, 4, 2 -> median 2
        let s = KernelSpec::default().resolve(&a, &c).unwrap();
        assert_eq!(s, std::vec![0.5, 1.0, 2.0, 4.0, 8.0]);
    }
}
