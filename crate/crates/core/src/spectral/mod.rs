//! Truncated Hilbert-space arithmetic in the common eigenbasis of `A` and `Q`.
//!
//! Every operator in the crate is diagonal in the basis `{e_i}` with
//! `A e_i = -alpha_i e_i` and `Q e_i = gamma_i e_i`. The semigroup `e^{tA}`,
//! the covariance `Q_t` and the smoothing operator `Lambda_t = Q_t^{-1/2} e^{tA}`
//! are all elementwise functions of the two spectra.

mod norms;

pub use norms::{
    holder_seminorm, holder_seminorm_with, interpolation_probe, sup_norm, sym_op_norm, BallSampler,
    HolderReport, InequalityEntry, InterpolationReport, Metric,
};

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Diagonal truncation of `(A, Q)` to `n_modes` eigenpairs, with the radius of
/// the ball on which field surrogates and function norms live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralModel {
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    ball_radius: f64,
}

impl SpectralModel {
    pub fn new(alpha: Vec<f64>, gamma: Vec<f64>, ball_radius: f64) -> Result<Self> {
        ensure(!alpha.is_empty(), || "at least one mode is required".into())?;
        if alpha.len() != gamma.len() {
            return Err(Error::DimensionMismatch { expected: alpha.len(), got: gamma.len() });
        }
        ensure(alpha.iter().all(|a| a.is_finite() && *a > 0.0), || {
            "alpha must be strictly positive".into()
        })?;
        ensure(alpha.windows(2).all(|w| w[0] <= w[1]), || {
            "alpha must be non-decreasing".into()
        })?;
        ensure(gamma.iter().all(|g| g.is_finite() && *g > 0.0), || {
            "gamma must be strictly positive".into()
        })?;
        ensure(ball_radius.is_finite() && ball_radius > 0.0, || {
            "ball_radius must be positive".into()
        })?;
        Ok(Self { alpha, gamma, ball_radius })
    }

    /// Dirichlet Laplacian on an interval: `alpha_i = i^2`, `Q = I`.
    pub fn laplacian(n_modes: usize, ball_radius: f64) -> Result<Self> {
        let alpha = (1..=n_modes).map(|i| (i * i) as f64).collect();
        Self::new(alpha, vec![1.0; n_modes], ball_radius)
    }

    /// `alpha_i = 1` for every mode; `Q_t` is not trace class in the limit.
    pub fn constant_alpha(n_modes: usize, ball_radius: f64) -> Result<Self> {
        Self::new(vec![1.0; n_modes], vec![1.0; n_modes], ball_radius)
    }

    pub fn n_modes(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn ball_radius(&self) -> f64 {
        self.ball_radius
    }

    pub fn with_ball_radius(&self, ball_radius: f64) -> Result<Self> {
        Self::new(self.alpha.clone(), self.gamma.clone(), ball_radius)
    }

    /// First `n` modes of the model.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        ensure(n >= 1 && n <= self.n_modes(), || format!("cannot truncate to {n} modes"))?;
        Self::new(self.alpha[..n].to_vec(), self.gamma[..n].to_vec(), self.ball_radius)
    }

    /// Partial sums `S_n = sum_{i<=n} gamma_i / alpha_i`.
    pub fn decay_partial_sums(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.gamma)
            .scan(0.0, |acc, (a, g)| {
                *acc += g / a;
                Some(*acc)
            })
            .collect()
    }

    /// `e^{tA}`.
    pub fn semigroup(&self, t: f64) -> DiagonalOperator {
        DiagonalOperator::new(self.alpha.iter().map(|a| (-a * t).exp()).collect())
    }

    pub fn q(&self) -> DiagonalOperator {
        DiagonalOperator::new(self.gamma.clone())
    }

    /// Slowest decay rate `omega` with `||e^{tA}|| = e^{-omega t}`.
    pub fn omega(&self) -> f64 {
        self.alpha[0]
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len == self.n_modes() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected: self.n_modes(), got: len })
        }
    }
}

/// A point of `H_N` in eigenbasis coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HVector(Vec<f64>);

impl HVector {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self(coeffs)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &HVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &HVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> HVector {
        HVector(self.0.iter().map(|v| v * c).collect())
    }

    pub fn add(&self, other: &HVector) -> HVector {
        HVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &HVector) -> HVector {
        HVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

impl From<Vec<f64>> for HVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Index<usize> for HVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for HVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Euclidean norm of eigenbasis coordinates.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A bounded operator that is diagonal in the eigenbasis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalOperator {
    pub diag: Vec<f64>,
}

impl DiagonalOperator {
    pub fn new(diag: Vec<f64>) -> Self {
        Self { diag }
    }

    pub fn zeros(n: usize) -> Self {
        Self { diag: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `||.||_{L(H)}`
    pub fn op_norm(&self) -> f64 {
        self.diag.iter().fold(0.0, |m, d| m.max(d.abs()))
    }

    /// `||.||_{L_2(H)}`
    pub fn hs_norm(&self) -> f64 {
        norm(&self.diag)
    }

    /// `||.||_{L_1(H)}`
    pub fn trace_norm(&self) -> f64 {
        self.diag.iter().map(|d| d.abs()).sum()
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }

    pub fn apply(&self, x: &HVector) -> HVector {
        HVector(self.diag.iter().zip(x.as_slice()).map(|(d, v)| d * v).collect())
    }

    pub fn compose(&self, other: &DiagonalOperator) -> DiagonalOperator {
        DiagonalOperator::new(self.diag.iter().zip(&other.diag).map(|(a, b)| a * b).collect())
    }

    pub fn sub(&self, other: &DiagonalOperator) -> DiagonalOperator {
        DiagonalOperator::new(self.diag.iter().zip(&other.diag).map(|(a, b)| a - b).collect())
    }
}

/// Gaussian measure with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMeasure {
    pub mean: HVector,
    pub cov_diag: Vec<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: HVector, cov_diag: Vec<f64>) -> Result<Self> {
        if mean.len() != cov_diag.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: cov_diag.len() });
        }
        ensure(cov_diag.iter().all(|c| c.is_finite() && *c >= 0.0), || {
            "covariance must be non-negative".into()
        })?;
        Ok(Self { mean, cov_diag })
    }

    /// Centered `N(0, eps Q_t)`.
    pub fn ou_noise(model: &SpectralModel, t: f64, epsilon: f64) -> Result<Self> {
        let cov = qt_covariance(model, t, epsilon)?;
        Self::new(HVector::zeros(model.n_modes()), cov.diag)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HVector {
        HVector(
            self.mean
                .as_slice()
                .iter()
                .zip(&self.cov_diag)
                .map(|(m, c)| m + c.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }

    pub fn sample_n(&self, n: usize, seed: u64) -> Vec<HVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}

/// `(1 - e^{-2 a t}) / (2 a)` without cancellation for small `a t`.
pub(crate) fn ou_variance_factor(alpha: f64, t: f64) -> f64 {
    -(-2.0 * alpha * t).exp_m1() / (2.0 * alpha)
}

/// Covariance `eps Q_t` of the Ornstein-Uhlenbeck transition kernel.
pub fn qt_covariance(model: &SpectralModel, t: f64, epsilon: f64) -> Result<DiagonalOperator> {
    ensure(t >= 0.0 && t.is_finite(), || format!("time must be >= 0, got {t}"))?;
    ensure(epsilon >= 0.0 && epsilon.is_finite(), || format!("epsilon must be >= 0, got {epsilon}"))?;
    Ok(DiagonalOperator::new(
        model
            .alpha
            .iter()
            .zip(&model.gamma)
            .map(|(a, g)| epsilon * g * ou_variance_factor(*a, t))
            .collect(),
    ))
}

/// `Lambda_t = Q_t^{-1/2} e^{tA}`.
pub fn lambda_t(model: &SpectralModel, t: f64) -> Result<DiagonalOperator> {
    ensure(t > 0.0 && t.is_finite(), || format!("lambda_t needs t > 0, got {t}"))?;
    Ok(DiagonalOperator::new(
        model
            .alpha
            .iter()
            .zip(&model.gamma)
            .map(|(a, g)| (-a * t).exp() / (g * ou_variance_factor(*a, t)).sqrt())
            .collect(),
    ))
}

/// `||Lambda_t Q e^{tA*}||_{L_2}^2 = 2 sum alpha_i gamma_i e^{-2 alpha_i t} / (e^{2 alpha_i t} - 1)`.
pub fn lambda_q_semigroup_hs_sq(model: &SpectralModel, t: f64) -> Result<f64> {
    ensure(t > 0.0 && t.is_finite(), || format!("needs t > 0, got {t}"))?;
    Ok(model
        .alpha
        .iter()
        .zip(&model.gamma)
        .map(|(a, g)| 2.0 * a * g * (-2.0 * a * t).exp() / (2.0 * a * t).exp_m1())
        .sum())
}

/// `kappa_theta(t) = ||Lambda_t Q e^{tA*}||_{L_2} ||Lambda_t||^{1-theta}`.
pub fn kappa_probe(model: &SpectralModel, t: f64, theta: f64) -> Result<f64> {
    ensure(theta > 0.0 && theta < 1.0, || format!("theta must lie in (0,1), got {theta}"))?;
    let hs = lambda_q_semigroup_hs_sq(model, t)?.sqrt();
    let lam = lambda_t(model, t)?.op_norm();
    Ok(hs * lam.powf(1.0 - theta))
}

/// Exponent `beta` of the fit `kappa_theta(t) ~ c t^{-beta} e^{-a t}` over `t_grid`.
///
/// The exponential factor is part of the fitted model: with few modes the
/// stiff ones switch off inside the window and a pure power law would
/// overstate the blow-up.
pub fn kappa_blowup_exponent(model: &SpectralModel, theta: f64, t_grid: &[f64]) -> Result<f64> {
    let values = t_grid
        .iter()
        .map(|&t| kappa_probe(model, t, theta))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::stats::power_exp_fit(t_grid, &values)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit() -> SpectralModel {
        SpectralModel::new(vec![1.0], vec![1.0], 1.0).unwrap()
    }

    #[test]
    fn rejects_bad_spectra() {
        assert!(SpectralModel::new(vec![2.0, 1.0], vec![1.0, 1.0], 1.0).is_err());
        assert!(SpectralModel::new(vec![1.0, 0.0], vec![1.0, 1.0], 1.0).is_err());
        assert!(SpectralModel::new(vec![1.0], vec![-1.0], 1.0).is_err());
        assert!(SpectralModel::new(vec![1.0], vec![1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn qt_covariance_at_ln2() {
        let q = qt_covariance(&unit(), 2f64.ln(), 1.0).unwrap();
        assert_relative_eq!(q.diag[0], 0.375, epsilon = 1e-14);
        // Independent route: midpoint quadrature of int_0^t e^{-2s} ds.
        let t = 2f64.ln();
        let n = 20_000;
        let h = t / n as f64;
        let quad: f64 = (0..n).map(|k| (-2.0 * (k as f64 + 0.5) * h).exp() * h).sum();
        assert_relative_eq!(q.diag[0], quad, epsilon = 1e-9);
    }

    #[test]
    fn qt_covariance_limits() {
        let m = SpectralModel::laplacian(3, 1.0).unwrap();
        assert!(qt_covariance(&m, 0.0, 1.0).unwrap().diag.iter().all(|d| *d == 0.0));
        let q = qt_covariance(&unit(), 60.0, 1.0).unwrap();
        assert_relative_eq!(q.diag[0], 0.5, epsilon = 1e-15);
        assert!(qt_covariance(&unit(), -1.0, 1.0).is_err());
    }

    #[test]
    fn lambda_t_values() {
        let l = lambda_t(&unit(), 2f64.ln()).unwrap();
        // Oracle: Q_t^{-1/2} e^{tA} = 0.375^{-1/2} * 0.5
        assert_relative_eq!(l.diag[0], 0.5 / 0.375f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(l.diag[0], 0.816496580927726, epsilon = 1e-12);
        let t = 30.0;
        let l = lambda_t(&unit(), t).unwrap();
        assert_relative_eq!(l.diag[0], 2f64.sqrt() * (-t).exp(), max_relative = 1e-12);
        assert!(lambda_t(&unit(), 0.0).is_err());
    }

    #[test]
    fn lambda_t_small_time_slope() {
        let m = SpectralModel::laplacian(4, 1.0).unwrap();
        let ts = [1e-2, 1e-3, 1e-4];
        let v: Vec<f64> = ts.iter().map(|&t| lambda_t(&m, t).unwrap().op_norm()).collect();
        let slope = crate::stats::loglog_slope(&ts, &v).unwrap();
        assert!((slope + 0.5).abs() <= 0.02, "slope {slope}");
    }

    #[test]
    fn kappa_closed_form() {
        let t = 2f64.ln();
        let hs2 = lambda_q_semigroup_hs_sq(&unit(), t).unwrap();
        assert_relative_eq!(hs2, 1.0 / 6.0, epsilon = 1e-14);
        // Direct HS norm of the product Lambda_t Q e^{tA*}.
        let m = unit();
        let prod = lambda_t(&m, t).unwrap().compose(&m.q()).compose(&m.semigroup(t));
        assert_relative_eq!(prod.hs_norm().powi(2), hs2, epsilon = 1e-14);
        let k = kappa_probe(&m, t, 1.0 - 1e-12).unwrap();
        assert_relative_eq!(k, hs2.sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn kappa_exponent_laplacian() {
        let m = SpectralModel::laplacian(3, 1.0).unwrap();
        let ts: Vec<f64> = (0..9).map(|k| 1e-3 * 10f64.powf(k as f64 / 4.0)).collect();
        for theta in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let p = kappa_blowup_exponent(&m, theta, &ts).unwrap();
            assert!(p <= 1.0 - theta / 2.0 + 0.05, "theta {theta}: exponent {p}");
            assert!(p < 1.0);
        }
    }

    #[test]
    fn gaussian_sampling_variance() {
        let g = GaussianMeasure::new(HVector::new(vec![0.5, -1.0]), vec![0.3, 0.02]).unwrap();
        let n = 100_000;
        let samples = g.sample_n(n, 7);
        for i in 0..2 {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / n as f64;
            let var = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // Standard error of the sample variance of a Gaussian: c * sqrt(2/(n-1)).
            let se = g.cov_diag[i] * (2.0 / (n - 1) as f64).sqrt();
            assert!((var - g.cov_diag[i]).abs() <= 5.0 * se, "mode {i}: {var}");
        }
    }

    proptest! {
        #[test]
        fn norm_ordering(diag in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
            let op = DiagonalOperator::new(diag);
            prop_assert!(op.op_norm() <= op.hs_norm() + 1e-12);
            prop_assert!(op.hs_norm() <= op.trace_norm() + 1e-12);
            prop_assert!(op.trace().abs() <= op.trace_norm() + 1e-12);
        }

        #[test]
        fn qt_monotone_and_lambda_identity(
            alpha in proptest::collection::vec(0.1f64..20.0, 1..6),
            t1 in 1e-4f64..3.0,
            dt in 0.0f64..2.0,
        ) {
            let mut alpha = alpha;
            alpha.sort_by(f64::total_cmp);
            let n = alpha.len();
            let gamma: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + i as f64)).collect();
            let m = SpectralModel::new(alpha.clone(), gamma, 1.0).unwrap();
            let q1 = qt_covariance(&m, t1, 1.0).unwrap();
            let q2 = qt_covariance(&m, t1 + dt, 1.0).unwrap();
            for i in 0..n {
                prop_assert!(q2.diag[i] >= q1.diag[i]);
            }
            let lam = lambda_t(&m, t1).unwrap();
            for i in 0..n {
                let rebuilt = lam.diag[i] * q1.diag[i].sqrt();
                let expected = (-alpha[i] * t1).exp();
                prop_assert!((rebuilt - expected).abs() <= 1e-12);
            }
        }
    }
}
