//! Ball-restricted function norms and probes of the interpolation inequalities.
//!
//! Suprema and Hölder seminorms are maxima over a deterministic, prefix-stable
//! sample schedule, so every estimate is a lower bound of the true quantity and
//! never decreases when more samples are drawn.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SpectralModel;
use crate::error::{ensure, Error, Result};
use crate::field::Field;
use crate::stats::mix;

/// Uniform sampling and radial projection for the closed ball of `H_N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallSampler {
    pub n: usize,
    pub radius: f64,
}

impl BallSampler {
    pub fn new(n: usize, radius: f64) -> Self {
        Self { n, radius }
    }

    pub fn for_model(model: &SpectralModel) -> Self {
        Self::new(model.n_modes(), model.ball_radius())
    }

    pub fn direction<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..self.n).map(|_| rng.sample(StandardNormal)).collect();
            let r = super::norm(&v);
            if r > 1e-12 {
                return v.into_iter().map(|c| c / r).collect();
            }
        }
    }

    pub fn uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let dir = self.direction(rng);
        let u: f64 = rng.random();
        let r = self.radius * u.powf(1.0 / self.n as f64);
        dir.into_iter().map(|c| c * r).collect()
    }

    /// Radial projection onto the ball.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let r = super::norm(x);
        if r <= self.radius {
            x.to_vec()
        } else {
            x.iter().map(|c| c * self.radius / r).collect()
        }
    }

    /// The `k`-th pair of the schedule. Kinds rotate between independent
    /// uniform pairs, short pairs with log-uniform separation, and antipodal
    /// boundary pairs.
    pub fn pair(&self, seed: u64, k: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, k as u64));
        match k % 3 {
            0 => (self.uniform(&mut rng), self.uniform(&mut rng)),
            1 => {
                let x = self.uniform(&mut rng);
                let dir = self.direction(&mut rng);
                let u: f64 = rng.random();
                let h = self.radius * 10f64.powf(-4.0 * u);
                let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
                let y = self.project(&y);
                (x, y)
            }
            _ => {
                let dir = self.direction(&mut rng);
                let x: Vec<f64> = dir.iter().map(|d| d * self.radius).collect();
                let y: Vec<f64> = x.iter().map(|c| -c).collect();
                (x, y)
            }
        }
    }

    /// Deterministic probe points: center, axis points at several radii, then
    /// uniform samples.
    pub fn probe_points(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut pts = vec![vec![0.0; self.n]];
        for i in 0..self.n {
            for s in [1.0, -1.0, 0.5, -0.5] {
                let mut p = vec![0.0; self.n];
                p[i] = s * self.radius;
                pts.push(p);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while pts.len() < count {
            pts.push(self.uniform(&mut rng));
        }
        pts
    }
}

/// How differences of field values are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Euclidean norm (scalars and gradients).
    Euclid,
    /// Spectral norm of a symmetric row-major square matrix (Hessians).
    Operator,
}

impl Metric {
    pub fn eval(self, v: &[f64]) -> f64 {
        match self {
            Metric::Euclid => super::norm(v),
            Metric::Operator => sym_op_norm(v),
        }
    }
}

pub fn sym_op_norm(v: &[f64]) -> f64 {
    let n = (v.len() as f64).sqrt().round() as usize;
    match n {
        0 => 0.0,
        1 => v[0].abs(),
        _ => {
            let m = DMatrix::from_row_slice(n, n, v);
            let m = (&m + m.transpose()) * 0.5;
            SymmetricEigen::new(m).eigenvalues.iter().fold(0.0, |a, e| a.max(e.abs()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub theta: f64,
    pub sup_norm: f64,
    pub holder_seminorm_est: f64,
    pub n_pairs: usize,
    pub ball_radius: f64,
}

/// `[phi]_theta` and `||phi||_0` over the ball, estimated on `n_pairs` pairs.
pub fn holder_seminorm(
    field: &dyn Field,
    theta: f64,
    model: &SpectralModel,
    n_pairs: usize,
    seed: u64,
) -> Result<HolderReport> {
    holder_seminorm_with(
        |x| Ok(vec![field.value(x)]),
        Metric::Euclid,
        theta,
        &BallSampler::for_model(model),
        n_pairs,
        seed,
    )
}

/// Hölder estimator for a vector- or matrix-valued map.
pub fn holder_seminorm_with<F>(
    eval: F,
    metric: Metric,
    theta: f64,
    ball: &BallSampler,
    n_pairs: usize,
    seed: u64,
) -> Result<HolderReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    ensure(theta > 0.0 && theta <= 1.0, || format!("theta must lie in (0,1], got {theta}"))?;
    ensure(n_pairs >= 2, || format!("n_pairs must be >= 2, got {n_pairs}"))?;
    let checked = |x: &[f64]| -> Result<Vec<f64>> {
        let v = eval(x)?;
        if v.iter().all(|c| c.is_finite()) {
            Ok(v)
        } else {
            Err(Error::NonFinite("field value in Hölder estimate".into()))
        }
    };
    let mut sup = metric.eval(&checked(&vec![0.0; ball.n])?);
    let mut semi: f64 = 0.0;
    for k in 0..n_pairs {
        let (x, y) = ball.pair(seed, k);
        let fx = checked(&x)?;
        let fy = checked(&y)?;
        sup = sup.max(metric.eval(&fx)).max(metric.eval(&fy));
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist > 0.0 {
            let diff: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| a - b).collect();
            semi = semi.max(metric.eval(&diff) / dist.powf(theta));
        }
    }
    Ok(HolderReport {
        theta,
        sup_norm: sup,
        holder_seminorm_est: semi,
        n_pairs,
        ball_radius: ball.radius,
    })
}

/// `||phi||_0` over deterministic probe points of the ball.
pub fn sup_norm(field: &dyn Field, model: &SpectralModel, n_points: usize, seed: u64) -> Result<f64> {
    let ball = BallSampler::for_model(model);
    let mut sup: f64 = 0.0;
    for p in ball.probe_points(n_points, seed) {
        let v = field.value(&p);
        if !v.is_finite() {
            return Err(Error::NonFinite("field value in sup norm".into()));
        }
        sup = sup.max(v.abs());
    }
    Ok(sup)
}

/// One side-by-side comparison of an interpolation inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityEntry {
    pub name: String,
    pub lhs: f64,
    /// Right-hand side with unit constant.
    pub rhs: f64,
    /// Constant asserted for this inequality, if any.
    pub constant: Option<f64>,
    /// Smallest constant consistent with the estimates (`lhs / rhs`).
    pub implied_constant: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub theta: f64,
    pub ball_radius: f64,
    pub sup: f64,
    pub sup_grad: f64,
    pub sup_hess: Option<f64>,
    pub holder: f64,
    pub hess_holder: Option<f64>,
    pub entries: Vec<InequalityEntry>,
}

impl InterpolationReport {
    pub fn violations(&self) -> usize {
        self.entries.iter().filter(|e| e.violated).count()
    }

    pub fn entry(&self, name: &str) -> Option<&InequalityEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn entry(name: &str, lhs: f64, rhs: f64, constant: Option<f64>) -> InequalityEntry {
    let implied = if lhs == 0.0 { 0.0 } else if rhs == 0.0 { f64::INFINITY } else { lhs / rhs };
    let violated = match constant {
        Some(c) => lhs > c * rhs * (1.0 + 1e-12) + 1e-300,
        None => false,
    };
    InequalityEntry { name: name.into(), lhs, rhs, constant, implied_constant: implied, violated }
}

/// Estimates both sides of the interpolation inequalities on the ball.
///
/// Entries:
/// - `seminorm_by_gradient`: `[phi]_t <= 2 ||phi||_0^{1-t} ||D phi||_0^t` (the
///   only entry with an asserted constant),
/// - `hessian_by_gradient`: `||D^2 phi||_0` vs `||D phi||_0^{t/(1+t)} [D^2 phi]_t^{1/(1+t)}`,
/// - `gradient_by_hessian_seminorm`: `||D phi||_0` vs `||phi||_0^{(1+t)/(2+t)} [D^2 phi]_t^{1/(2+t)}`,
/// - `seminorm_times_hessian`: `[phi]_t ||D^2 phi||_0` vs `||phi||_0 [D^2 phi]_t`.
///
/// Hessian entries are omitted when the field has no analytic Hessian.
pub fn interpolation_probe(
    field: &dyn Field,
    theta: f64,
    model: &SpectralModel,
    n_pairs: usize,
    seed: u64,
) -> Result<InterpolationReport> {
    ensure(theta > 0.0 && theta < 1.0, || format!("theta must lie in (0,1), got {theta}"))?;
    let ball = BallSampler::for_model(model);
    let n = ball.n;
    let grad = |x: &[f64]| {
        field
            .gradient(x)
            .ok_or_else(|| Error::InvalidArgument("field has no analytic gradient".into()))
    };
    let holder = holder_seminorm(field, theta, model, n_pairs, seed)?;
    let gstats = holder_seminorm_with(grad, Metric::Euclid, theta, &ball, n_pairs, seed)?;

    // Extra dense points so the sup estimates on the right are not looser
    // than the pair maxima on the left.
    let mut sup = holder.sup_norm;
    let mut sup_grad = gstats.sup_norm;
    for p in ball.probe_points(4 * n_pairs, mix(seed, 0xD0)) {
        sup = sup.max(field.value(&p).abs());
        sup_grad = sup_grad.max(super::norm(&grad(&p)?));
    }

    let mut entries = vec![entry(
        "seminorm_by_gradient",
        holder.holder_seminorm_est,
        sup.powf(1.0 - theta) * sup_grad.powf(theta),
        Some(2.0),
    )];

    let has_hess = field.hessian(&vec![0.0; n]).is_some();
    let (mut sup_hess, mut hess_holder) = (None, None);
    if has_hess {
        let hess = |x: &[f64]| {
            field
                .hessian(x)
                .ok_or_else(|| Error::InvalidArgument("field has no analytic Hessian".into()))
        };
        let hstats = holder_seminorm_with(hess, Metric::Operator, theta, &ball, n_pairs, seed)?;
        let mut sh = hstats.sup_norm;
        for p in ball.probe_points(4 * n_pairs, mix(seed, 0xD0)) {
            sh = sh.max(sym_op_norm(&hess(&p)?));
        }
        let hh = hstats.holder_seminorm_est;
        entries.push(entry(
            "hessian_by_gradient",
            sh,
            sup_grad.powf(theta / (1.0 + theta)) * hh.powf(1.0 / (1.0 + theta)),
            None,
        ));
        entries.push(entry(
            "gradient_by_hessian_seminorm",
            sup_grad,
            sup.powf((1.0 + theta) / (2.0 + theta)) * hh.powf(1.0 / (2.0 + theta)),
            None,
        ));
        entries.push(entry("seminorm_times_hessian", holder.holder_seminorm_est * sh, sup * hh, None));
        sup_hess = Some(sh);
        hess_holder = Some(hh);
    }

    Ok(InterpolationReport {
        theta,
        ball_radius: ball.radius,
        sup,
        sup_grad,
        sup_hess,
        holder: holder.holder_seminorm_est,
        hess_holder,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Dilated, FieldSpec};

    fn one_mode() -> SpectralModel {
        SpectralModel::new(vec![1.0], vec![1.0], 1.0).unwrap()
    }

    /// Brute force over a fine 1-D grid of pairs.
    fn brute_holder(f: impl Fn(f64) -> f64, theta: f64, r: f64, m: usize) -> f64 {
        let xs: Vec<f64> = (0..=m).map(|k| -r + 2.0 * r * k as f64 / m as f64).collect();
        let mut best: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            for &y in &xs[i + 1..] {
                best = best.max((f(x) - f(y)).abs() / (x - y).abs().powf(theta));
            }
        }
        best
    }

    #[test]
    fn holder_of_identity() {
        let f = FieldSpec::Linear { a: vec![1.0] };
        let rep = holder_seminorm(&f, 0.5, &one_mode(), 300, 1).unwrap();
        let oracle = brute_holder(|x| x, 0.5, 1.0, 400);
        assert!((oracle - 2f64.sqrt()).abs() < 1e-12);
        assert!(rep.holder_seminorm_est <= oracle + 1e-12);
        assert!((rep.holder_seminorm_est - oracle).abs() < 1e-6);
    }

    #[test]
    fn holder_of_constant_and_sine() {
        let c = FieldSpec::Constant { c: 3.0 };
        assert_eq!(holder_seminorm(&c, 0.5, &one_mode(), 50, 1).unwrap().holder_seminorm_est, 0.0);
        let s = FieldSpec::Sin { a: vec![1.0], phase: 0.0, amp: 1.0 };
        let rep = holder_seminorm(&s, 1.0, &one_mode(), 3000, 2).unwrap();
        let oracle = brute_holder(f64::sin, 1.0, 1.0, 2000);
        assert!(rep.holder_seminorm_est <= 1.0 + 1e-12);
        assert!(rep.holder_seminorm_est > 0.995 && oracle > 0.995);
    }

    #[test]
    fn holder_is_prefix_monotone() {
        let m = SpectralModel::laplacian(2, 1.0).unwrap();
        let f = FieldSpec::Tanh { a: vec![2.0, -1.0] };
        let mut last = 0.0;
        for n in [2, 5, 20, 80, 200] {
            let e = holder_seminorm(&f, 0.4, &m, n, 9).unwrap().holder_seminorm_est;
            assert!(e >= last);
            last = e;
        }
    }

    #[test]
    fn non_finite_is_error() {
        let f = crate::field::FnField(|x: &[f64]| 1.0 / x[0]);
        assert!(matches!(
            holder_seminorm(&f, 0.5, &one_mode(), 10, 1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn probe_zero_field() {
        let f = FieldSpec::Constant { c: 0.0 };
        let rep = interpolation_probe(&f, 0.5, &one_mode(), 50, 1).unwrap();
        for e in &rep.entries {
            assert_eq!(e.lhs, 0.0);
            assert_eq!(e.rhs, 0.0);
            assert!(!e.violated);
        }
    }

    #[test]
    fn probe_sine_against_brute_force() {
        let s = FieldSpec::Sin { a: vec![1.0], phase: 0.0, amp: 1.0 };
        let rep = interpolation_probe(&s, 0.5, &one_mode(), 400, 3).unwrap();
        let e = rep.entry("seminorm_by_gradient").unwrap();
        // sup|sin| = sin 1, sup|cos| = 1 on [-1, 1].
        let rhs = 2.0 * 1f64.sin().sqrt();
        assert!(e.lhs <= rhs);
        assert!(e.lhs <= brute_holder(f64::sin, 0.5, 1.0, 1000) + 1e-12);
        assert!(!e.violated);
    }

    #[test]
    fn probe_scaling_family_ratio_bounded() {
        let m = SpectralModel::laplacian(2, 1.0).unwrap();
        for mu in [0.5, 1.0, 2.0, 4.0] {
            let f = Dilated { inner: FieldSpec::Sin { a: vec![1.0, 0.5], phase: 0.3, amp: 1.0 }, mu };
            let rep = interpolation_probe(&f, 0.5, &m, 300, 5).unwrap();
            let e = rep.entry("seminorm_by_gradient").unwrap();
            let ratio = e.rhs / e.lhs;
            assert!(ratio.is_finite() && ratio > 0.5 && ratio < 20.0, "mu {mu}: {ratio}");
        }
    }

    #[test]
    fn operator_norm_of_symmetric() {
        assert!((sym_op_norm(&[2.0, 1.0, 1.0, 2.0]) - 3.0).abs() < 1e-12);
        assert!((sym_op_norm(&[-4.0]) - 4.0).abs() < 1e-15);
    }
}
