//! The Ornstein-Uhlenbeck semigroup `R^eps_t phi(x) = E phi(e^{tA} x + y)`,
//! `y ~ N(0, eps Q_t)`, and its spatial derivatives.
//!
//! Derivatives use Gaussian integration-by-parts weights on the same samples
//! as the value. With `z` the standardized noise and `s_i = sqrt(eps q_i(t))`:
//!
//! - `d_i R phi = e^{-a_i t} / s_i * E[phi z_i]`
//! - `d_ij R phi = e^{-(a_i + a_j) t} / (s_i s_j) * E[phi (z_i z_j - 1{i=j})]`
//! - mixed form `d_ij R phi = e^{-(a_i + a_j) t} / s_j * E[d_i phi z_j]`
//!
//! Pure weights need `phi` bounded only; the mixed form is used for the
//! Q-weighted Hessian trace whenever `phi` has an analytic gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, finite, Error, Result};
use crate::field::Field;
use crate::quadrature::NormalRule;
use crate::spectral::{norm, qt_covariance, sym_op_norm, BallSampler, SpectralModel};
use crate::stats::{loglog_fit, mean_stderr, pairwise_sum};

/// Largest number of modes for which tensor Gauss-Hermite is allowed.
pub const MAX_TENSOR_MODES: usize = 3;

/// Discretization of the Gaussian integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OuQuadrature {
    GaussHermiteTensor { nodes_per_mode: usize },
    MonteCarlo {
        n_samples: usize,
        seed: u64,
        #[serde(default)]
        antithetic: bool,
    },
}

impl OuQuadrature {
    pub fn gauss_hermite(nodes_per_mode: usize) -> Self {
        OuQuadrature::GaussHermiteTensor { nodes_per_mode }
    }

    pub fn monte_carlo(n_samples: usize, seed: u64) -> Self {
        OuQuadrature::MonteCarlo { n_samples, seed, antithetic: true }
    }

    pub fn validate(&self, n_modes: usize) -> Result<()> {
        match self {
            OuQuadrature::GaussHermiteTensor { nodes_per_mode } => {
                ensure(*nodes_per_mode >= 1, || "nodes_per_mode must be >= 1".into())?;
                if n_modes > MAX_TENSOR_MODES {
                    return Err(Error::QuadratureOverflow { modes: n_modes, nodes: *nodes_per_mode });
                }
                Ok(())
            }
            OuQuadrature::MonteCarlo { n_samples, .. } => {
                ensure(*n_samples >= 2, || "monte_carlo needs n_samples >= 2".into())
            }
        }
    }
}

/// Estimate with its Monte-Carlo standard error (zero for deterministic rules).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate<T> {
    pub value: T,
    pub stderr: T,
}

/// Standardized samples `z` with weights; `groups` bundles antithetic pairs.
struct Samples {
    n: usize,
    z: Vec<f64>,
    w: Vec<f64>,
    group: usize,
    deterministic: bool,
}

impl Samples {
    fn build(n: usize, quad: &OuQuadrature) -> Result<Self> {
        quad.validate(n)?;
        match quad {
            OuQuadrature::GaussHermiteTensor { nodes_per_mode } => {
                let rule = NormalRule::new(*nodes_per_mode)?;
                let m = rule.len();
                let total = m.pow(n as u32);
                let mut z = Vec::with_capacity(total * n);
                let mut w = Vec::with_capacity(total);
                for k in 0..total {
                    let mut rem = k;
                    let mut wk = 1.0;
                    for _ in 0..n {
                        let j = rem % m;
                        rem /= m;
                        z.push(rule.nodes[j]);
                        wk *= rule.weights[j];
                    }
                    w.push(wk);
                }
                Ok(Self { n, z, w, group: 1, deterministic: true })
            }
            OuQuadrature::MonteCarlo { n_samples, seed, antithetic } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let (base, group) = if *antithetic { (n_samples.div_ceil(2), 2) } else { (*n_samples, 1) };
                let mut z = Vec::with_capacity(base * group * n);
                for _ in 0..base {
                    let draw: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    z.extend_from_slice(&draw);
                    if *antithetic {
                        z.extend(draw.iter().map(|v| -v));
                    }
                }
                let total = base * group;
                Ok(Self { n, z, w: vec![1.0 / total as f64; total], group, deterministic: false })
            }
        }
    }

    fn len(&self) -> usize {
        self.w.len()
    }

    fn z(&self, k: usize) -> &[f64] {
        &self.z[k * self.n..(k + 1) * self.n]
    }

    /// Weighted mean of a vector-valued integrand with per-component stderr.
    fn expect<F>(&self, dim: usize, mut f: F) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    {
        let mut buf = vec![0.0; dim];
        if self.deterministic {
            let mut acc = vec![0.0; dim];
            for k in 0..self.len() {
                buf.iter_mut().for_each(|v| *v = 0.0);
                f(self.z(k), &mut buf)?;
                for (a, b) in acc.iter_mut().zip(&buf) {
                    *a += self.w[k] * b;
                }
            }
            return Ok((acc, vec![0.0; dim]));
        }
        let n_groups = self.len() / self.group;
        let mut per = vec![vec![0.0; n_groups]; dim];
        for gi in 0..n_groups {
            for j in 0..self.group {
                buf.iter_mut().for_each(|v| *v = 0.0);
                f(self.z(gi * self.group + j), &mut buf)?;
                for d in 0..dim {
                    per[d][gi] += buf[d] / self.group as f64;
                }
            }
        }
        let mut mean = Vec::with_capacity(dim);
        let mut se = Vec::with_capacity(dim);
        for col in &per {
            let (m, s) = mean_stderr(col);
            mean.push(m);
            se.push(s);
        }
        Ok((mean, se))
    }
}

/// `R^eps_t` frozen at one `(t, eps)`; reusable across evaluation points.
pub struct OuKernel {
    n: usize,
    decay: Vec<f64>,
    sd: Vec<f64>,
    samples: Samples,
}

impl OuKernel {
    pub fn new(model: &SpectralModel, t: f64, epsilon: f64, quad: &OuQuadrature) -> Result<Self> {
        let cov = qt_covariance(model, t, epsilon)?;
        let n = model.n_modes();
        let samples = if t == 0.0 || epsilon == 0.0 {
            Samples { n, z: vec![0.0; n], w: vec![1.0], group: 1, deterministic: true }
        } else {
            Samples::build(n, quad)?
        };
        Ok(Self {
            n,
            decay: model.semigroup(t).diag,
            sd: cov.diag.iter().map(|c| c.sqrt()).collect(),
            samples,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n
    }

    /// Per-mode noise standard deviations `sqrt(eps q_i(t))`.
    pub fn sd(&self) -> &[f64] {
        &self.sd
    }

    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    fn smoothing(&self) -> Result<()> {
        ensure(self.sd.iter().all(|s| *s > 0.0), || {
            "derivatives of R^eps_t need t > 0 and eps > 0".into()
        })
    }

    fn point(&self, x: &[f64], z: &[f64], p: &mut [f64]) {
        for i in 0..self.n {
            p[i] = self.decay[i] * x[i] + self.sd[i] * z[i];
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: x.len() });
        }
        Ok(())
    }

    pub fn apply(&self, g: &dyn Field, x: &[f64]) -> Result<Estimate<f64>> {
        self.check(x)?;
        let mut p = vec![0.0; self.n];
        let (m, s) = self.samples.expect(1, |z, out| {
            self.point(x, z, &mut p);
            out[0] = finite(g.value(&p), "terminal field")?;
            Ok(())
        })?;
        Ok(Estimate { value: m[0], stderr: s[0] })
    }

    /// Gradient via pure weights. The value at the mean is subtracted as a
    /// control variate; it does not change the expectation.
    pub fn grad(&self, g: &dyn Field, x: &[f64]) -> Result<Estimate<Vec<f64>>> {
        self.check(x)?;
        self.smoothing()?;
        let mut p = vec![0.0; self.n];
        self.point(x, &vec![0.0; self.n], &mut p);
        let base = g.value(&p);
        let (m, s) = self.samples.expect(self.n, |z, out| {
            self.point(x, z, &mut p);
            let v = finite(g.value(&p), "terminal field")? - base;
            for i in 0..self.n {
                out[i] = v * z[i];
            }
            Ok(())
        })?;
        let scale: Vec<f64> = (0..self.n).map(|i| self.decay[i] / self.sd[i]).collect();
        Ok(Estimate {
            value: m.iter().zip(&scale).map(|(a, c)| a * c).collect(),
            stderr: s.iter().zip(&scale).map(|(a, c)| a * c).collect(),
        })
    }

    /// Row-major Hessian via pure weights.
    pub fn hessian(&self, g: &dyn Field, x: &[f64]) -> Result<Estimate<Vec<f64>>> {
        self.check(x)?;
        self.smoothing()?;
        let n = self.n;
        let mut p = vec![0.0; n];
        self.point(x, &vec![0.0; n], &mut p);
        let base = g.value(&p);
        let (m, s) = self.samples.expect(n * n, |z, out| {
            self.point(x, z, &mut p);
            let v = finite(g.value(&p), "terminal field")? - base;
            for i in 0..n {
                for j in 0..n {
                    let d = if i == j { 1.0 } else { 0.0 };
                    out[i * n + j] = v * (z[i] * z[j] - d);
                }
            }
            Ok(())
        })?;
        let mut value = vec![0.0; n * n];
        let mut stderr = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let c = self.decay[i] * self.decay[j] / (self.sd[i] * self.sd[j]);
                value[i * n + j] = c * m[i * n + j];
                stderr[i * n + j] = c * s[i * n + j];
            }
        }
        Ok(Estimate { value, stderr })
    }

    /// `Tr[Q D^2 R^eps_t g](x)`; mixed weights when `g` has a gradient.
    pub fn hess_qtrace(&self, g: &dyn Field, x: &[f64], gamma: &[f64]) -> Result<Estimate<f64>> {
        self.check(x)?;
        self.smoothing()?;
        let n = self.n;
        let mut p = vec![0.0; n];
        if g.gradient(x).is_some() {
            let (m, s) = self.samples.expect(1, |z, out| {
                self.point(x, z, &mut p);
                let dg = g.gradient(&p).ok_or_else(|| Error::InvalidArgument("gradient vanished".into()))?;
                let mut acc = 0.0;
                for i in 0..n {
                    acc += gamma[i] * self.decay[i] * self.decay[i] / self.sd[i] * dg[i] * z[i];
                }
                out[0] = finite(acc, "Q-trace integrand")?;
                Ok(())
            })?;
            return Ok(Estimate { value: m[0], stderr: s[0] });
        }
        self.point(x, &vec![0.0; n], &mut p);
        let base = g.value(&p);
        let (m, s) = self.samples.expect(1, |z, out| {
            self.point(x, z, &mut p);
            let v = finite(g.value(&p), "terminal field")? - base;
            let mut acc = 0.0;
            for i in 0..n {
                let c = self.decay[i] * self.decay[i] / (self.sd[i] * self.sd[i]);
                acc += gamma[i] * c * (z[i] * z[i] - 1.0);
            }
            out[0] = v * acc;
            Ok(())
        })?;
        Ok(Estimate { value: m[0], stderr: s[0] })
    }
}

/// `R^eps_t g(x)`.
pub fn ou_apply(
    model: &SpectralModel,
    g: &dyn Field,
    x: &[f64],
    t: f64,
    epsilon: f64,
    quad: &OuQuadrature,
) -> Result<Estimate<f64>> {
    OuKernel::new(model, t, epsilon, quad)?.apply(g, x)
}

/// `D R^eps_t g(x)`.
pub fn ou_grad(
    model: &SpectralModel,
    g: &dyn Field,
    x: &[f64],
    t: f64,
    epsilon: f64,
    quad: &OuQuadrature,
) -> Result<Estimate<Vec<f64>>> {
    ensure(t > 0.0 && epsilon > 0.0, || "ou_grad needs t > 0 and eps > 0".into())?;
    OuKernel::new(model, t, epsilon, quad)?.grad(g, x)
}

/// `D^2 R^eps_t g(x)`, row-major.
pub fn ou_hessian(
    model: &SpectralModel,
    g: &dyn Field,
    x: &[f64],
    t: f64,
    epsilon: f64,
    quad: &OuQuadrature,
) -> Result<Estimate<Vec<f64>>> {
    ensure(t > 0.0 && epsilon > 0.0, || "ou_hessian needs t > 0 and eps > 0".into())?;
    OuKernel::new(model, t, epsilon, quad)?.hessian(g, x)
}

/// `Tr[Q D^2 R^eps_t g](x)`.
pub fn ou_hess_qtrace(
    model: &SpectralModel,
    g: &dyn Field,
    x: &[f64],
    t: f64,
    epsilon: f64,
    quad: &OuQuadrature,
) -> Result<Estimate<f64>> {
    ensure(t > 0.0 && epsilon > 0.0, || "ou_hess_qtrace needs t > 0 and eps > 0".into())?;
    OuKernel::new(model, t, epsilon, quad)?.hess_qtrace(g, x, model.gamma())
}

/// Measured `||D^n R^eps_t g||_0` over a set of times for one order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderScan {
    pub order: usize,
    pub norms: Vec<f64>,
    /// Least-squares slope of `log ||D^n R_t g||_0` against `log t`.
    pub exponent: f64,
    /// `c` in the fit `c t^exponent`.
    pub constant: f64,
    /// `-exponent <= order / 2 + 0.1`.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingReport {
    pub t_grid: Vec<f64>,
    pub epsilon: f64,
    pub n_probe_points: usize,
    pub orders: Vec<OrderScan>,
}

impl SmoothingReport {
    pub fn order(&self, n: usize) -> Option<&OrderScan> {
        self.orders.iter().find(|o| o.order == n)
    }
}

/// Probe points for derivative suprema: center, axis offsets log-spaced
/// from `1e-4 R` to `R`, and ball samples.
pub fn derivative_probe_points(model: &SpectralModel, extra: usize, seed: u64) -> Vec<Vec<f64>> {
    let ball = BallSampler::for_model(model);
    let n = model.n_modes();
    let mut pts = vec![vec![0.0; n]];
    for i in 0..n {
        for k in 0..=8 {
            let off = ball.radius * 10f64.powf(-(k as f64) / 2.0);
            for s in [1.0, -1.0] {
                let mut p = vec![0.0; n];
                p[i] = s * off;
                pts.push(p);
            }
        }
    }
    pts.extend(ball.probe_points(extra, seed).into_iter().skip(1));
    pts
}

/// Fits the small-time blow-up rate of `||D^n R^eps_t g||_0` for `n` in `orders`.
pub fn smoothing_scan(
    model: &SpectralModel,
    g: &dyn Field,
    orders: &[usize],
    t_grid: &[f64],
    epsilon: f64,
    quad: &OuQuadrature,
) -> Result<SmoothingReport> {
    ensure(t_grid.len() >= 4, || format!("exponent fit needs >= 4 times, got {}", t_grid.len()))?;
    ensure(t_grid.iter().all(|t| *t > 0.0 && *t <= 1.0), || "t_grid must lie in (0, 1]".into())?;
    ensure(epsilon > 0.0, || "smoothing scan needs eps > 0".into())?;
    ensure(orders.iter().all(|n| (1..=2).contains(n)), || "orders must be 1 or 2".into())?;
    let pts = derivative_probe_points(model, 24, 0x5EED);
    let mut scans = Vec::new();
    for &order in orders {
        let mut norms = Vec::with_capacity(t_grid.len());
        for &t in t_grid {
            let kernel = OuKernel::new(model, t, epsilon, quad)?;
            let mut sup: f64 = 0.0;
            for p in &pts {
                let v = if order == 1 {
                    norm(&kernel.grad(g, p)?.value)
                } else {
                    sym_op_norm(&kernel.hessian(g, p)?.value)
                };
                sup = sup.max(v);
            }
            norms.push(sup);
        }
        let (lc, slope) = loglog_fit(t_grid, &norms)?;
        scans.push(OrderScan {
            order,
            norms,
            exponent: slope,
            constant: lc.exp(),
            pass: -slope <= order as f64 / 2.0 + 0.1,
        });
    }
    Ok(SmoothingReport { t_grid: t_grid.to_vec(), epsilon, n_probe_points: pts.len(), orders: scans })
}

/// `R^eps_{t1} (R^eps_{t2} g)` evaluated by nesting the quadrature.
pub fn ou_apply_nested(
    model: &SpectralModel,
    g: &dyn Field,
    x: &[f64],
    t1: f64,
    t2: f64,
    epsilon: f64,
    quad: &OuQuadrature,
) -> Result<f64> {
    let inner = OuKernel::new(model, t2, epsilon, quad)?;
    let outer = OuKernel::new(model, t1, epsilon, quad)?;
    outer.check(x)?;
    let mut p = vec![0.0; model.n_modes()];
    let mut vals = Vec::with_capacity(outer.samples.len());
    for k in 0..outer.samples.len() {
        outer.point(x, outer.samples.z(k), &mut p);
        vals.push(outer.samples.w[k] * inner.apply(g, &p)?.value);
    }
    Ok(pairwise_sum(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldSpec;
    use approx::assert_relative_eq;

    fn unit() -> SpectralModel {
        SpectralModel::new(vec![1.0], vec![1.0], 1.0).unwrap()
    }

    fn gh() -> OuQuadrature {
        OuQuadrature::gauss_hermite(20)
    }

    #[test]
    fn constant_is_preserved() {
        let g = FieldSpec::Constant { c: 7.0 };
        let m = SpectralModel::laplacian(2, 1.0).unwrap();
        for quad in [gh(), OuQuadrature::monte_carlo(100, 1)] {
            let v = ou_apply(&m, &g, &[0.3, -0.1], 0.4, 0.2, &quad).unwrap();
            assert_relative_eq!(v.value, 7.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn second_moment_closed_form() {
        let g = FieldSpec::Quadratic { c: vec![1.0] };
        let v = ou_apply(&unit(), &g, &[1.0], 2f64.ln(), 0.1, &gh()).unwrap();
        assert_relative_eq!(v.value, 0.2875, epsilon = 1e-12);
        // Independent oracle: trapezoid over the Gaussian density.
        let (m, s2): (f64, f64) = (0.5, 0.1 * 0.375);
        let h = 1e-4;
        let mut acc = 0.0;
        let mut y = m - 10.0 * s2.sqrt();
        while y <= m + 10.0 * s2.sqrt() {
            acc += y * y * (-(y - m).powi(2) / (2.0 * s2)).exp() * h;
            y += h;
        }
        acc /= (2.0 * std::f64::consts::PI * s2).sqrt();
        assert!((acc - 0.2875).abs() < 1e-6);
    }

    #[test]
    fn zero_time_is_identity() {
        let g = FieldSpec::Sign { mode: 0 };
        assert_eq!(ou_apply(&unit(), &g, &[0.2], 0.0, 0.5, &gh()).unwrap().value, 1.0);
    }

    #[test]
    fn linear_field() {
        let m = SpectralModel::laplacian(2, 1.0).unwrap();
        let a = vec![1.0, -2.0];
        let g = FieldSpec::Linear { a: a.clone() };
        let x = [0.4, 0.3];
        let t = 0.3;
        let v = ou_apply(&m, &g, &x, t, 0.5, &gh()).unwrap().value;
        let exact = a[0] * (-t).exp() * x[0] + a[1] * (-4.0 * t).exp() * x[1];
        assert_relative_eq!(v, exact, epsilon = 1e-12);
        let d = ou_grad(&m, &g, &x, t, 0.5, &gh()).unwrap().value;
        assert_relative_eq!(d[0], (-t).exp(), epsilon = 1e-12);
        assert_relative_eq!(d[1], -2.0 * (-4.0 * t).exp(), epsilon = 1e-12);
        let q = ou_hess_qtrace(&m, &g, &x, t, 0.5, &gh()).unwrap().value;
        assert!(q.abs() < 1e-12);
    }

    #[test]
    fn gradient_of_square() {
        let g = FieldSpec::Quadratic { c: vec![1.0] };
        let d = ou_grad(&unit(), &g, &[1.0], 2f64.ln(), 0.1, &gh()).unwrap().value;
        assert_relative_eq!(d[0], 0.5, epsilon = 1e-10);
        let h = 1e-4;
        let f = |x: f64| ou_apply(&unit(), &g, &[x], 2f64.ln(), 0.1, &gh()).unwrap().value;
        assert_relative_eq!((f(1.0 + h) - f(1.0 - h)) / (2.0 * h), 0.5, epsilon = 1e-8);
    }

    #[test]
    fn qtrace_of_square() {
        let g = FieldSpec::Quadratic { c: vec![1.0] };
        let q = ou_hess_qtrace(&unit(), &g, &[0.7], 2f64.ln(), 1.0, &gh()).unwrap().value;
        assert_relative_eq!(q, 0.5, epsilon = 1e-10);
        let pure = OuKernel::new(&unit(), 2f64.ln(), 1.0, &gh()).unwrap();
        let hp = pure.hessian(&g, &[0.7]).unwrap().value[0];
        assert_relative_eq!(hp, 0.5, epsilon = 1e-10);
        // Finite-difference Hessian of R_t g.
        let f = |x: f64| ou_apply(&unit(), &g, &[x], 2f64.ln(), 1.0, &gh()).unwrap().value;
        let h = 1e-3;
        assert_relative_eq!((f(0.7 + h) - 2.0 * f(0.7) + f(0.7 - h)) / (h * h), 0.5, epsilon = 1e-5);
    }

    #[test]
    fn rejects_no_smoothing() {
        let g = FieldSpec::Constant { c: 1.0 };
        assert!(ou_grad(&unit(), &g, &[0.0], 0.0, 1.0, &gh()).is_err());
        assert!(ou_grad(&unit(), &g, &[0.0], 1.0, 0.0, &gh()).is_err());
    }

    #[test]
    fn tensor_guard() {
        let m = SpectralModel::laplacian(4, 1.0).unwrap();
        let g = FieldSpec::Constant { c: 1.0 };
        let r = ou_apply(&m, &g, &[0.0; 4], 0.1, 0.1, &gh());
        assert!(matches!(r, Err(Error::QuadratureOverflow { modes: 4, .. })));
    }

    #[test]
    fn monte_carlo_stderr_covers_truth() {
        let g = FieldSpec::Quadratic { c: vec![1.0] };
        let quad = OuQuadrature::MonteCarlo { n_samples: 20_000, seed: 3, antithetic: false };
        let v = ou_apply(&unit(), &g, &[1.0], 2f64.ln(), 0.1, &quad).unwrap();
        assert!(v.stderr > 0.0);
        assert!((v.value - 0.2875).abs() <= 4.0 * v.stderr);
    }
}
