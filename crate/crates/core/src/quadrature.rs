//! One-dimensional quadrature rules and time grids.

use std::num::NonZeroUsize;

use gauss_quad::{GaussHermite, GaussLegendre};

use crate::error::{ensure, Result};

/// Gauss-Hermite rule for a standard normal variable: `E f(Z) ~ sum w_k f(z_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn new(n: usize) -> Result<Self> {
        ensure(n >= 1, || "quadrature needs at least one node".into())?;
        if n == 1 {
            return Ok(Self { nodes: vec![0.0], weights: vec![1.0] });
        }
        let rule = GaussHermite::new(NonZeroUsize::new(n).expect("n >= 2"));
        let norm = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> =
            rule.iter().map(|(x, w)| (x * std::f64::consts::SQRT_2, w / norm)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Gauss-Legendre nodes and weights on `[a, b]`.
pub fn legendre(n: usize, a: f64, b: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure(n >= 1, || "quadrature needs at least one node".into())?;
    if n == 1 {
        return Ok((vec![0.5 * (a + b)], vec![b - a]));
    }
    let rule = GaussLegendre::new(NonZeroUsize::new(n).expect("n >= 2"));
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    let mut pairs: Vec<(f64, f64)> = rule.iter().map(|(x, w)| (c + h * x, h * w)).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    Ok((pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect()))
}

/// `t_k = T (k / M)^p`, `k = 0..=M`; clusters points near zero for `p > 1`.
pub fn graded_grid(horizon: f64, slices: usize, grading: f64) -> Result<Vec<f64>> {
    ensure(horizon > 0.0 && horizon.is_finite(), || format!("horizon must be positive, got {horizon}"))?;
    ensure(slices >= 1, || "at least one time slice is required".into())?;
    ensure(grading >= 1.0, || format!("grading must be >= 1, got {grading}"))?;
    let mut g: Vec<f64> =
        (0..=slices).map(|k| horizon * (k as f64 / slices as f64).powf(grading)).collect();
    g[slices] = horizon;
    Ok(g)
}

/// Uniform grid with `n` steps on `[0, t]`.
pub fn uniform_grid(t: f64, n: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=n).map(|k| t * k as f64 / n as f64).collect();
    if let Some(last) = g.last_mut() {
        *last = t;
    }
    g
}

/// Weights `(w0, w1)` with `int_0^dt e^{-alpha (dt - r)} l(r) dr = w0 l(0) + w1 l(dt)`
/// for every linear `l`.
pub fn linear_conv_weights(alpha: f64, dt: f64) -> (f64, f64) {
    let z = alpha * dt;
    let phi1 = if z < 1e-4 { 1.0 - z / 2.0 + z * z / 6.0 } else { -(-z).exp_m1() / z };
    let right = if z < 1e-4 { 0.5 - z / 6.0 + z * z / 24.0 } else { (1.0 - phi1) / z };
    (dt * (phi1 - right), dt * right)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_rule_moments() {
        let r = NormalRule::new(8).unwrap();
        let m = |p: i32| r.nodes.iter().zip(&r.weights).map(|(z, w)| w * z.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = legendre(4, 0.0, 2.0).unwrap();
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(7)).sum();
        assert!((s - 2f64.powi(8) / 8.0).abs() < 1e-10);
    }

    #[test]
    fn graded_grid_endpoints() {
        let g = graded_grid(2.0, 4, 2.0).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[4], 2.0);
        assert!((g[1] - 2.0 / 16.0).abs() < 1e-15);
        assert!(graded_grid(1.0, 0, 1.0).is_err());
    }

    #[test]
    fn conv_weights_integrate_linears() {
        for (a, dt) in [(1.0, 0.1), (9.0, 0.05), (0.5, 1e-6)] {
            let (w0, w1) = linear_conv_weights(a, dt);
            // l = 1 and l(r) = r
            let one = -(-a * dt).exp_m1() / a;
            let ramp = dt / a - one / a;
            assert!((w0 + w1 - one).abs() < 1e-12 * (1.0 + one));
            assert!((w1 * dt - ramp).abs() < 1e-9 * dt * dt);
        }
    }
}
