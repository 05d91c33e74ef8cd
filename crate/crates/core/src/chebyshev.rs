//! Tensor Chebyshev-Lobatto interpolants on the box `[-L, L]^n`.
//!
//! A [`ScalarField`] stores both node values and Chebyshev coefficients, so
//! values, gradients and Hessians are exact derivatives of one polynomial.
//! Linear maps that act modewise (such as the OU semigroup on polynomials) are
//! applied as one small matrix per mode.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::field::Field;

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub m: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(m: usize) -> Self {
        Self { m, data: vec![0.0; m * m] }
    }

    pub fn identity(m: usize) -> Self {
        let mut a = Self::zeros(m);
        for i in 0..m {
            a.data[i * m + i] = 1.0;
        }
        a
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn mul(&self, other: &Mat) -> Mat {
        let m = self.m;
        let mut out = Mat::zeros(m);
        for i in 0..m {
            for k in 0..m {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..m {
                    out.data[i * m + j] += a * other.get(k, j);
                }
            }
        }
        out
    }
}

/// Applies `mats[d]` along axis `d` of an `m^n` tensor (axis 0 slowest).
pub fn tensor_apply(mats: &[&Mat], data: &[f64], m: usize) -> Vec<f64> {
    let n = mats.len();
    let mut cur = data.to_vec();
    let mut next = vec![0.0; cur.len()];
    for (d, mat) in mats.iter().enumerate() {
        let inner = m.pow((n - 1 - d) as u32);
        let outer = m.pow(d as u32);
        for o in 0..outer {
            for r in 0..inner {
                let base = o * m * inner + r;
                for i in 0..m {
                    let mut acc = 0.0;
                    for k in 0..m {
                        acc += mat.get(i, k) * cur[base + k * inner];
                    }
                    next[base + i * inner] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// `T_k(y)`, `T_k'(y)`, `T_k''(y)` for `k = 0..m`.
pub fn cheb_with_derivs(y: f64, m: usize, t: &mut [f64], d1: &mut [f64], d2: &mut [f64]) {
    t[0] = 1.0;
    d1[0] = 0.0;
    d2[0] = 0.0;
    if m == 1 {
        return;
    }
    t[1] = y;
    d1[1] = 1.0;
    d2[1] = 0.0;
    for k in 1..m - 1 {
        t[k + 1] = 2.0 * y * t[k] - t[k - 1];
        d1[k + 1] = 2.0 * t[k] + 2.0 * y * d1[k] - d1[k - 1];
        d2[k + 1] = 4.0 * d1[k] + 2.0 * y * d2[k] - d2[k - 1];
    }
}

/// `T_k(y)` for `k = 0..m`.
pub fn cheb_values(y: f64, m: usize, t: &mut [f64]) {
    t[0] = 1.0;
    if m == 1 {
        return;
    }
    t[1] = y;
    for k in 1..m - 1 {
        t[k + 1] = 2.0 * y * t[k] - t[k - 1];
    }
}

/// Lobatto nodes `cos(pi j / deg)` on `[-1, 1]`, `j = 0..=deg` (descending).
pub fn lobatto_nodes(deg: usize) -> Vec<f64> {
    if deg == 0 {
        return vec![0.0];
    }
    (0..=deg).map(|j| (std::f64::consts::PI * j as f64 / deg as f64).cos()).collect()
}

/// Node values to Chebyshev coefficients for one axis.
pub fn values_to_coeffs(deg: usize) -> Mat {
    let m = deg + 1;
    if deg == 0 {
        return Mat::identity(1);
    }
    let mut a = Mat::zeros(m);
    for k in 0..m {
        for j in 0..m {
            let mut w = 2.0 / deg as f64 * (std::f64::consts::PI * (j * k) as f64 / deg as f64).cos();
            if j == 0 || j == deg {
                w *= 0.5;
            }
            if k == 0 || k == deg {
                w *= 0.5;
            }
            a.data[k * m + j] = w;
        }
    }
    a
}

/// Tensor Chebyshev interpolant on `[-half_width, half_width]^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    n: usize,
    deg: usize,
    half_width: f64,
    values: Vec<f64>,
    #[serde(skip)]
    coeffs: Vec<f64>,
}

impl ScalarField {
    fn check_shape(n: usize, deg: usize, half_width: f64) -> Result<()> {
        ensure((1..=3).contains(&n), || format!("tensor interpolants support 1..=3 modes, got {n}"))?;
        ensure(deg >= 2, || format!("interpolation degree must be >= 2, got {deg}"))?;
        ensure(half_width > 0.0 && half_width.is_finite(), || "half_width must be positive".into())
    }

    pub fn from_node_values(n: usize, deg: usize, half_width: f64, values: Vec<f64>) -> Result<Self> {
        Self::check_shape(n, deg, half_width)?;
        let m = deg + 1;
        if values.len() != m.pow(n as u32) {
            return Err(Error::DimensionMismatch { expected: m.pow(n as u32), got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("interpolant node values".into()));
        }
        let c = values_to_coeffs(deg);
        let mats: Vec<&Mat> = (0..n).map(|_| &c).collect();
        let coeffs = tensor_apply(&mats, &values, m);
        Ok(Self { n, deg, half_width, values, coeffs })
    }

    /// Samples `f` at the tensor nodes.
    pub fn from_fn(n: usize, deg: usize, half_width: f64, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        Self::check_shape(n, deg, half_width)?;
        let pts = node_points(n, deg, half_width);
        let values = pts.iter().map(|p| f(p)).collect();
        Self::from_node_values(n, deg, half_width, values)
    }

    pub fn zeros(n: usize, deg: usize, half_width: f64) -> Result<Self> {
        Self::from_node_values(n, deg, half_width, vec![0.0; (deg + 1).pow(n as u32)])
    }

    /// Rebuilds coefficients after deserialization.
    pub fn refresh(mut self) -> Result<Self> {
        let v = std::mem::take(&mut self.values);
        Self::from_node_values(self.n, self.deg, self.half_width, v)
    }

    pub fn n_modes(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> usize {
        self.deg
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// 1-D node coordinates (scaled to the box).
    pub fn grid_nodes(&self) -> Vec<f64> {
        lobatto_nodes(self.deg).into_iter().map(|y| y * self.half_width).collect()
    }

    pub fn node_points(&self) -> Vec<Vec<f64>> {
        node_points(self.n, self.deg, self.half_width)
    }

    /// Sum of `|c_K|` over multi-indices touching the two highest degrees;
    /// a proxy for the interpolation error.
    pub fn tail_estimate(&self) -> f64 {
        let m = self.deg + 1;
        let mut acc = 0.0;
        for (flat, c) in self.coeffs.iter().enumerate() {
            let mut rem = flat;
            let mut top = false;
            for _ in 0..self.n {
                if rem % m + 2 > self.deg {
                    top = true;
                }
                rem /= m;
            }
            if top {
                acc += c.abs();
            }
        }
        acc
    }

    /// Maximum node-value difference.
    pub fn max_node_diff(&self, other: &ScalarField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn scaled(&self, x: &[f64], clamp: bool) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: x.len() });
        }
        let mut y = Vec::with_capacity(self.n);
        for (i, v) in x.iter().enumerate() {
            let s = v / self.half_width;
            if !s.is_finite() {
                return Err(Error::NonFinite("interpolation point".into()));
            }
            if s.abs() > 1.0 + 1e-12 && !clamp {
                return Err(Error::Extrapolation { mode: i, value: v.abs(), half_width: self.half_width });
            }
            y.push(s.clamp(-1.0, 1.0));
        }
        Ok(y)
    }

    /// Value, gradient and row-major Hessian at `x`; coordinates outside the
    /// box are an error.
    pub fn eval_all(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let y = self.scaled(x, false)?;
        Ok(self.eval_scaled(&y, 2))
    }

    /// Value with coordinates clamped into the box.
    pub fn eval_clamped(&self, x: &[f64]) -> f64 {
        match self.scaled(x, true) {
            Ok(y) => self.value_scaled(&y),
            Err(_) => f64::NAN,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let y = self.scaled(x, false)?;
        Ok(self.value_scaled(&y))
    }

    /// Value only, contracting one axis at a time from the fastest.
    fn value_scaled(&self, y: &[f64]) -> f64 {
        let m = self.deg + 1;
        let mut t = vec![0.0; m];
        cheb_values(y[self.n - 1], m, &mut t);
        let mut partial: Vec<f64> = self.coeffs.chunks_exact(m).map(|row| row.iter().zip(&t).map(|(c, b)| c * b).sum()).collect();
        for d in (0..self.n - 1).rev() {
            cheb_values(y[d], m, &mut t);
            partial = partial.chunks_exact(m).map(|row| row.iter().zip(&t).map(|(c, b)| c * b).sum()).collect();
        }
        partial[0]
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.scaled(x, false)?;
        Ok(self.eval_scaled(&y, 1).1)
    }

    pub fn hess(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_all(x)?.2)
    }

    /// `order` 0: value only; 1: plus gradient; 2: plus Hessian.
    fn eval_scaled(&self, y: &[f64], order: usize) -> (f64, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let m = self.deg + 1;
        let mut t = vec![vec![0.0; m]; n];
        let mut d1 = vec![vec![0.0; m]; n];
        let mut d2 = vec![vec![0.0; m]; n];
        for d in 0..n {
            if order == 0 {
                cheb_values(y[d], m, &mut t[d]);
            } else {
                cheb_with_derivs(y[d], m, &mut t[d], &mut d1[d], &mut d2[d]);
            }
        }
        let inv = 1.0 / self.half_width;
        // Contract the last axis first; each partial carries the derivative
        // orders of the already-contracted axes.
        match n {
            1 => {
                let (mut v, mut g, mut h) = (0.0, 0.0, 0.0);
                for k in 0..m {
                    let c = self.coeffs[k];
                    v += c * t[0][k];
                    if order >= 1 {
                        g += c * d1[0][k];
                        h += c * d2[0][k];
                    }
                }
                let grad = if order >= 1 { vec![g * inv] } else { Vec::new() };
                let hess = if order >= 2 { vec![h * inv * inv] } else { Vec::new() };
                (v, grad, hess)
            }
            _ => {
                let total = self.coeffs.len();
                let mut v = 0.0;
                let mut grad = vec![0.0; if order >= 1 { n } else { 0 }];
                let mut hess = vec![0.0; if order >= 2 { n * n } else { 0 }];
                let mut idx = vec![0usize; n];
                for flat in 0..total {
                    let c = self.coeffs[flat];
                    let mut rem = flat;
                    for d in (0..n).rev() {
                        idx[d] = rem % m;
                        rem /= m;
                    }
                    if c == 0.0 {
                        continue;
                    }
                    let mut p0 = c;
                    for d in 0..n {
                        p0 *= t[d][idx[d]];
                    }
                    v += p0;
                    if order >= 1 {
                        for i in 0..n {
                            let mut p = c * d1[i][idx[i]];
                            for d in 0..n {
                                if d != i {
                                    p *= t[d][idx[d]];
                                }
                            }
                            grad[i] += p;
                            if order >= 2 {
                                for j in i..n {
                                    let mut q = c;
                                    for d in 0..n {
                                        let e = usize::from(d == i) + usize::from(d == j);
                                        q *= match e {
                                            0 => t[d][idx[d]],
                                            1 => d1[d][idx[d]],
                                            _ => d2[d][idx[d]],
                                        };
                                    }
                                    hess[i * n + j] += q;
                                }
                            }
                        }
                    }
                }
                for g in grad.iter_mut() {
                    *g *= inv;
                }
                if order >= 2 {
                    for i in 0..n {
                        for j in i..n {
                            let h = hess[i * n + j] * inv * inv;
                            hess[i * n + j] = h;
                            hess[j * n + i] = h;
                        }
                    }
                }
                (v, grad, hess)
            }
        }
    }
}

impl Field for ScalarField {
    fn value(&self, x: &[f64]) -> f64 {
        self.eval_clamped(x)
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let y = self.scaled(x, true).ok()?;
        Some(self.eval_scaled(&y, 1).1)
    }

    fn hessian(&self, x: &[f64]) -> Option<Vec<f64>> {
        let y = self.scaled(x, true).ok()?;
        Some(self.eval_scaled(&y, 2).2)
    }
}

/// Tensor node coordinates, axis 0 slowest.
pub fn node_points(n: usize, deg: usize, half_width: f64) -> Vec<Vec<f64>> {
    let nodes: Vec<f64> = lobatto_nodes(deg).into_iter().map(|y| y * half_width).collect();
    let m = deg + 1;
    let total = m.pow(n as u32);
    (0..total)
        .map(|flat| {
            let mut p = vec![0.0; n];
            let mut rem = flat;
            for d in (0..n).rev() {
                p[d] = nodes[rem % m];
                rem /= m;
            }
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldSpec;
    use proptest::prelude::*;

    #[test]
    fn reproduces_polynomials() {
        let f = ScalarField::from_fn(2, 6, 2.0, |x| x[0].powi(3) - 2.0 * x[0] * x[1] + 0.5).unwrap();
        let x = [0.7, -1.3];
        let (v, g, h) = f.eval_all(&x).unwrap();
        assert!((v - (0.343 + 1.82 + 0.5)).abs() < 1e-12);
        assert!((g[0] - (3.0 * 0.49 + 2.6)).abs() < 1e-11);
        assert!((g[1] - (-1.4)).abs() < 1e-11);
        assert!((h[0] - 4.2).abs() < 1e-10);
        assert!((h[1] + 2.0).abs() < 1e-10);
        assert!(h[3].abs() < 1e-10);
        assert!(f.tail_estimate() < 1e-12);
    }

    #[test]
    fn interpolates_nodes_exactly() {
        let g = FieldSpec::Tanh { a: vec![1.5, -0.5, 0.2] };
        let f = ScalarField::from_fn(3, 8, 1.5, |x| g.value(x)).unwrap();
        for p in f.node_points() {
            assert!((f.eval(&p).unwrap() - g.value(&p)).abs() < 1e-12);
        }
    }

    #[test]
    fn extrapolation_is_error_and_clamp_is_not() {
        let f = ScalarField::from_fn(1, 4, 1.0, |x| x[0]).unwrap();
        assert!(matches!(f.eval(&[1.5]), Err(Error::Extrapolation { mode: 0, .. })));
        assert!((f.eval_clamped(&[1.5]) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn tensor_apply_identity() {
        let id = Mat::identity(3);
        let data: Vec<f64> = (0..27).map(|k| k as f64).collect();
        assert_eq!(tensor_apply(&[&id, &id, &id], &data, 3), data);
    }

    #[test]
    fn serde_roundtrip() {
        let f = ScalarField::from_fn(2, 5, 1.0, |x| (x[0] + x[1]).sin()).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        let back: ScalarField = serde_json::from_str::<ScalarField>(&s).unwrap().refresh().unwrap();
        assert_eq!(back, f);
    }

    proptest! {
        #[test]
        fn derivatives_consistent(x0 in -0.8f64..0.8, x1 in -0.8f64..0.8) {
            let g = FieldSpec::Bump { center: vec![0.2, -0.1], width: 0.7, amp: 1.0 };
            let f = ScalarField::from_fn(2, 24, 1.0, |x| g.value(x)).unwrap();
            let x = [x0, x1];
            let (_, gr, h) = f.eval_all(&x).unwrap();
            let step = 1e-5;
            for i in 0..2 {
                let mut xp = x; let mut xm = x;
                xp[i] += step; xm[i] -= step;
                let fd = (f.eval(&xp).unwrap() - f.eval(&xm).unwrap()) / (2.0 * step);
                prop_assert!((fd - gr[i]).abs() <= 1e-6 * (1.0 + gr[i].abs()));
                let gp = f.grad(&xp).unwrap();
                let gm = f.grad(&xm).unwrap();
                for j in 0..2 {
                    let fd = (gp[j] - gm[j]) / (2.0 * step);
                    prop_assert!((fd - h[j * 2 + i]).abs() <= 1e-5 * (1.0 + h[j * 2 + i].abs()));
                }
            }
            prop_assert!((h[1] - h[2]).abs() <= 1e-10);
        }
    }
}
