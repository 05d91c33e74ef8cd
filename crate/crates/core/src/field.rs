//! Scalar test functions on `H_N` with optional analytic derivatives.

use serde::{Deserialize, Serialize};

/// A real-valued function on `H_N`.
///
/// Hessians are returned row-major as `n * n` entries.
pub trait Field: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn hessian(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

impl<T: Field + ?Sized> Field for &T {
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &[f64]) -> Option<Vec<f64>> {
        (**self).hessian(x)
    }
}

impl<T: Field + ?Sized> Field for Box<T> {
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &[f64]) -> Option<Vec<f64>> {
        (**self).hessian(x)
    }
}

/// Value-only field backed by a closure.
pub struct FnField<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Field for FnField<F> {
    fn value(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

fn dot(a: &[f64], x: &[f64]) -> f64 {
    a.iter().zip(x).map(|(a, x)| a * x).sum()
}

fn outer(a: &[f64], scale: f64) -> Vec<f64> {
    let n = a.len();
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] = scale * a[i] * a[j];
        }
    }
    h
}

/// Catalog of closed-form fields used for terminal data and probes.
///
/// Vectors shorter than the state are padded with zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSpec {
    /// `c`
    Constant { c: f64 },
    /// `<a, x>`
    Linear { a: Vec<f64> },
    /// `sum c_i x_i^2`
    Quadratic { c: Vec<f64> },
    /// `tanh(<a, x>)`
    Tanh { a: Vec<f64> },
    /// `amp * sin(<a, x> + phase)`
    Sin { a: Vec<f64>, phase: f64, amp: f64 },
    /// `amp * exp(-|x - center|^2 / width^2)`
    Bump { center: Vec<f64>, width: f64, amp: f64 },
    /// `sign(x_mode)`, bounded and discontinuous.
    Sign { mode: usize },
}

impl FieldSpec {
    pub fn tanh_first(n: usize) -> Self {
        let mut a = vec![0.0; n];
        a[0] = 1.0;
        FieldSpec::Tanh { a }
    }

    /// `||.||_0` on all of `H` when finite.
    pub fn global_sup(&self) -> Option<f64> {
        match self {
            FieldSpec::Constant { c } => Some(c.abs()),
            FieldSpec::Tanh { a } if a.iter().any(|v| *v != 0.0) => Some(1.0),
            FieldSpec::Tanh { .. } => Some(0.0),
            FieldSpec::Sin { amp, .. } => Some(amp.abs()),
            FieldSpec::Bump { amp, .. } => Some(amp.abs()),
            FieldSpec::Sign { .. } => Some(1.0),
            FieldSpec::Linear { .. } | FieldSpec::Quadratic { .. } => None,
        }
    }

    /// True when the field has a bounded Lipschitz derivative.
    pub fn is_smooth(&self) -> bool {
        !matches!(self, FieldSpec::Sign { .. })
    }

    /// Odd under `x -> -x`.
    pub fn is_odd(&self) -> bool {
        match self {
            FieldSpec::Linear { .. } | FieldSpec::Tanh { .. } | FieldSpec::Sign { .. } => true,
            FieldSpec::Sin { phase, .. } => *phase == 0.0,
            FieldSpec::Constant { c } => *c == 0.0,
            _ => false,
        }
    }

    fn padded(v: &[f64], n: usize) -> Vec<f64> {
        (0..n).map(|i| v.get(i).copied().unwrap_or(0.0)).collect()
    }
}

impl Field for FieldSpec {
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            FieldSpec::Constant { c } => *c,
            FieldSpec::Linear { a } => dot(a, x),
            FieldSpec::Quadratic { c } => c.iter().zip(x).map(|(c, x)| c * x * x).sum(),
            FieldSpec::Tanh { a } => dot(a, x).tanh(),
            FieldSpec::Sin { a, phase, amp } => amp * (dot(a, x) + phase).sin(),
            FieldSpec::Bump { center, width, amp } => {
                let r2: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v - center.get(i).copied().unwrap_or(0.0)).powi(2))
                    .sum();
                amp * (-r2 / (width * width)).exp()
            }
            FieldSpec::Sign { mode } => {
                let v = x.get(*mode).copied().unwrap_or(0.0);
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let n = x.len();
        Some(match self {
            FieldSpec::Constant { .. } => vec![0.0; n],
            FieldSpec::Linear { a } => Self::padded(a, n),
            FieldSpec::Quadratic { c } => {
                let c = Self::padded(c, n);
                x.iter().zip(&c).map(|(x, c)| 2.0 * c * x).collect()
            }
            FieldSpec::Tanh { a } => {
                let a = Self::padded(a, n);
                let s = 1.0 - dot(&a, x).tanh().powi(2);
                a.iter().map(|v| v * s).collect()
            }
            FieldSpec::Sin { a, phase, amp } => {
                let a = Self::padded(a, n);
                let c = amp * (dot(&a, x) + phase).cos();
                a.iter().map(|v| v * c).collect()
            }
            FieldSpec::Bump { center, width, .. } => {
                let f = self.value(x);
                let c = Self::padded(center, n);
                let w2 = width * width;
                x.iter().zip(&c).map(|(x, c)| -2.0 * (x - c) / w2 * f).collect()
            }
            FieldSpec::Sign { .. } => return None,
        })
    }

    fn hessian(&self, x: &[f64]) -> Option<Vec<f64>> {
        let n = x.len();
        Some(match self {
            FieldSpec::Constant { .. } | FieldSpec::Linear { .. } => vec![0.0; n * n],
            FieldSpec::Quadratic { c } => {
                let c = Self::padded(c, n);
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    h[i * n + i] = 2.0 * c[i];
                }
                h
            }
            FieldSpec::Tanh { a } => {
                let a = Self::padded(a, n);
                let th = dot(&a, x).tanh();
                outer(&a, -2.0 * th * (1.0 - th * th))
            }
            FieldSpec::Sin { a, phase, amp } => {
                let a = Self::padded(a, n);
                outer(&a, -amp * (dot(&a, x) + phase).sin())
            }
            FieldSpec::Bump { center, width, .. } => {
                let f = self.value(x);
                let c = Self::padded(center, n);
                let w2 = width * width;
                let d: Vec<f64> = x.iter().zip(&c).map(|(x, c)| x - c).collect();
                let mut h = outer(&d, 4.0 * f / (w2 * w2));
                for i in 0..n {
                    h[i * n + i] -= 2.0 * f / w2;
                }
                h
            }
            FieldSpec::Sign { .. } => return None,
        })
    }
}

/// `phi(mu x)` with chain-rule derivatives.
pub struct Dilated<F> {
    pub inner: F,
    pub mu: f64,
}

impl<F: Field> Field for Dilated<F> {
    fn value(&self, x: &[f64]) -> f64 {
        let y: Vec<f64> = x.iter().map(|v| v * self.mu).collect();
        self.inner.value(&y)
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let y: Vec<f64> = x.iter().map(|v| v * self.mu).collect();
        Some(self.inner.gradient(&y)?.into_iter().map(|g| g * self.mu).collect())
    }
    fn hessian(&self, x: &[f64]) -> Option<Vec<f64>> {
        let y: Vec<f64> = x.iter().map(|v| v * self.mu).collect();
        let m2 = self.mu * self.mu;
        Some(self.inner.hessian(&y)?.into_iter().map(|g| g * m2).collect())
    }
}

/// Deterministic catalog of `count` smooth test fields on `n` modes.
pub fn generated_catalog(n: usize, count: usize, seed: u64) -> Vec<FieldSpec> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut vecn = |scale: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
        let spec = match k % 5 {
            0 => FieldSpec::Sin { a: vecn(4.0), phase: 0.0, amp: 1.0 },
            1 => FieldSpec::Tanh { a: vecn(3.0) },
            2 => FieldSpec::Bump { center: vecn(0.8), width: 0.3 + 0.1 * k as f64 / count as f64, amp: 1.0 },
            3 => FieldSpec::Sin { a: vecn(8.0), phase: 1.0, amp: 0.5 },
            _ => FieldSpec::Quadratic { c: vecn(2.0) },
        };
        out.push(spec);
    }
    out
}
