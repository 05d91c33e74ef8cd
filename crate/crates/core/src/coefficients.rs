//! Coefficients `b`, `g`, `f` and `sigma` in the diagonal model, and a
//! numerical checker for the structural hypotheses they must satisfy.
//!
//! `sigma* sigma(x, r) = Q + delta f(x, r)` with
//! `f(x, r) e_i = lambda_i frak_f(x_i, r) e_i`, and `sigma` is the positive
//! diagonal square root.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::field::{Field, FieldSpec};
use crate::spectral::{
    holder_seminorm, kappa_blowup_exponent, lambda_t, norm, BallSampler, DiagonalOperator,
    SpectralModel,
};
use crate::stats::{loglog_slope, mix, power_exp_fit};

/// `r`-profile of `frak_f(s, r) = base(r) * modulation(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FKind {
    Tanh,
    Sin,
    /// `r / sqrt(1 + r^2)`
    LinearSaturated,
    /// `r`; unbounded, growth exactly `|r|`.
    Linear,
    Constant,
}

impl FKind {
    pub fn base(self, r: f64) -> f64 {
        match self {
            FKind::Tanh => r.tanh(),
            FKind::Sin => r.sin(),
            FKind::LinearSaturated => r / (1.0 + r * r).sqrt(),
            FKind::Linear => r,
            FKind::Constant => 1.0,
        }
    }

    pub fn d_base(self, r: f64) -> f64 {
        match self {
            FKind::Tanh => 1.0 - r.tanh().powi(2),
            FKind::Sin => r.cos(),
            FKind::LinearSaturated => (1.0 + r * r).powf(-1.5),
            FKind::Linear => 1.0,
            FKind::Constant => 0.0,
        }
    }

    /// `sup_{|r| <= r_max} |base(r)|`.
    pub fn sup_base(self, r_max: f64) -> f64 {
        match self {
            FKind::Tanh => r_max.tanh(),
            FKind::Sin => {
                if r_max >= std::f64::consts::FRAC_PI_2 {
                    1.0
                } else {
                    r_max.sin()
                }
            }
            FKind::LinearSaturated => r_max / (1.0 + r_max * r_max).sqrt(),
            FKind::Linear => r_max,
            FKind::Constant => 1.0,
        }
    }

    pub fn sup_d_base(self) -> f64 {
        match self {
            FKind::Constant => 0.0,
            _ => 1.0,
        }
    }

    pub fn sup_dd_base(self) -> f64 {
        match self {
            FKind::Tanh => 4.0 / (3.0 * 3f64.sqrt()),
            FKind::Sin => 1.0,
            FKind::LinearSaturated => 1.5 * 1.25f64.powf(-2.5),
            FKind::Linear | FKind::Constant => 0.0,
        }
    }

    pub fn is_odd(self) -> bool {
        !matches!(self, FKind::Constant)
    }
}

/// `s`-dependence of `frak_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SModulation {
    Unit,
    /// `sech^2(c s)`, even in `s`.
    Sech2 { c: f64 },
    /// `tanh(s)`, odd in `s`.
    Tanh,
}

impl SModulation {
    pub fn eval(self, s: f64) -> f64 {
        match self {
            SModulation::Unit => 1.0,
            SModulation::Sech2 { c } => 1.0 - (c * s).tanh().powi(2),
            SModulation::Tanh => s.tanh(),
        }
    }

    pub fn deriv(self, s: f64) -> f64 {
        match self {
            SModulation::Unit => 0.0,
            SModulation::Sech2 { c } => {
                let th = (c * s).tanh();
                -2.0 * c * th * (1.0 - th * th)
            }
            SModulation::Tanh => 1.0 - s.tanh().powi(2),
        }
    }

    pub fn sup_deriv(self) -> f64 {
        match self {
            SModulation::Unit => 0.0,
            SModulation::Sech2 { c } => c.abs() * 4.0 / (3.0 * 3f64.sqrt()),
            SModulation::Tanh => 1.0,
        }
    }
}

/// The perturbation `f(x, r) = diag(lambda_i frak_f(x_i, r))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FFamily {
    pub lambda: Vec<f64>,
    pub kind: FKind,
    pub modulation: SModulation,
}

impl FFamily {
    pub fn new(lambda: Vec<f64>, kind: FKind, modulation: SModulation) -> Result<Self> {
        ensure(lambda.iter().all(|l| l.is_finite() && *l >= 0.0), || {
            "lambda_f must be non-negative".into()
        })?;
        Ok(Self { lambda, kind, modulation })
    }

    /// `lambda_i = i^{-p}`.
    pub fn power_decay(n: usize, p: f64, kind: FKind, modulation: SModulation) -> Self {
        let lambda = (1..=n).map(|i| (i as f64).powf(-p)).collect();
        Self { lambda, kind, modulation }
    }

    /// `frak_f(s, r)`; the same profile for every mode.
    pub fn frak(&self, s: f64, r: f64) -> f64 {
        self.kind.base(r) * self.modulation.eval(s)
    }

    pub fn frak_dr(&self, s: f64, r: f64) -> f64 {
        self.kind.d_base(r) * self.modulation.eval(s)
    }

    pub fn frak_ds(&self, s: f64, r: f64) -> f64 {
        self.kind.base(r) * self.modulation.deriv(s)
    }

    pub fn lambda_sum(&self) -> f64 {
        self.lambda.iter().sum()
    }

    /// `c` in `sup_x ||f(x, r)||_{L_1} <= c (1 + |r|)`.
    pub fn growth_constant(&self) -> f64 {
        self.lambda_sum()
    }

    /// Lipschitz constant of `frak_f` in `s` for `|r| <= r_max`.
    pub fn lipschitz_s(&self, r_max: f64) -> f64 {
        self.kind.sup_base(r_max) * self.modulation.sup_deriv()
    }

    /// Lipschitz constant of `frak_f` in `r`.
    pub fn lipschitz_r(&self) -> f64 {
        self.kind.sup_d_base()
    }

    /// Lipschitz constant of `(x, r) -> f(x, r)` in trace norm for `|r| <= r_max`.
    pub fn lipschitz_trace(&self, r_max: f64) -> f64 {
        let l2 = norm(&self.lambda);
        (self.lipschitz_s(r_max) * l2).max(self.lipschitz_r() * self.lambda_sum())
    }

    /// Lipschitz constant of `(x, r) -> d_r f(x, r)` in trace norm.
    pub fn lipschitz_dr_trace(&self) -> f64 {
        let l2 = norm(&self.lambda);
        (self.kind.sup_d_base() * self.modulation.sup_deriv() * l2)
            .max(self.kind.sup_dd_base() * self.lambda_sum())
    }

    /// `sup |lambda_i frak_f|` over `|r| <= r_max`.
    pub fn sup_abs(&self, r_max: f64) -> f64 {
        let m = self.lambda.iter().fold(0.0f64, |a, l| a.max(*l));
        m * self.kind.sup_base(r_max)
    }
}

/// Bounded Lipschitz drift `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    Zero,
    /// `b_i(x) = scale * tanh(x_i) / i^decay`
    TanhModewise { scale: f64, decay: f64 },
    Constant { value: Vec<f64> },
}

impl Drift {
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            Drift::TanhModewise { scale, decay } => {
                for (i, (o, xi)) in out.iter_mut().zip(x).enumerate() {
                    *o = scale * xi.tanh() / ((i + 1) as f64).powf(*decay);
                }
            }
            Drift::Constant { value } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = value.get(i).copied().unwrap_or(0.0);
                }
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval(x, &mut out);
        out
    }

    /// Diagonal of the Jacobian (every variant acts modewise).
    pub fn jacobian_diag(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::TanhModewise { scale, decay } => {
                for (i, (o, xi)) in out.iter_mut().zip(x).enumerate() {
                    *o = scale * (1.0 - xi.tanh().powi(2)) / ((i + 1) as f64).powf(*decay);
                }
            }
            _ => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    pub fn lipschitz(&self, n: usize) -> f64 {
        match self {
            Drift::TanhModewise { scale, decay } => {
                (1..=n).map(|i| scale.abs() / (i as f64).powf(*decay)).fold(0.0, f64::max)
            }
            _ => 0.0,
        }
    }

    pub fn sup_norm(&self, n: usize) -> f64 {
        match self {
            Drift::Zero => 0.0,
            Drift::TanhModewise { scale, decay } => {
                scale.abs() * (1..=n).map(|i| (i as f64).powf(-2.0 * decay)).sum::<f64>().sqrt()
            }
            Drift::Constant { value } => norm(value),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Drift::Zero => true,
            Drift::TanhModewise { scale, .. } => *scale == 0.0,
            Drift::Constant { value } => value.iter().all(|v| *v == 0.0),
        }
    }

    pub fn is_odd(&self) -> bool {
        match self {
            Drift::Constant { value } => value.iter().all(|v| *v == 0.0),
            _ => true,
        }
    }
}

/// Complete coefficient data for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub model: SpectralModel,
    pub drift: Drift,
    pub g: FieldSpec,
    /// Hölder exponent claimed for `g`.
    pub eta: f64,
    pub f: FFamily,
    pub delta: f64,
}

impl CoefficientSet {
    pub fn new(
        model: SpectralModel,
        drift: Drift,
        g: FieldSpec,
        eta: f64,
        f: FFamily,
        delta: f64,
    ) -> Result<Self> {
        model.check_len(f.lambda.len())?;
        if let Drift::Constant { value } = &drift {
            model.check_len(value.len())?;
        }
        ensure(delta >= 0.0 && delta.is_finite(), || format!("delta must be >= 0, got {delta}"))?;
        ensure(eta > 0.0 && eta <= 1.0, || format!("eta must lie in (0,1], got {eta}"))?;
        let c = Self { model, drift, g, eta, f, delta };
        let thr = c.positivity_threshold();
        ensure(delta < thr, || {
            format!("delta = {delta} violates positivity of sigma*sigma (threshold {thr:.6})")
        })?;
        Ok(c)
    }

    /// Linear case: `delta = 0`, `b = 0`.
    pub fn linear(model: SpectralModel, g: FieldSpec) -> Result<Self> {
        let n = model.n_modes();
        Self::new(model, Drift::Zero, g, 1.0, FFamily::power_decay(n, 2.0, FKind::Tanh, SModulation::Unit), 0.0)
    }

    /// Two-mode Laplacian preset with a tanh drift and terminal `tanh(x_1)`.
    pub fn reference(delta: f64) -> Result<Self> {
        let model = SpectralModel::laplacian(2, 1.0)?;
        Self::new(
            model,
            Drift::TanhModewise { scale: 0.1, decay: 2.0 },
            FieldSpec::tanh_first(2),
            1.0,
            FFamily::new(vec![2.0, 0.5], FKind::Tanh, SModulation::Unit)?,
            delta,
        )
    }

    /// Like [`CoefficientSet::reference`] but with `frak_f(-s, -r) = frak_f(s, r)`,
    /// so odd terminal data gives an odd solution.
    pub fn symmetric(delta: f64) -> Result<Self> {
        let mut c = Self::reference(0.0)?;
        c.f.modulation = SModulation::Tanh;
        c.delta = delta;
        Self::new(c.model, c.drift, c.g, c.eta, c.f, c.delta)
    }

    pub fn n_modes(&self) -> usize {
        self.model.n_modes()
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        Self::new(self.model.clone(), self.drift.clone(), self.g.clone(), self.eta, self.f.clone(), delta)
    }

    pub fn with_model(&self, model: SpectralModel) -> Result<Self> {
        let n = model.n_modes();
        let mut f = self.f.clone();
        f.lambda = (0..n).map(|i| self.f.lambda.get(i).copied().unwrap_or_else(|| ((i + 1) as f64).powi(-2))).collect();
        let drift = match &self.drift {
            Drift::Constant { value } => Drift::Constant {
                value: (0..n).map(|i| value.get(i).copied().unwrap_or(0.0)).collect(),
            },
            d => d.clone(),
        };
        Self::new(model, drift, self.g.clone(), self.eta, f, self.delta)
    }

    /// Bound on `|u|` from the maximum principle: `||g||_0` on the ball, or
    /// globally when known.
    pub fn value_range(&self) -> f64 {
        self.g.global_sup().unwrap_or_else(|| {
            crate::spectral::sup_norm(&self.g, &self.model, 400, 1).unwrap_or(f64::INFINITY)
        })
    }

    /// Largest `delta` for which `gamma_i + delta lambda_i frak_f >= 0` on
    /// the range `|r| <= value_range() + 1`.
    pub fn positivity_threshold(&self) -> f64 {
        let r_max = self.value_range() + 1.0;
        let mut thr = f64::INFINITY;
        for (l, g) in self.f.lambda.iter().zip(self.model.gamma()) {
            let s = l * self.f.kind.sup_base(r_max);
            if s > 0.0 {
                thr = thr.min(g / s);
            }
        }
        thr
    }

    /// `sigma_i(x, r)` written into `out`.
    pub fn sigma_into(&self, x: &[f64], r: f64, out: &mut [f64]) -> Result<()> {
        let gamma = self.model.gamma();
        for i in 0..out.len() {
            let rad = gamma[i] + self.delta * self.f.lambda[i] * self.f.frak(x[i], r);
            if !(rad >= 0.0) {
                return Err(Error::Positivity { mode: i, radicand: rad });
            }
            out[i] = rad.sqrt();
        }
        Ok(())
    }

    /// `d sigma_i / d x_i` and `d sigma_i / d r`.
    pub fn sigma_partials(&self, x: &[f64], r: f64, sigma: &[f64], dx: &mut [f64], dr: &mut [f64]) {
        for i in 0..sigma.len() {
            let c = self.delta * self.f.lambda[i] / (2.0 * sigma[i]);
            dx[i] = c * self.f.frak_ds(x[i], r);
            dr[i] = c * self.f.frak_dr(x[i], r);
        }
    }

    /// `lambda_i frak_f(x_i, r)`.
    pub fn f_diag(&self, x: &[f64], r: f64) -> Vec<f64> {
        self.f.lambda.iter().zip(x).map(|(l, s)| l * self.f.frak(*s, r)).collect()
    }
}

/// Positive square root of `Q + delta f(x, r)`.
pub fn sigma_apply(coeffs: &CoefficientSet, x: &[f64], r: f64) -> Result<DiagonalOperator> {
    coeffs.model.check_len(x.len())?;
    let mut out = vec![0.0; x.len()];
    coeffs.sigma_into(x, r, &mut out)?;
    Ok(DiagonalOperator::new(out))
}

/// `F(v)(x) = f(x, v(x))`.
pub fn f_eval(coeffs: &CoefficientSet, v: &dyn Field, x: &[f64]) -> Result<DiagonalOperator> {
    coeffs.model.check_len(x.len())?;
    Ok(DiagonalOperator::new(coeffs.f_diag(x, v.value(x))))
}

/// One checked clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisEntry {
    /// Which coefficient the clause constrains.
    pub group: String,
    pub clause: String,
    pub pass: bool,
    /// Measured quantity (sampled maximum, fitted exponent, ...).
    pub measured: f64,
    /// What the measurement is compared against.
    pub bound: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub entries: Vec<HypothesisEntry>,
    pub decay_partial_sums: Vec<f64>,
    pub pass: bool,
}

impl HypothesisReport {
    pub fn entry(&self, clause: &str) -> Option<&HypothesisEntry> {
        self.entries.iter().find(|e| e.clause == clause)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| !e.pass).map(|e| e.clause.as_str()).collect()
    }
}

/// Checker settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckOptions {
    /// Small-time window for exponent fits, inside `(0, 1]`.
    pub t_grid: Vec<f64>,
    /// Random `(x, r)` probes for the sampled Lipschitz and growth clauses.
    pub probes: usize,
    pub seed: u64,
    /// Slack added to fitted exponents before comparing with the bound.
    pub exponent_tol: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { t_grid: crate::stats::logspace(1e-3, 1e-1, 9), probes: 1000, seed: 1, exponent_tol: 0.05 }
    }
}

/// Decay exponent `p` of `gamma_i / alpha_i ~ i^p` fitted on the upper half of
/// the modes; summability needs `p < -1`.
pub fn decay_exponent(model: &SpectralModel) -> Option<f64> {
    let n = model.n_modes();
    if n < 2 {
        return None;
    }
    let start = if n >= 4 { n / 2 } else { 0 };
    let idx: Vec<f64> = (start..n).map(|i| (i + 1) as f64).collect();
    let terms: Vec<f64> = (start..n).map(|i| model.gamma()[i] / model.alpha()[i]).collect();
    loglog_slope(&idx, &terms).ok()
}

/// Evaluates every structural clause on the coefficient set.
pub fn check_hypotheses(coeffs: &CoefficientSet, opts: &CheckOptions) -> Result<HypothesisReport> {
    ensure(opts.t_grid.len() >= 3, || "t_grid needs at least three times".into())?;
    ensure(opts.t_grid.iter().all(|t| *t > 0.0 && *t <= 1.0), || "t_grid must lie in (0, 1]".into())?;
    ensure(opts.probes >= 2, || "probes must be >= 2".into())?;
    let model = &coeffs.model;
    let n = model.n_modes();
    let r_max = coeffs.value_range() + 1.0;
    let ball = BallSampler::for_model(model);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(opts.seed, 0xC0EF));
    let probes: Vec<(Vec<f64>, f64, Vec<f64>, f64)> = (0..opts.probes)
        .map(|_| {
            let x = ball.uniform(&mut rng);
            let r = rng.random_range(-r_max..r_max);
            let dir = ball.direction(&mut rng);
            let h = 10f64.powf(rng.random_range(-4.0..0.0)) * ball.radius;
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
            let s = (r + rng.random_range(-h..h)).clamp(-r_max, r_max);
            (x, r, y, s)
        })
        .collect();
    let mut entries = Vec::new();
    let mut push = |group: &str, clause: &str, pass: bool, measured: f64, bound: f64, note: String| {
        entries.push(HypothesisEntry { group: group.into(), clause: clause.into(), pass, measured, bound, note });
    };

    // Diffusion coefficient.
    let mut min_rad = f64::INFINITY;
    let mut sig_lip: f64 = 0.0;
    let mut f_growth: f64 = 0.0;
    let mut f_lip: f64 = 0.0;
    let mut fdr_lip: f64 = 0.0;
    let gamma = model.gamma();
    let mut sx = vec![0.0; n];
    let mut sy = vec![0.0; n];
    for (x, r, y, s) in &probes {
        for i in 0..n {
            let rad = gamma[i] + coeffs.delta * coeffs.f.lambda[i] * coeffs.f.frak(x[i], *r);
            min_rad = min_rad.min(rad);
        }
        let fx = coeffs.f_diag(x, *r);
        let fy = coeffs.f_diag(y, *s);
        let dist = norm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>()) + (r - s).abs();
        f_growth = f_growth.max(fx.iter().map(|v| v.abs()).sum::<f64>() / (1.0 + r.abs()));
        if dist > 0.0 {
            let d1: f64 = fx.iter().zip(&fy).map(|(a, b)| (a - b).abs()).sum();
            f_lip = f_lip.max(d1 / dist);
            let dr: f64 = (0..n)
                .map(|i| coeffs.f.lambda[i] * (coeffs.f.frak_dr(x[i], *r) - coeffs.f.frak_dr(y[i], *s)).abs())
                .sum();
            fdr_lip = fdr_lip.max(dr / dist);
            if coeffs.sigma_into(x, *r, &mut sx).is_ok() && coeffs.sigma_into(y, *s, &mut sy).is_ok() {
                let d: Vec<f64> = sx.iter().zip(&sy).map(|(a, b)| a - b).collect();
                sig_lip = sig_lip.max(norm(&d) / dist);
            }
        }
    }
    push("diffusion", "sigma_positivity", min_rad > 0.0, min_rad, 0.0,
        format!("min over probes of gamma_i + delta*lambda_i*frak_f, |r| <= {r_max:.3}"));
    let rad_floor = (0..n)
        .map(|i| gamma[i] - coeffs.delta * coeffs.f.lambda[i] * coeffs.f.kind.sup_base(r_max))
        .fold(f64::INFINITY, f64::min);
    let sig_bound = coeffs.delta * coeffs.f.lipschitz_trace(r_max) / (2.0 * rad_floor.max(1e-300).sqrt());
    push("diffusion", "sigma_lipschitz", sig_lip.is_finite() && sig_lip <= sig_bound * (1.0 + 1e-9) + 1e-12,
        sig_lip, sig_bound, "sampled ||sigma(x,r)-sigma(y,s)||_L2 / (|x-y|+|r-s|)".into());
    let c_growth = coeffs.f.growth_constant();
    push("diffusion", "f_trace_growth", f_growth <= c_growth * (1.0 + 1e-12), f_growth, c_growth,
        "sampled ||f(x,r)||_L1 / (1+|r|) against sum(lambda)".into());
    let c_lip = coeffs.f.lipschitz_trace(r_max);
    push("diffusion", "f_lipschitz", f_lip <= c_lip * (1.0 + 1e-9) + 1e-12, f_lip, c_lip,
        "sampled trace-norm Lipschitz ratio of f".into());
    let c_dr = coeffs.f.lipschitz_dr_trace();
    push("diffusion", "f_dr_lipschitz", fdr_lip <= c_dr * (1.0 + 1e-9) + 1e-12, fdr_lip, c_dr,
        "sampled trace-norm Lipschitz ratio of d_r f".into());

    // Semigroup and covariance.
    let omega = model.omega();
    push("semigroup", "semigroup_decay", omega > 0.0, omega, 0.0, "||e^{tA}|| = e^{-alpha_1 t}".into());
    let sums = model.decay_partial_sums();
    let p = decay_exponent(model);
    let (pass22, measured22, note22) = match p {
        Some(p) => (p < -1.0, p, format!("gamma_i/alpha_i ~ i^p; partial sum S_N = {:.6}", sums[n - 1])),
        None => (true, f64::NAN, "single mode: the sum is one finite term".into()),
    };
    push("semigroup", "qt_trace_class", pass22, measured22, -1.0, note22);
    push("semigroup", "range_inclusion", gamma.iter().all(|g| *g > 0.0), gamma.iter().cloned().fold(f64::INFINITY, f64::min), 0.0,
        "Q_t invertible on H_N iff every gamma_i > 0".into());
    let lam: Vec<f64> = opts.t_grid.iter().map(|&t| lambda_t(model, t).map(|l| l.op_norm())).collect::<Result<_>>()?;
    let beta_lam = power_exp_fit(&opts.t_grid, &lam)?.1;
    push("semigroup", "lambda_blowup", beta_lam <= 0.5 + opts.exponent_tol, beta_lam, 0.5,
        "fit ||Lambda_t|| ~ c t^-beta e^-at".into());
    let mut worst_kappa = f64::NEG_INFINITY;
    let mut kappa_max = f64::NEG_INFINITY;
    for theta in [0.25, 0.5, 0.75] {
        let beta = kappa_blowup_exponent(model, theta, &opts.t_grid)?;
        kappa_max = kappa_max.max(beta);
        worst_kappa = worst_kappa.max(beta - (1.0 - theta / 2.0));
    }
    push("semigroup", "kappa_blowup", kappa_max < 1.0, kappa_max, 1.0,
        format!("largest fitted beta_theta over theta in {{0.25,0.5,0.75}}; max excess over 1-theta/2 = {worst_kappa:.4}"));

    // Noise: ||e^{tA} sigma(x,r)||_L2.
    let decay_at = |t: f64| model.semigroup(t).diag;
    let mut growth_t = Vec::with_capacity(opts.t_grid.len());
    let mut lip_t = Vec::with_capacity(opts.t_grid.len());
    for &t in &opts.t_grid {
        let e = decay_at(t);
        let mut g_sup: f64 = 0.0;
        let mut l_sup: f64 = 0.0;
        for (x, r, y, s) in probes.iter().take(200) {
            if coeffs.sigma_into(x, *r, &mut sx).is_err() || coeffs.sigma_into(y, *s, &mut sy).is_err() {
                continue;
            }
            let hs: f64 = sx.iter().zip(&e).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt();
            g_sup = g_sup.max(hs / (1.0 + norm(x) + r.abs()));
            let dist = norm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>()) + (r - s).abs();
            if dist > 0.0 {
                let d: f64 = sx.iter().zip(&sy).zip(&e).map(|((a, b), c)| ((a - b) * c).powi(2)).sum::<f64>().sqrt();
                l_sup = l_sup.max(d / dist);
            }
        }
        growth_t.push(g_sup.max(1e-300));
        lip_t.push(l_sup);
    }
    let beta_h3 = power_exp_fit(&opts.t_grid, &growth_t)?.1;
    push("noise", "noise_hs_growth", beta_h3 <= 0.25 + opts.exponent_tol, beta_h3, 0.25,
        "fit sup ||e^{tA} sigma(x,r)||_L2 / (1+|x|+|r|) ~ t^-beta".into());
    let (beta_lip, lip_note) = if coeffs.delta == 0.0 || lip_t.iter().all(|v| *v == 0.0) {
        (0.0, "sigma does not depend on (x, r)".to_string())
    } else {
        let v: Vec<f64> = lip_t.iter().map(|v| v.max(1e-300)).collect();
        (power_exp_fit(&opts.t_grid, &v)?.1, "fit of the sampled Lipschitz ratio".to_string())
    };
    push("noise", "noise_hs_lipschitz", beta_lip <= 0.25 + opts.exponent_tol, beta_lip, 0.25, lip_note);

    // Drift.
    let mut b_sup: f64 = 0.0;
    let mut b_lip: f64 = 0.0;
    for (x, _, y, _) in &probes {
        let bx = coeffs.drift.apply(x);
        let by = coeffs.drift.apply(y);
        b_sup = b_sup.max(norm(&bx));
        let dist = norm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>());
        if dist > 0.0 {
            b_lip = b_lip.max(norm(&bx.iter().zip(&by).map(|(a, b)| a - b).collect::<Vec<_>>()) / dist);
        }
    }
    let b_bound = coeffs.drift.sup_norm(n);
    push("drift", "drift_bounded", b_sup <= b_bound * (1.0 + 1e-12) + 1e-15, b_sup, b_bound, "sampled sup ||b(x)||".into());
    let l_bound = coeffs.drift.lipschitz(n);
    push("drift", "drift_lipschitz", b_lip <= l_bound * (1.0 + 1e-9) + 1e-15, b_lip, l_bound, "sampled Lipschitz ratio of b".into());

    // Terminal data.
    let hr = holder_seminorm(&coeffs.g, coeffs.eta, model, 600, mix(opts.seed, 0x6))?;
    let g_norm = hr.sup_norm + hr.holder_seminorm_est;
    push("terminal", "g_holder", coeffs.eta > 0.5 && g_norm.is_finite(), g_norm, 0.5,
        format!("||g||_eta on the ball with eta = {}; eta must exceed 1/2", coeffs.eta));

    let pass = entries.iter().all(|e| e.pass);
    Ok(HypothesisReport { entries, decay_partial_sums: sums, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_mode(lambda: f64, kind: FKind, delta: f64) -> CoefficientSet {
        let m = SpectralModel::new(vec![1.0], vec![1.0], 1.0).unwrap();
        CoefficientSet::new(
            m,
            Drift::Zero,
            FieldSpec::tanh_first(1),
            1.0,
            FFamily::new(vec![lambda], kind, SModulation::Unit).unwrap(),
            delta,
        )
        .unwrap()
    }

    #[test]
    fn sigma_examples() {
        let c = one_mode(1.0, FKind::Tanh, 0.0);
        assert_eq!(sigma_apply(&c, &[0.3], 5.0).unwrap().diag, vec![1.0]);
        let c = one_mode(1.0, FKind::Tanh, 0.1);
        assert_eq!(sigma_apply(&c, &[0.3], 0.0).unwrap().diag, vec![1.0]);
        let c = one_mode(0.5, FKind::Tanh, 0.1);
        assert_relative_eq!(sigma_apply(&c, &[0.0], 40.0).unwrap().diag[0], 1.05f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(1.05f64.sqrt(), 1.02470, epsilon = 1e-5);
    }

    #[test]
    fn sigma_square_identity() {
        let c = CoefficientSet::reference(0.05).unwrap();
        for (x, r) in [([0.3, -0.7], 0.4), ([-0.9, 0.1], -0.8)] {
            let s = sigma_apply(&c, &x, r).unwrap();
            let f = c.f_diag(&x, r);
            for i in 0..2 {
                let want = c.model.gamma()[i] + c.delta * f[i];
                assert!((s.diag[i].powi(2) - want).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn positivity_violation_names_mode() {
        let m = SpectralModel::new(vec![1.0, 4.0], vec![1.0, 0.01], 1.0).unwrap();
        let c = CoefficientSet {
            model: m,
            drift: Drift::Zero,
            g: FieldSpec::tanh_first(2),
            eta: 1.0,
            f: FFamily::new(vec![1.0, 1.0], FKind::Linear, SModulation::Unit).unwrap(),
            delta: 0.5,
        };
        match sigma_apply(&c, &[0.0, 0.0], -1.0) {
            Err(Error::Positivity { mode, .. }) => assert_eq!(mode, 1),
            other => panic!("{other:?}"),
        }
        assert!(CoefficientSet::new(c.model.clone(), Drift::Zero, c.g.clone(), 1.0, c.f.clone(), 0.5).is_err());
    }

    #[test]
    fn f_eval_examples() {
        let m = SpectralModel::laplacian(2, 1.0).unwrap();
        let g = FieldSpec::Constant { c: 2.0 };
        let c = CoefficientSet::new(
            m,
            Drift::Zero,
            g.clone(),
            1.0,
            FFamily::new(vec![1.0, 0.5], FKind::Linear, SModulation::Unit).unwrap(),
            0.0,
        )
        .unwrap();
        let op = f_eval(&c, &g, &[0.1, 0.2]).unwrap();
        assert_eq!(op.diag, vec![2.0, 1.0]);
        assert_eq!(op.trace_norm(), 3.0);
        let zero = f_eval(&c, &FieldSpec::Constant { c: 0.0 }, &[0.1, 0.2]).unwrap();
        assert!(zero.diag.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn drift_jacobian_matches_fd() {
        let d = Drift::TanhModewise { scale: 0.5, decay: 2.0 };
        let x = [0.3, -0.4];
        let mut j = [0.0; 2];
        d.jacobian_diag(&x, &mut j);
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (d.apply(&xp)[i] - d.apply(&xm)[i]) / 2e-6;
            assert!((fd - j[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn laplacian_decay_sum() {
        let m = SpectralModel::laplacian(8, 1.0).unwrap();
        let s = m.decay_partial_sums()[7];
        let oracle: f64 = (1..=8).map(|i| 1.0 / (i * i) as f64).sum();
        assert_relative_eq!(s, oracle, epsilon = 1e-15);
        assert_relative_eq!(s, 1.52742, epsilon = 1e-5);
        assert!(decay_exponent(&m).unwrap() < -1.0);
    }

    #[test]
    fn constant_alpha_diverges() {
        let mut last = 0.0;
        let ns = [8.0, 16.0, 32.0];
        let mut sums = Vec::new();
        for n in [8, 16, 32] {
            let m = SpectralModel::constant_alpha(n, 1.0).unwrap();
            let s = *m.decay_partial_sums().last().unwrap();
            assert!(s > last);
            last = s;
            sums.push(s);
            assert!(decay_exponent(&m).unwrap() >= -1.0);
        }
        assert!((loglog_slope(&ns, &sums).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_exponent_many_modes() {
        // ||e^{tA}||_L2^2 = sum e^{-2 i^2 t} ~ t^{-1/2} needs many modes.
        let m = SpectralModel::laplacian(400, 1.0).unwrap();
        let ts = crate::stats::logspace(1e-3, 1e-1, 7);
        let v: Vec<f64> = ts.iter().map(|&t| m.semigroup(t).hs_norm()).collect();
        let slope = loglog_slope(&ts, &v).unwrap();
        assert!((slope + 0.25).abs() < 0.03, "{slope}");
    }

    #[test]
    fn reference_preset_passes() {
        let c = CoefficientSet::reference(0.05).unwrap();
        let rep = check_hypotheses(&c, &CheckOptions::default()).unwrap();
        assert!(rep.pass, "{:?}", rep.failed());
    }

    #[test]
    fn checker_is_deterministic() {
        let c = CoefficientSet::symmetric(0.1).unwrap();
        let a = check_hypotheses(&c, &CheckOptions::default()).unwrap();
        let b = check_hypotheses(&c, &CheckOptions::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
