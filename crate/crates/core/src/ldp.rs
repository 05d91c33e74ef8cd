//! Skeleton and controlled dynamics, the action functional and its
//! minimization, and Monte-Carlo probes of the large-deviation rate.

use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{ensure, Error, Result};
use crate::field::Field;
use crate::spectral::HVector;

/// A control `phi` sampled on a time grid, linear between nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub times: Vec<f64>,
    pub values: Vec<HVector>,
    /// Trapezoid value of `int ||phi||^2 ds`.
    pub l2_norm_sq: f64,
}

fn trapezoid_sq(times: &[f64], values: &[HVector]) -> f64 {
    let sq: Vec<f64> = values.iter().map(|v| v.dot(v)).collect();
    times.windows(2).zip(sq.windows(2)).map(|(t, s)| 0.5 * (t[1] - t[0]) * (s[0] + s[1])).sum()
}

impl ControlPath {
    pub fn new(times: Vec<f64>, values: Vec<HVector>) -> Result<Self> {
        ensure(times.len() >= 2, || "a control needs at least two nodes".into())?;
        ensure(times[0] == 0.0, || "control grid must start at 0".into())?;
        ensure(times.windows(2).all(|w| w[0] < w[1]), || "control grid must be strictly increasing".into())?;
        if values.len() != times.len() {
            return Err(Error::DimensionMismatch { expected: times.len(), got: values.len() });
        }
        let n = values[0].len();
        ensure(values.iter().all(|v| v.len() == n), || "control values must share one dimension".into())?;
        ensure(values.iter().all(|v| v.as_slice().iter().all(|c| c.is_finite())), || {
            "control values must be finite".into()
        })?;
        let l2_norm_sq = trapezoid_sq(&times, &values);
        Ok(Self { times, values, l2_norm_sq })
    }

    /// Zero control on a uniform grid.
    pub fn zeros(n_modes: usize, horizon: f64, n_steps: usize) -> Result<Self> {
        ensure(horizon > 0.0 && n_steps >= 1, || "zero control needs a positive horizon and steps".into())?;
        let times = (0..=n_steps).map(|k| horizon * k as f64 / n_steps as f64).collect();
        Self::new(times, vec![HVector::zeros(n_modes); n_steps + 1])
    }

    /// Samples `phi(s)` on a uniform grid.
    pub fn from_fn(n_modes: usize, horizon: f64, n_steps: usize, phi: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        ensure(horizon > 0.0 && n_steps >= 1, || "control needs a positive horizon and steps".into())?;
        let times: Vec<f64> = (0..=n_steps).map(|k| horizon * k as f64 / n_steps as f64).collect();
        let values = times
            .iter()
            .map(|&s| {
                let v = phi(s);
                if v.len() != n_modes {
                    return Err(Error::DimensionMismatch { expected: n_modes, got: v.len() });
                }
                Ok(HVector::new(v))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(times, values)
    }

    pub fn n_modes(&self) -> usize {
        self.values[0].len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    /// `phi(s)`, linear between nodes and constant outside the grid.
    pub fn at(&self, s: f64, out: &mut [f64]) {
        let k = self.times.partition_point(|t| *t <= s);
        if k == 0 {
            out.copy_from_slice(self.values[0].as_slice());
            return;
        }
        if k >= self.times.len() {
            out.copy_from_slice(self.values[self.times.len() - 1].as_slice());
            return;
        }
        let j = k - 1;
        let w = (s - self.times[j]) / (self.times[k] - self.times[j]);
        for ((o, a), b) in out.iter_mut().zip(self.values[j].as_slice()).zip(self.values[k].as_slice()) {
            *o = (1.0 - w) * a + w * b;
        }
    }

    /// Recomputes the cached norm.
    pub fn recompute_l2(&self) -> f64 {
        trapezoid_sq(&self.times, &self.values)
    }

    /// Membership in `{ int ||phi||^2 <= m }`.
    pub fn within(&self, m: f64) -> bool {
        self.l2_norm_sq <= m
    }

    pub fn difference(&self, other: &ControlPath) -> Result<ControlPath> {
        ensure(self.times == other.times, || "controls must share a grid".into())?;
        let v = self.values.iter().zip(&other.values).map(|(a, b)| a.sub(b)).collect();
        Self::new(self.times.clone(), v)
    }
}

/// Deterministic path on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicPath {
    pub times: Vec<f64>,
    pub states: Vec<HVector>,
}

impl DeterministicPath {
    pub fn endpoint(&self) -> &HVector {
        self.states.last().expect("nonempty")
    }

    /// `sup_k ||self_k - other_k||` on a shared grid.
    pub fn sup_distance(&self, other: &DeterministicPath) -> f64 {
        self.states.iter().zip(&other.states).map(|(a, b)| a.distance(b)).fold(0.0, f64::max)
    }
}

/// One exponential-Euler step of `Z' = A Z + b(Z)`.
fn skeleton_step(coeffs: &CoefficientSet, decay: &[f64], dt: f64, z: &mut [f64], b: &mut [f64]) {
    coeffs.drift.eval(z, b);
    for i in 0..z.len() {
        z[i] = decay[i] * (z[i] + dt * b[i]);
    }
}

fn decays(coeffs: &CoefficientSet, dt: f64) -> Vec<f64> {
    coeffs.model.alpha().iter().map(|a| (-a * dt).exp()).collect()
}

/// `Z^y(horizon)` with `n_steps` steps.
fn skeleton_endpoint(coeffs: &CoefficientSet, y: &[f64], horizon: f64, n_steps: usize) -> Vec<f64> {
    let mut z = y.to_vec();
    if horizon <= 0.0 {
        return z;
    }
    let dt = horizon / n_steps as f64;
    let decay = decays(coeffs, dt);
    let mut b = vec![0.0; z.len()];
    for _ in 0..n_steps {
        skeleton_step(coeffs, &decay, dt, &mut z, &mut b);
    }
    z
}

/// Skeleton path `Z^y` over `[0, horizon]`.
pub fn skeleton_solve(coeffs: &CoefficientSet, y: &HVector, horizon: f64, n_steps: usize) -> Result<DeterministicPath> {
    ensure(horizon >= 0.0 && horizon.is_finite(), || format!("horizon must be >= 0, got {horizon}"))?;
    ensure(n_steps >= 1, || "n_steps must be >= 1".into())?;
    if y.len() != coeffs.n_modes() {
        return Err(Error::DimensionMismatch { expected: coeffs.n_modes(), got: y.len() });
    }
    let dt = horizon / n_steps as f64;
    let decay = decays(coeffs, dt);
    let mut z = y.as_slice().to_vec();
    let mut b = vec![0.0; z.len()];
    let mut states = vec![y.clone()];
    for _ in 0..n_steps {
        skeleton_step(coeffs, &decay, dt, &mut z, &mut b);
        states.push(HVector::new(z.clone()));
    }
    Ok(DeterministicPath { times: (0..=n_steps).map(|k| k as f64 * dt).collect(), states })
}

/// Flow Lipschitz constants `kappa(s)` over random start pairs in the ball,
/// with the discrete Gronwall bound `(e^{-alpha_1 dt}(1 + dt L_b))^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProbe {
    pub times: Vec<f64>,
    pub kappa: Vec<f64>,
    pub bound: Vec<f64>,
}

pub fn skeleton_lipschitz_probe(
    coeffs: &CoefficientSet,
    horizon: f64,
    n_steps: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<LipschitzProbe> {
    let ball = crate::spectral::BallSampler::for_model(&coeffs.model);
    let n = coeffs.n_modes();
    let mut kappa = vec![0.0f64; n_steps + 1];
    for k in 0..n_pairs {
        let (a, b) = ball.pair(seed, k);
        if a.iter().zip(&b).all(|(p, q)| p == q) {
            continue;
        }
        let pa = skeleton_solve(coeffs, &HVector::new(a.clone()), horizon, n_steps)?;
        let pb = skeleton_solve(coeffs, &HVector::new(b.clone()), horizon, n_steps)?;
        let d0 = crate::spectral::norm(&a.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>());
        for (j, (x, y)) in pa.states.iter().zip(&pb.states).enumerate() {
            kappa[j] = kappa[j].max(x.distance(y) / d0);
        }
    }
    let dt = horizon / n_steps as f64;
    let a1 = coeffs.model.alpha().iter().cloned().fold(f64::INFINITY, f64::min);
    let lb = coeffs.drift.lipschitz(n);
    let step = (-a1 * dt).exp() * (1.0 + dt * lb);
    let bound = (0..=n_steps).map(|k| step.powi(k as i32)).collect();
    Ok(LipschitzProbe { times: (0..=n_steps).map(|k| k as f64 * dt).collect(), kappa, bound })
}

/// Discretization of the controlled dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdpOptions {
    pub n_steps: usize,
    /// Steps per unit time of the nested skeleton `Z^{X(s)}(t - s)`.
    pub inner_steps_per_unit: usize,
    pub penalty_start: f64,
    pub penalty_growth: f64,
    pub max_outer: usize,
    pub max_inner: u64,
    /// Required `||X(t) - target||` (or distance to the target ball).
    pub gap_tol: f64,
    /// Central-difference step for the nested-skeleton derivative.
    pub fd_step: f64,
    pub lbfgs_memory: usize,
}

impl Default for LdpOptions {
    fn default() -> Self {
        Self {
            n_steps: 100,
            inner_steps_per_unit: 40,
            penalty_start: 1.0,
            penalty_growth: 10.0,
            max_outer: 10,
            max_inner: 400,
            gap_tol: 1e-5,
            fd_step: 1e-6,
            lbfgs_memory: 10,
        }
    }
}

impl LdpOptions {
    pub fn validate(&self) -> Result<()> {
        ensure(self.n_steps >= 1 && self.inner_steps_per_unit >= 1, || "step counts must be >= 1".into())?;
        ensure(self.penalty_start > 0.0 && self.penalty_growth > 1.0, || {
            "penalty_start must be positive and penalty_growth > 1".into()
        })?;
        ensure(self.max_outer >= 1 && self.max_inner >= 1, || "iteration limits must be >= 1".into())?;
        ensure(self.gap_tol > 0.0 && self.fd_step > 0.0, || "gap_tol and fd_step must be positive".into())?;
        ensure(self.lbfgs_memory >= 1, || "lbfgs_memory must be >= 1".into())
    }
}

/// Controlled dynamics
/// `X' = A X + b(X) + sigma(X, g(Z^X(t - s))) phi`,
/// stepped as `X_{k+1} = e^{dt A}(X_k + dt b(X_k)) + sigma_k (w0 phi_k + w1 phi_{k+1})`,
/// where `(w0, w1)` integrate `e^{(s_{k+1} - r) A}` against the linear
/// interpolant of `phi` exactly.
struct Dynamics<'a> {
    coeffs: &'a CoefficientSet,
    x0: Vec<f64>,
    t: f64,
    n_steps: usize,
    dt: f64,
    decay: Vec<f64>,
    w0: Vec<f64>,
    w1: Vec<f64>,
    inner: usize,
    fd_step: f64,
}

/// Forward sweep with what the adjoint needs.
struct Sweep {
    states: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    /// `d sigma_i / d x_i` and `d sigma_i / d r`.
    dsx: Vec<Vec<f64>>,
    dsr: Vec<Vec<f64>>,
    /// `d r / d x` of the nested skeleton value, when `delta > 0`.
    drdx: Vec<Vec<f64>>,
    db: Vec<Vec<f64>>,
}

impl<'a> Dynamics<'a> {
    fn new(coeffs: &'a CoefficientSet, x: &[f64], t: f64, opts: &LdpOptions) -> Result<Self> {
        opts.validate()?;
        ensure(t > 0.0 && t.is_finite(), || format!("horizon must be positive, got {t}"))?;
        if x.len() != coeffs.n_modes() {
            return Err(Error::DimensionMismatch { expected: coeffs.n_modes(), got: x.len() });
        }
        let dt = t / opts.n_steps as f64;
        let (w0, w1) = coeffs.model.alpha().iter().map(|a| crate::quadrature::linear_conv_weights(*a, dt)).unzip();
        Ok(Self {
            coeffs,
            x0: x.to_vec(),
            t,
            n_steps: opts.n_steps,
            dt,
            decay: decays(coeffs, dt),
            w0,
            w1,
            inner: opts.inner_steps_per_unit,
            fd_step: opts.fd_step,
        })
    }

    fn n(&self) -> usize {
        self.x0.len()
    }

    /// `g(Z^y(t - s_k))`.
    fn nested(&self, y: &[f64], k: usize) -> f64 {
        let horizon = self.t - k as f64 * self.dt;
        let steps = ((self.inner as f64 * horizon).ceil() as usize).max(1);
        self.coeffs.g.value(&skeleton_endpoint(self.coeffs, y, horizon, steps))
    }

    /// Forward pass on node values `phi` (row-major `(n_steps + 1) x n`).
    fn forward(&self, phi: &[f64], with_derivs: bool) -> Result<Sweep> {
        let n = self.n();
        let nonlinear = self.coeffs.delta != 0.0;
        let mut x = self.x0.clone();
        let mut out = Sweep {
            states: vec![x.clone()],
            sigma: Vec::with_capacity(self.n_steps),
            dsx: Vec::new(),
            dsr: Vec::new(),
            drdx: Vec::new(),
            db: Vec::new(),
        };
        let mut b = vec![0.0; n];
        let mut sig = vec![0.0; n];
        for k in 0..self.n_steps {
            let r = if nonlinear { self.nested(&x, k) } else { 0.0 };
            self.coeffs.sigma_into(&x, r, &mut sig)?;
            if with_derivs {
                let mut dx = vec![0.0; n];
                let mut dr = vec![0.0; n];
                let mut jb = vec![0.0; n];
                if nonlinear {
                    self.coeffs.sigma_partials(&x, r, &sig, &mut dx, &mut dr);
                    let mut grad = vec![0.0; n];
                    let mut y = x.clone();
                    for j in 0..n {
                        let h = self.fd_step * (1.0 + x[j].abs());
                        y[j] = x[j] + h;
                        let up = self.nested(&y, k);
                        y[j] = x[j] - h;
                        let dn = self.nested(&y, k);
                        y[j] = x[j];
                        grad[j] = (up - dn) / (2.0 * h);
                    }
                    out.drdx.push(grad);
                }
                self.coeffs.drift.jacobian_diag(&x, &mut jb);
                out.dsx.push(dx);
                out.dsr.push(dr);
                out.db.push(jb);
            }
            self.coeffs.drift.eval(&x, &mut b);
            for i in 0..n {
                let v = self.w0[i] * phi[k * n + i] + self.w1[i] * phi[(k + 1) * n + i];
                x[i] = self.decay[i] * (x[i] + self.dt * b[i]) + sig[i] * v;
                if !x[i].is_finite() {
                    return Err(Error::NonFinite(format!("controlled state of mode {i} at step {k}")));
                }
            }
            out.sigma.push(sig.clone());
            out.states.push(x.clone());
        }
        Ok(out)
    }

    /// Gradient of `P(X_N)` with respect to the node values of `phi`, given
    /// `dP/dX_N`.
    fn adjoint(&self, phi: &[f64], sweep: &Sweep, p_end: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut grad = vec![0.0; phi.len()];
        let mut p = p_end.to_vec();
        for k in (0..self.n_steps).rev() {
            let sig = &sweep.sigma[k];
            for i in 0..n {
                grad[k * n + i] += p[i] * sig[i] * self.w0[i];
                grad[(k + 1) * n + i] += p[i] * sig[i] * self.w1[i];
            }
            let mut next = vec![0.0; n];
            let mut through_r = 0.0;
            for i in 0..n {
                let v = self.w0[i] * phi[k * n + i] + self.w1[i] * phi[(k + 1) * n + i];
                next[i] = p[i] * (self.decay[i] * (1.0 + self.dt * sweep.db[k][i]) + sweep.dsx[k][i] * v);
                through_r += p[i] * sweep.dsr[k][i] * v;
            }
            if let Some(dr) = sweep.drdx.get(k) {
                for j in 0..n {
                    next[j] += through_r * dr[j];
                }
            }
            p = next;
        }
        grad
    }
}

fn path_from(times: Vec<f64>, states: Vec<Vec<f64>>) -> DeterministicPath {
    DeterministicPath { times, states: states.into_iter().map(HVector::new).collect() }
}

/// Controlled path `X_phi`. The control is sampled at the uniform grid of
/// `opts.n_steps` steps over `[0, t]`.
pub fn controlled_solve(
    coeffs: &CoefficientSet,
    x: &HVector,
    t: f64,
    control: &ControlPath,
    opts: &LdpOptions,
) -> Result<DeterministicPath> {
    let dy = Dynamics::new(coeffs, x.as_slice(), t, opts)?;
    if control.n_modes() != dy.n() {
        return Err(Error::DimensionMismatch { expected: dy.n(), got: control.n_modes() });
    }
    let phi = sample_control(control, dy.n(), t, opts.n_steps);
    let sweep = dy.forward(&phi, false)?;
    Ok(path_from(grid(t, opts.n_steps), sweep.states))
}

fn grid(t: f64, n_steps: usize) -> Vec<f64> {
    (0..=n_steps).map(|k| t * k as f64 / n_steps as f64).collect()
}

fn sample_control(control: &ControlPath, n: usize, t: f64, n_steps: usize) -> Vec<f64> {
    let mut phi = vec![0.0; (n_steps + 1) * n];
    for (k, s) in grid(t, n_steps).into_iter().enumerate() {
        control.at(s, &mut phi[k * n..(k + 1) * n]);
    }
    phi
}

/// `(1/2) int ||phi||^2 ds` by the trapezoid rule.
pub fn action_eval(control: &ControlPath) -> f64 {
    0.5 * control.l2_norm_sq
}

/// Endpoint condition for the action minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointEvent {
    /// `X(t) = target`.
    Point { target: HVector },
    /// `||X(t) - target|| <= radius`.
    Ball { target: HVector, radius: f64 },
}

impl EndpointEvent {
    fn target(&self) -> &HVector {
        match self {
            EndpointEvent::Point { target } | EndpointEvent::Ball { target, .. } => target,
        }
    }

    /// Constraint violation and its gradient in `X(t)`.
    fn violation(&self, end: &[f64]) -> (f64, Vec<f64>) {
        let d: Vec<f64> = end.iter().zip(self.target().as_slice()).map(|(a, b)| a - b).collect();
        let r = crate::spectral::norm(&d);
        match self {
            EndpointEvent::Point { .. } => {
                let g = if r > 0.0 { d.iter().map(|v| v / r).collect() } else { vec![0.0; d.len()] };
                (r, g)
            }
            EndpointEvent::Ball { radius, .. } => {
                if r <= *radius {
                    (0.0, vec![0.0; d.len()])
                } else {
                    (r - radius, d.iter().map(|v| v / r).collect())
                }
            }
        }
    }
}

/// One outer iteration of the penalty continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyStep {
    pub penalty: f64,
    pub action: f64,
    pub gap: f64,
    pub inner_iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionValue {
    pub value: f64,
    pub control: ControlPath,
    pub endpoint: HVector,
    /// Distance of `X(t)` to the target point or ball.
    pub endpoint_gap: f64,
    pub converged: bool,
    pub trace: Vec<PenaltyStep>,
}

struct PenaltyProblem<'a> {
    dy: &'a Dynamics<'a>,
    event: &'a EndpointEvent,
    mu: f64,
    /// `sqrt` of the trapezoid weight of each node.
    scale: Vec<f64>,
}

impl PenaltyProblem<'_> {
    fn to_phi(&self, psi: &[f64]) -> Vec<f64> {
        let n = self.dy.n();
        psi.iter().enumerate().map(|(j, v)| v / self.scale[j / n]).collect()
    }

    fn eval(&self, psi: &[f64], grad: bool) -> Result<(f64, Vec<f64>)> {
        let phi = self.to_phi(psi);
        let sweep = self.dy.forward(&phi, grad)?;
        let (v, dv) = self.event.violation(sweep.states.last().expect("nonempty"));
        let cost = 0.5 * psi.iter().map(|p| p * p).sum::<f64>() + 0.5 * self.mu * v * v;
        if !grad {
            return Ok((cost, Vec::new()));
        }
        let p_end: Vec<f64> = dv.iter().map(|d| self.mu * v * d).collect();
        let g_phi = self.dy.adjoint(&phi, &sweep, &p_end);
        let n = self.dy.n();
        let g = psi.iter().enumerate().map(|(j, p)| p + g_phi[j] / self.scale[j / n]).collect();
        Ok((cost, g))
    }
}

impl argmin::core::CostFunction for PenaltyProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p, false)?.0)
    }
}

impl argmin::core::Gradient for PenaltyProblem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(p, true)?.1)
    }
}

/// Minimizes `(1/2) int ||phi||^2` over controls whose path ends in the
/// event, by a quadratic-penalty continuation with L-BFGS inner solves and
/// adjoint gradients.
pub fn minimize_action(
    coeffs: &CoefficientSet,
    x: &HVector,
    t: f64,
    event: &EndpointEvent,
    opts: &LdpOptions,
) -> Result<ActionValue> {
    use argmin::core::{Executor, State};
    use argmin::solver::linesearch::MoreThuenteLineSearch;
    use argmin::solver::quasinewton::LBFGS;

    let dy = Dynamics::new(coeffs, x.as_slice(), t, opts)?;
    let n = dy.n();
    if event.target().len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: event.target().len() });
    }
    if let EndpointEvent::Ball { radius, .. } = event {
        ensure(*radius >= 0.0, || "event radius must be >= 0".into())?;
    }
    let times = grid(t, opts.n_steps);
    let scale: Vec<f64> = (0..=opts.n_steps)
        .map(|k| {
            let w = if k == 0 || k == opts.n_steps { 0.5 * dy.dt } else { dy.dt };
            w.sqrt()
        })
        .collect();
    let mut psi = vec![0.0; (opts.n_steps + 1) * n];
    let mut mu = opts.penalty_start;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut last_gap;
    {
        let sweep = dy.forward(&psi, false)?;
        last_gap = event.violation(sweep.states.last().expect("nonempty")).0;
        if last_gap <= opts.gap_tol {
            converged = true;
            trace.push(PenaltyStep { penalty: 0.0, action: 0.0, gap: last_gap, inner_iterations: 0 });
        }
    }
    let mut outer = 0;
    while !converged && outer < opts.max_outer {
        outer += 1;
        let problem = PenaltyProblem { dy: &dy, event, mu, scale: scale.clone() };
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), opts.lbfgs_memory)
            .with_tolerance_grad(1e-10)
            .map_err(|e| Error::Optimizer(e.to_string()))?
            .with_tolerance_cost(1e-14)
            .map_err(|e| Error::Optimizer(e.to_string()))?;
        let res = Executor::new(problem, solver)
            .configure(|s| s.param(psi.clone()).max_iters(opts.max_inner))
            .run()
            .map_err(|e| Error::Optimizer(e.to_string()))?;
        let iters = res.state().get_iter();
        if let Some(best) = res.state().get_best_param() {
            psi = best.clone();
        }
        let probe = PenaltyProblem { dy: &dy, event, mu, scale: scale.clone() };
        let phi = probe.to_phi(&psi);
        let sweep = dy.forward(&phi, false)?;
        last_gap = event.violation(sweep.states.last().expect("nonempty")).0;
        let action = 0.5 * psi.iter().map(|p| p * p).sum::<f64>();
        trace.push(PenaltyStep { penalty: mu, action, gap: last_gap, inner_iterations: iters });
        if last_gap <= opts.gap_tol {
            converged = true;
        } else {
            mu *= opts.penalty_growth;
        }
    }
    let phi: Vec<f64> = psi.iter().enumerate().map(|(j, v)| v / scale[j / n]).collect();
    let values: Vec<HVector> = phi.chunks(n).map(|c| HVector::new(c.to_vec())).collect();
    let control = ControlPath::new(times, values)?;
    let sweep = dy.forward(&phi, false)?;
    let endpoint = HVector::new(sweep.states.last().expect("nonempty").clone());
    Ok(ActionValue {
        value: action_eval(&control),
        control,
        endpoint,
        endpoint_gap: last_gap,
        converged,
        trace,
    })
}

/// One noise level of the Monte-Carlo rate probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdpLevel {
    pub epsilon: f64,
    pub hits: usize,
    pub n_paths: usize,
    pub probability: f64,
    /// `-eps log P`; infinite without hits.
    pub rate: f64,
    /// Exact Gaussian probability when the endpoint law is Gaussian (one linear mode).
    pub oracle_probability: Option<f64>,
    pub oracle_rate: Option<f64>,
    /// `|rate - I| / I` against the ball-minimized action.
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdpMcReport {
    pub target: HVector,
    pub radius: f64,
    pub levels: Vec<LdpLevel>,
    /// Minimized action over endpoints in the ball.
    pub ball_action: f64,
    pub ball_action_converged: bool,
    /// Closed-form ball-minimized action for one linear mode.
    pub oracle_action: Option<f64>,
    /// Fit `-eps log P = limit + slope eps` over levels with hits.
    pub limit: f64,
    pub slope: f64,
    /// `|limit - ball_action| / ball_action`.
    pub limit_gap: f64,
    pub min_hits: usize,
    pub zero_hit_levels: Vec<f64>,
    /// Tolerance on `limit_gap`.
    pub gap_tol: f64,
    pub min_hits_required: usize,
    pub pass: bool,
}

/// Endpoint law `N(mean, var)` of the linear one-mode dynamics.
fn linear_one_mode_law(coeffs: &CoefficientSet, x: &[f64], t: f64, eps: f64) -> Option<(f64, f64)> {
    if coeffs.n_modes() != 1 || coeffs.delta != 0.0 || !coeffs.drift.is_zero() {
        return None;
    }
    let a = coeffs.model.alpha()[0];
    let g = coeffs.model.gamma()[0];
    Some(((-a * t).exp() * x[0], eps * g * -(-2.0 * a * t).exp_m1() / (2.0 * a)))
}

/// `P(|N(mean, var) - c| <= r)`.
pub fn gaussian_interval_probability(mean: f64, var: f64, c: f64, r: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    if var <= 0.0 {
        return if (mean - c).abs() <= r { 1.0 } else { 0.0 };
    }
    let sd = var.sqrt();
    let z = Normal::standard();
    let hi = (c + r - mean) / sd;
    let lo = (c - r - mean) / sd;
    // Use upper tails when the interval sits above the mean to keep precision.
    if lo > 0.0 {
        z.sf(lo) - z.sf(hi)
    } else {
        z.cdf(hi) - z.cdf(lo)
    }
}

/// Monte-Carlo estimate of `P(||X_eps(t) - target|| <= radius)` along
/// `epsilons`, compared with the minimized action over the ball.
/// `fields[e]` is the solution field for `epsilons[e]` (needed when `delta > 0`).
#[allow(clippy::too_many_arguments)]
pub fn ldp_mc_probe(
    coeffs: &CoefficientSet,
    fields: &[Option<&dyn crate::spde::SolutionField>],
    x: &HVector,
    t: f64,
    target: &HVector,
    radius: f64,
    epsilons: &[f64],
    cfg: &crate::spde::SimConfig,
    opts: &LdpOptions,
) -> Result<LdpMcReport> {
    ensure(epsilons.len() >= 4, || "the rate probe needs at least four noise levels".into())?;
    ensure(epsilons.iter().all(|e| *e > 0.0), || "noise levels must be positive".into())?;
    ensure(epsilons.windows(2).all(|w| w[0] > w[1]), || "noise levels must be decreasing".into())?;
    if fields.len() != epsilons.len() {
        return Err(Error::DimensionMismatch { expected: epsilons.len(), got: fields.len() });
    }
    ensure(radius > 0.0, || "event radius must be positive".into())?;
    let event = EndpointEvent::Ball { target: target.clone(), radius };
    let best = minimize_action(coeffs, x, t, &event, opts)?;
    let ball_action = best.value;
    let oracle_action = linear_one_mode_law(coeffs, x.as_slice(), t, 1.0)
        .map(|(m, q)| ((m - target[0]).abs() - radius).max(0.0).powi(2) / (2.0 * q));
    let mut levels = Vec::new();
    for (e, f) in epsilons.iter().zip(fields) {
        let c = crate::spde::SimConfig { epsilon: *e, ..cfg.clone() };
        let hits = crate::spde::endpoint_hit_count(coeffs, *f, x.as_slice(), t, &c, target.as_slice(), radius)?;
        let p = hits as f64 / cfg.n_paths as f64;
        let rate = if hits > 0 { -e * p.ln() } else { f64::INFINITY };
        let oracle_probability = linear_one_mode_law(coeffs, x.as_slice(), t, *e)
            .map(|(m, v)| gaussian_interval_probability(m, v, target[0], radius));
        levels.push(LdpLevel {
            epsilon: *e,
            hits,
            n_paths: cfg.n_paths,
            probability: p,
            rate,
            oracle_probability,
            oracle_rate: oracle_probability.map(|q| -e * q.ln()),
            relative_gap: (rate - ball_action).abs() / ball_action,
        });
    }
    let usable: Vec<&LdpLevel> = levels.iter().filter(|l| l.hits > 0).collect();
    let (limit, slope) = if usable.len() >= 2 {
        let xs: Vec<f64> = usable.iter().map(|l| l.epsilon).collect();
        let ys: Vec<f64> = usable.iter().map(|l| l.rate).collect();
        crate::stats::linear_fit(&xs, &ys)?
    } else {
        (f64::NAN, f64::NAN)
    };
    let limit_gap = (limit - ball_action).abs() / ball_action;
    let min_hits = levels.iter().map(|l| l.hits).min().unwrap_or(0);
    let zero_hit_levels = levels.iter().filter(|l| l.hits == 0).map(|l| l.epsilon).collect();
    let gap_tol = 0.25;
    let min_hits_required = 30;
    Ok(LdpMcReport {
        target: target.clone(),
        radius,
        pass: min_hits >= min_hits_required && limit_gap <= gap_tol,
        levels,
        ball_action,
        ball_action_converged: best.converged,
        oracle_action,
        limit,
        slope,
        limit_gap,
        min_hits,
        zero_hit_levels,
        gap_tol,
        min_hits_required,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    /// `sup ||X_1 - X_2|| / ||phi_1 - phi_2||_{L^2}` per pair; 0 for equal controls.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

/// Continuity of `phi -> X_phi` on pairs of controls.
pub fn continuity_probe(
    coeffs: &CoefficientSet,
    x: &HVector,
    t: f64,
    pairs: &[(ControlPath, ControlPath)],
    opts: &LdpOptions,
) -> Result<ContinuityReport> {
    let mut ratios = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let pa = controlled_solve(coeffs, x, t, a, opts)?;
        let pb = controlled_solve(coeffs, x, t, b, opts)?;
        let num = pa.sup_distance(&pb);
        let den = a.difference(b)?.l2_norm_sq.sqrt();
        ratios.push(if den == 0.0 { if num == 0.0 { 0.0 } else { f64::INFINITY } } else { num / den });
    }
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(ContinuityReport { ratios, max_ratio })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakConvergenceReport {
    pub frequencies: Vec<f64>,
    pub control_norm_sq: Vec<f64>,
    /// `||X_{phi_n}(t) - Z(t)||`.
    pub endpoint_distance: Vec<f64>,
}

/// Oscillating controls `phi_n(s) = amplitude sin(n s) e_1` converge weakly
/// to zero; their endpoints should approach the skeleton endpoint.
pub fn weak_convergence_probe(
    coeffs: &CoefficientSet,
    x: &HVector,
    t: f64,
    amplitude: f64,
    frequencies: &[f64],
    opts: &LdpOptions,
) -> Result<WeakConvergenceReport> {
    let n = coeffs.n_modes();
    let skel = skeleton_solve(coeffs, x, t, opts.n_steps)?;
    let mut norms = Vec::new();
    let mut dist = Vec::new();
    for &f in frequencies {
        let c = ControlPath::from_fn(n, t, opts.n_steps, |s| {
            let mut v = vec![0.0; n];
            v[0] = amplitude * (f * s).sin();
            v
        })?;
        let p = controlled_solve(coeffs, x, t, &c, opts)?;
        norms.push(c.l2_norm_sq);
        dist.push(p.endpoint().distance(skel.endpoint()));
    }
    Ok(WeakConvergenceReport { frequencies: frequencies.to_vec(), control_norm_sq: norms, endpoint_distance: dist })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientSet, Drift, FFamily, FKind, SModulation};
    use crate::field::FieldSpec;
    use crate::spectral::SpectralModel;
    use approx::assert_relative_eq;

    fn ou1() -> CoefficientSet {
        let m = SpectralModel::new(vec![1.0], vec![1.0], 2.0).unwrap();
        CoefficientSet::linear(m, FieldSpec::tanh_first(1)).unwrap()
    }

    fn one_mode_nonlinear(delta: f64) -> CoefficientSet {
        let m = SpectralModel::new(vec![1.0], vec![1.0], 2.0).unwrap();
        CoefficientSet::new(
            m,
            Drift::TanhModewise { scale: 0.3, decay: 0.0 },
            FieldSpec::tanh_first(1),
            1.0,
            FFamily::new(vec![1.0], FKind::Tanh, SModulation::Unit).unwrap(),
            delta,
        )
        .unwrap()
    }

    /// Simpson rule with `m` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
        let h = (b - a) / m as f64;
        let mut s = f(a) + f(b);
        for k in 1..m {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn action_of_unit_control() {
        let c = ControlPath::from_fn(2, 1.0, 10, |_| vec![1.0, 0.0]).unwrap();
        assert_relative_eq!(action_eval(&c), 0.5, epsilon = 1e-15);
        assert!(c.within(1.0) && !c.within(0.99));
        assert_eq!(c.l2_norm_sq, c.recompute_l2());
    }

    #[test]
    fn action_trapezoid_refines_at_second_order() {
        let exact = 0.5 * (0.5 - (2.0f64).sin() / 4.0);
        let err = |m| (action_eval(&ControlPath::from_fn(1, 1.0, m, |s| vec![s.sin()]).unwrap()) - exact).abs();
        let (e1, e2) = (err(20), err(40));
        assert!((e1 / e2).log2() > 1.9, "{e1} {e2}");
    }

    #[test]
    fn skeleton_linear_decay() {
        let c = ou1();
        let p = skeleton_solve(&c, &HVector::new(vec![1.0]), 2f64.ln(), 7).unwrap();
        assert_relative_eq!(p.endpoint()[0], 0.5, epsilon = 1e-14);
        let z = skeleton_solve(&CoefficientSet::reference(0.1).unwrap(), &HVector::zeros(2), 1.0, 50).unwrap();
        assert!(z.states.iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn skeleton_lipschitz_within_gronwall() {
        let c = CoefficientSet::reference(0.1).unwrap();
        let p = skeleton_lipschitz_probe(&c, 1.0, 50, 200, 3).unwrap();
        for (k, b) in p.kappa.iter().zip(&p.bound) {
            assert!(*k <= b * (1.0 + 1e-12), "{k} > {b}");
        }
        assert_relative_eq!(p.kappa[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_control_gives_skeleton() {
        let c = CoefficientSet::reference(0.2).unwrap();
        let x = HVector::new(vec![0.4, -0.3]);
        let opts = LdpOptions { n_steps: 60, ..Default::default() };
        let z = skeleton_solve(&c, &x, 0.8, 60).unwrap();
        let p = controlled_solve(&c, &x, 0.8, &ControlPath::zeros(2, 0.8, 60).unwrap(), &opts).unwrap();
        assert_eq!(p.sup_distance(&z), 0.0);
    }

    #[test]
    fn linear_superposition() {
        let m = SpectralModel::laplacian(2, 1.0).unwrap();
        let c = CoefficientSet::linear(m, FieldSpec::tanh_first(2)).unwrap();
        let opts = LdpOptions { n_steps: 40, ..Default::default() };
        let x = HVector::new(vec![0.2, 0.1]);
        let zero = HVector::zeros(2);
        let a = ControlPath::from_fn(2, 1.0, 40, |s| vec![s.cos(), 2.0 * s]).unwrap();
        let b = ControlPath::from_fn(2, 1.0, 40, |s| vec![-1.0, s * s]).unwrap();
        let sum = ControlPath::new(a.times.clone(), a.values.iter().zip(&b.values).map(|(p, q)| p.add(q)).collect()).unwrap();
        let ps = controlled_solve(&c, &x, 1.0, &sum, &opts).unwrap();
        let pa = controlled_solve(&c, &x, 1.0, &a, &opts).unwrap();
        let pb = controlled_solve(&c, &zero, 1.0, &b, &opts).unwrap();
        for k in 0..=40 {
            let d = ps.states[k].sub(&pa.states[k].add(&pb.states[k]));
            assert!(d.norm() < 1e-10);
        }
    }

    #[test]
    fn duhamel_linear_control() {
        // X' = -X + s, X(0) = x: X(t) = e^{-t} x + t - 1 + e^{-t}.
        let c = ou1();
        let opts = LdpOptions { n_steps: 13, ..Default::default() };
        let x = 0.3;
        let ctl = ControlPath::from_fn(1, 1.5, 13, |s| vec![s]).unwrap();
        let p = controlled_solve(&c, &HVector::new(vec![x]), 1.5, &ctl, &opts).unwrap();
        for (t, s) in p.times.iter().zip(&p.states) {
            let want = (-t).exp() * x + t - 1.0 + (-t).exp();
            assert!((s[0] - want).abs() < 1e-13, "{t}: {} vs {want}", s[0]);
        }
    }

    /// Discrete oracle: `X_N = sum_j c_j phi_j` for the linear one-mode model;
    /// the trapezoid-weighted least-norm solution of `X_N = 1` has action
    /// `1 / (2 sum_j c_j^2 / W_j)`.
    fn discrete_lq_oracle(t: f64, n: usize) -> f64 {
        let dt = t / n as f64;
        let kern = |r: f64| (-(dt - r)).exp();
        let w0 = simpson(|r| kern(r) * (1.0 - r / dt), 0.0, dt, 2000);
        let w1 = simpson(|r| kern(r) * r / dt, 0.0, dt, 2000);
        let mut c = vec![0.0; n + 1];
        for k in 0..n {
            let d = (-(dt * (n - 1 - k) as f64)).exp();
            c[k] += d * w0;
            c[k + 1] += d * w1;
        }
        let s: f64 = c
            .iter()
            .enumerate()
            .map(|(j, cj)| {
                let w = if j == 0 || j == n { 0.5 * dt } else { dt };
                cj * cj / w
            })
            .sum();
        1.0 / (2.0 * s)
    }

    #[test]
    fn linear_quadratic_minimum() {
        let c = ou1();
        let opts = LdpOptions { n_steps: 100, gap_tol: 1e-7, ..Default::default() };
        let t = 2f64.ln();
        let ev = EndpointEvent::Point { target: HVector::new(vec![1.0]) };
        let r = minimize_action(&c, &HVector::zeros(1), t, &ev, &opts).unwrap();
        assert!(r.converged);
        let oracle = discrete_lq_oracle(t, 100);
        assert_relative_eq!(r.value, oracle, max_relative = 1e-5);
        assert_relative_eq!(r.value, 4.0 / 3.0, max_relative = 1e-2);
        // Optimal control is proportional to e^{-(t - s)}.
        let ratio = r.control.values[100][0] / r.control.values[0][0];
        assert_relative_eq!(ratio, t.exp(), max_relative = 1e-2);
    }

    #[test]
    fn long_horizon_cost_tends_to_one() {
        let c = ou1();
        let opts = LdpOptions { n_steps: 200, gap_tol: 1e-7, ..Default::default() };
        let ev = EndpointEvent::Point { target: HVector::new(vec![1.0]) };
        let r = minimize_action(&c, &HVector::zeros(1), 6.0, &ev, &opts).unwrap();
        assert_relative_eq!(r.value, 1.0 / (1.0 - (-12f64).exp()), max_relative = 1e-2);
    }

    #[test]
    fn skeleton_target_costs_nothing() {
        let c = CoefficientSet::reference(0.1).unwrap();
        let x = HVector::new(vec![0.5, 0.2]);
        let opts = LdpOptions { n_steps: 50, ..Default::default() };
        let z = skeleton_solve(&c, &x, 1.0, 50).unwrap();
        let r = minimize_action(&c, &x, 1.0, &EndpointEvent::Point { target: z.endpoint().clone() }, &opts).unwrap();
        assert!(r.value <= 1e-8 && r.converged);
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let c = one_mode_nonlinear(0.3);
        let opts = LdpOptions { n_steps: 12, ..Default::default() };
        let dy = Dynamics::new(&c, &[0.2], 0.7, &opts).unwrap();
        let phi: Vec<f64> = (0..13).map(|k| 0.5 + 0.1 * (k as f64).sin()).collect();
        let sw = dy.forward(&phi, true).unwrap();
        let g = dy.adjoint(&phi, &sw, &[1.0]);
        for j in 0..13 {
            let h = 1e-6;
            let mut p = phi.clone();
            p[j] += h;
            let up = *dy.forward(&p, false).unwrap().states.last().unwrap().first().unwrap();
            p[j] -= 2.0 * h;
            let dn = *dy.forward(&p, false).unwrap().states.last().unwrap().first().unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn penalty_trace_is_monotone() {
        let c = CoefficientSet::reference(0.2).unwrap();
        let opts = LdpOptions { n_steps: 40, ..Default::default() };
        let ev = EndpointEvent::Point { target: HVector::new(vec![0.6, -0.2]) };
        let r = minimize_action(&c, &HVector::zeros(2), 1.0, &ev, &opts).unwrap();
        assert!(r.converged && r.trace.len() >= 2);
        for w in r.trace.windows(2) {
            assert!(w[1].action >= w[0].action * (1.0 - 1e-8), "{:?}", r.trace);
            assert!(w[1].gap <= w[0].gap * (1.0 + 1e-8), "{:?}", r.trace);
        }
    }

    #[test]
    fn ball_event_matches_closed_form() {
        let c = ou1();
        let opts = LdpOptions { n_steps: 100, gap_tol: 1e-7, ..Default::default() };
        let t = 2f64.ln();
        let ev = EndpointEvent::Ball { target: HVector::new(vec![0.6]), radius: 0.1 };
        let r = minimize_action(&c, &HVector::zeros(1), t, &ev, &opts).unwrap();
        assert_relative_eq!(r.value, 0.25 / (2.0 * 0.375), max_relative = 1e-2);
        assert!((r.endpoint[0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn gaussian_interval_oracle() {
        assert_relative_eq!(gaussian_interval_probability(0.0, 1.0, 0.0, 1.96), 0.95, epsilon = 1e-4);
        let p = gaussian_interval_probability(0.0, 1.0, 10.0, 1.0);
        // P(9 <= Z <= 11) = Q(9) - Q(11), Q(9) = 1.1286e-19.
        assert_relative_eq!(p, 1.1286e-19, max_relative = 1e-3);
    }

    fn linear_probe(target: f64, radius: f64, n_paths: usize) -> LdpMcReport {
        let cfg = crate::spde::SimConfig { n_paths, n_steps: 10, seed: 11, ..Default::default() };
        let eps = [0.2, 0.1, 0.075, 0.05];
        ldp_mc_probe(&ou1(), &[None; 4], &HVector::zeros(1), 2f64.ln(), &HVector::new(vec![target]), radius, &eps, &cfg, &LdpOptions::default()).unwrap()
    }

    #[test]
    fn rate_probe_matches_gaussian_law() {
        let r = linear_probe(0.6, 0.1, 200_000);
        assert_relative_eq!(r.oracle_action.unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(r.ball_action, 1.0 / 3.0, max_relative = 1e-2);
        for l in &r.levels {
            let p = l.oracle_probability.unwrap();
            let se = (p * (1.0 - p) / l.n_paths as f64).sqrt();
            assert!((l.probability - p).abs() <= 5.0 * se, "{l:?}");
        }
    }

    #[test]
    fn skeleton_ball_rate_vanishes() {
        let r = linear_probe(0.0, 0.5, 20_000);
        assert!(r.ball_action <= 1e-12);
        let rates: Vec<f64> = r.levels.iter().map(|l| l.rate).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{rates:?}");
        assert!(rates[3] < 1e-3);
    }

    #[test]
    fn rate_non_increasing_in_radius() {
        let small = linear_probe(0.6, 0.05, 50_000);
        let large = linear_probe(0.6, 0.1, 50_000);
        for (a, b) in small.levels.iter().zip(&large.levels) {
            assert!(b.hits >= a.hits && b.rate <= a.rate);
        }
        assert!(large.ball_action < small.ball_action);
    }

    #[test]
    fn rate_probe_rejects_short_grid() {
        let cfg = crate::spde::SimConfig { n_paths: 100, ..Default::default() };
        let e = ldp_mc_probe(&ou1(), &[None; 3], &HVector::zeros(1), 1.0, &HVector::new(vec![0.5]), 0.1, &[0.2, 0.1, 0.05], &cfg, &LdpOptions::default());
        assert!(e.is_err());
    }

    #[test]
    fn continuity_ratio_linear_case() {
        let c = ou1();
        let opts = LdpOptions { n_steps: 50, ..Default::default() };
        let a = ControlPath::from_fn(1, 1.0, 50, |s| vec![s.sin()]).unwrap();
        let b = ControlPath::from_fn(1, 1.0, 50, |s| vec![1.0 - s]).unwrap();
        let rep = continuity_probe(&c, &HVector::zeros(1), 1.0, &[(a.clone(), a.clone()), (a, b)], &opts).unwrap();
        assert_eq!(rep.ratios[0], 0.0);
        assert!(rep.max_ratio <= 1.0 && rep.max_ratio > 0.0);
    }

    #[test]
    fn oscillating_controls_converge_weakly() {
        let c = CoefficientSet::reference(0.1).unwrap();
        let opts = LdpOptions { n_steps: 400, ..Default::default() };
        let rep = weak_convergence_probe(&c, &HVector::new(vec![0.2, 0.0]), 1.0, 1.0, &[4.0, 16.0, 64.0], &opts).unwrap();
        let d = &rep.endpoint_distance;
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
        assert!(rep.control_norm_sq.iter().all(|n| (n - 0.5).abs() < 0.15));
    }
}

/// `|u_eps(t, x) - g(Z^x(t))|` across noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallNoiseReport {
    pub x: HVector,
    pub t: f64,
    pub epsilons: Vec<f64>,
    pub u_values: Vec<f64>,
    /// `g(Z^x(t))`.
    pub skeleton_value: f64,
    pub deviations: Vec<f64>,
    /// Log-log slope of the deviation against `eps`; a `sqrt(eps)` rate gives 1/2.
    pub slope: f64,
}

/// Solves the quasi-linear equation at every `eps` and compares with the
/// noiseless limit along the skeleton.
pub fn small_noise_probe(
    coeffs: &CoefficientSet,
    params: &crate::solver::SolverParams,
    x: &HVector,
    t: f64,
    epsilons: &[f64],
) -> Result<SmallNoiseReport> {
    ensure(epsilons.len() >= 2 && epsilons.iter().all(|e| *e > 0.0), || {
        "need at least two positive noise levels".into()
    })?;
    ensure(t > 0.0 && t <= params.horizon, || format!("t must lie in (0, {}]", params.horizon))?;
    let steps = ((4000.0 * t).ceil() as usize).max(1);
    let z = skeleton_endpoint(coeffs, x.as_slice(), t, steps);
    let skeleton_value = coeffs.g.value(&z);
    let mut u_values = Vec::with_capacity(epsilons.len());
    for &e in epsilons {
        let p = crate::solver::SolverParams { epsilon: e, ..params.clone() };
        let (u, _) = crate::solver::solve_qlpde(coeffs, &p)?;
        u_values.push(u.value(t, x.as_slice()));
    }
    let deviations: Vec<f64> = u_values.iter().map(|u| (u - skeleton_value).abs()).collect();
    let slope = crate::stats::loglog_slope(epsilons, &deviations.iter().map(|d| d.max(1e-300)).collect::<Vec<_>>())?;
    Ok(SmallNoiseReport { x: x.clone(), t, epsilons: epsilons.to_vec(), u_values, skeleton_value, deviations, slope })
}
