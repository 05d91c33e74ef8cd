//! Path simulation of the SPDE with solution-dependent diffusion
//!
//! `dX = [A X + b(X) + sigma(X, u(t-s, X)) phi(s)] ds + sqrt(eps) sigma(X, u(t-s, X)) dW`,
//!
//! with an exponential-Euler step that treats `A` exactly per mode. Also
//! hosts the Feynman-Kac check `u(t, x) = E g(X(t))` and the probabilistic
//! fixed point built on it.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chebyshev::{node_points, ScalarField};
use crate::coefficients::CoefficientSet;
use crate::error::{ensure, Error, Result};
use crate::field::Field;
use crate::ldp::ControlPath;
use crate::ou::{OuKernel, OuQuadrature};
use crate::quadrature::graded_grid;
use crate::solver::{SpaceTimeField, Verdict};
use crate::spectral::{norm, HVector};
use crate::stats::{loglog_fit, mean_stderr, mix, pairwise_sum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    ExponentialEuler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// Paths `2j` and `2j+1` use opposite Gaussian increments.
    pub antithetic: bool,
    pub scheme: Scheme,
    /// Keep every state of every path.
    pub store_paths: bool,
    /// Radius beyond which coefficients are evaluated at the radial
    /// projection; defaults to the trusted radius of the solution field.
    pub exit_radius: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            n_paths: 10_000,
            seed: 7,
            epsilon: 0.1,
            antithetic: true,
            scheme: Scheme::ExponentialEuler,
            store_paths: false,
            exit_radius: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.n_steps >= 1, || "n_steps must be >= 1".into())?;
        ensure(self.n_paths >= 2, || "n_paths must be >= 2".into())?;
        ensure(self.epsilon >= 0.0 && self.epsilon.is_finite(), || "epsilon must be >= 0".into())?;
        if let Some(r) = self.exit_radius {
            ensure(r > 0.0, || "exit_radius must be positive".into())?;
        }
        Ok(())
    }
}

/// `u(t, x)` as seen by the simulator.
pub trait SolutionField: Send + Sync {
    fn n_modes(&self) -> usize;
    fn value(&self, t: f64, x: &[f64]) -> f64;
    /// Radius of the ball on which the field is a faithful surrogate.
    fn trusted_radius(&self) -> f64;
}

impl SolutionField for SpaceTimeField {
    fn n_modes(&self) -> usize {
        SpaceTimeField::n_modes(self)
    }

    fn value(&self, t: f64, x: &[f64]) -> f64 {
        SpaceTimeField::value(self, t, x)
    }

    fn trusted_radius(&self) -> f64 {
        self.slices[0].half_width()
    }
}

struct Work {
    p: Vec<f64>,
    b: Vec<f64>,
    sig: Vec<f64>,
    phi: Vec<f64>,
    xi: Vec<f64>,
}

impl Work {
    fn new(n: usize) -> Self {
        Self { p: vec![0.0; n], b: vec![0.0; n], sig: vec![0.0; n], phi: vec![0.0; n], xi: vec![0.0; n] }
    }
}

/// One fixed step size over `[0, t]`.
struct Engine<'a> {
    coeffs: &'a CoefficientSet,
    u: Option<&'a dyn SolutionField>,
    control: Option<&'a ControlPath>,
    t: f64,
    n_steps: usize,
    dt: f64,
    decay: Vec<f64>,
    noise: Vec<f64>,
    exit_radius: f64,
}

impl<'a> Engine<'a> {
    fn new(
        coeffs: &'a CoefficientSet,
        u: Option<&'a dyn SolutionField>,
        control: Option<&'a ControlPath>,
        t: f64,
        n_steps: usize,
        eps: f64,
        exit_radius: Option<f64>,
    ) -> Result<Self> {
        let n = coeffs.n_modes();
        ensure(t >= 0.0 && t.is_finite(), || format!("horizon must be >= 0, got {t}"))?;
        ensure(n_steps >= 1, || "n_steps must be >= 1".into())?;
        if coeffs.delta != 0.0 {
            let f = u.ok_or_else(|| Error::InvalidArgument("a solution field is required when delta > 0".into()))?;
            ensure(f.n_modes() <= n, || "solution field has more modes than the model".into())?;
        }
        if let Some(c) = control {
            if c.n_modes() != n {
                return Err(Error::DimensionMismatch { expected: n, got: c.n_modes() });
            }
        }
        let dt = t / n_steps as f64;
        let alpha = coeffs.model.alpha();
        let decay = alpha.iter().map(|a| (-a * dt).exp()).collect();
        let noise = alpha.iter().map(|a| (eps * -(-2.0 * a * dt).exp_m1() / (2.0 * a)).sqrt()).collect();
        let exit_radius = exit_radius
            .or_else(|| u.map(|f| f.trusted_radius()))
            .unwrap_or(f64::INFINITY);
        Ok(Self { coeffs, u, control, t, n_steps, dt, decay, noise, exit_radius })
    }

    fn n(&self) -> usize {
        self.decay.len()
    }

    /// `b + sigma phi` into `w.b` and `sigma` into `w.sig` at state `x`, step `k`.
    fn coefficients(&self, k: usize, x: &[f64], w: &mut Work) -> Result<bool> {
        let r = norm(x);
        let exited = r > self.exit_radius;
        let c = if exited { self.exit_radius / r } else { 1.0 };
        for (p, v) in w.p.iter_mut().zip(x) {
            *p = c * v;
        }
        let s = k as f64 * self.dt;
        let val = match (self.coeffs.delta != 0.0, self.u) {
            (true, Some(f)) => f.value(self.t - s, &w.p[..f.n_modes()]),
            _ => 0.0,
        };
        self.coeffs.sigma_into(&w.p, val, &mut w.sig)?;
        self.coeffs.drift.eval(&w.p, &mut w.b);
        if let Some(ctrl) = self.control {
            ctrl.at(s, &mut w.phi);
            for ((b, s), p) in w.b.iter_mut().zip(&w.sig).zip(&w.phi) {
                *b += s * p;
            }
        }
        Ok(exited)
    }

    /// Advances `x` by one step with standard Gaussian increments `xi`.
    fn step(&self, k: usize, x: &mut [f64], xi: &[f64], w: &mut Work) -> Result<bool> {
        let exited = self.coefficients(k, x, w)?;
        for i in 0..x.len() {
            x[i] = self.decay[i] * (x[i] + self.dt * w.b[i]) + w.sig[i] * self.noise[i] * xi[i];
            if !x[i].is_finite() {
                return Err(Error::NonFinite(format!("state of mode {i} at step {k}")));
            }
        }
        Ok(exited)
    }

    fn rng(seed: u64, idx: usize, antithetic: bool) -> (ChaCha8Rng, f64) {
        let (stream, sign) = if antithetic { (idx / 2, if idx.is_multiple_of(2) { 1.0 } else { -1.0 }) } else { (idx, 1.0) };
        (ChaCha8Rng::seed_from_u64(mix(seed, stream as u64)), sign)
    }

    fn draw(rng: &mut ChaCha8Rng, sign: f64, out: &mut [f64]) {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = sign * z;
        }
    }

    /// Runs one path, reporting every state to `obs`; returns the exit flag.
    fn run(
        &self,
        seed: u64,
        idx: usize,
        antithetic: bool,
        x: &mut [f64],
        mut obs: impl FnMut(usize, &[f64], &Work),
    ) -> Result<bool> {
        let (mut rng, sign) = Self::rng(seed, idx, antithetic);
        let mut w = Work::new(self.n());
        let mut exited = false;
        obs(0, x, &w);
        for k in 0..self.n_steps {
            Self::draw(&mut rng, sign, &mut w.xi);
            let xi = std::mem::take(&mut w.xi);
            exited |= self.step(k, x, &xi, &mut w)?;
            w.xi = xi;
            obs(k + 1, x, &w);
        }
        Ok(exited)
    }
}

/// Simulated paths from one starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub times: Vec<f64>,
    pub n_modes: usize,
    /// Row-major `(n_steps + 1) x n_modes` states per path, when stored.
    pub paths: Option<Vec<Vec<f64>>>,
    pub terminal: Vec<HVector>,
    pub g_values: Vec<f64>,
    /// Fraction of paths that left the exit ball at least once.
    pub exit_fraction: f64,
}

impl TrajectoryEnsemble {
    pub fn n_paths(&self) -> usize {
        self.terminal.len()
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Mean and standard error of `g(X(t))`; antithetic pairs are averaged first.
    pub fn g_mean_stderr(&self, antithetic: bool) -> (f64, f64) {
        paired_mean_stderr(&self.g_values, antithetic)
    }

    /// Binary dump: `u64` LE header `{n_paths, n_steps, n_modes}`, then
    /// `f64` LE states in path, step, mode order.
    pub fn write_paths_bin(&self, mut w: impl Write) -> Result<()> {
        let paths = self
            .paths
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("paths were not stored; set store_paths".into()))?;
        for h in [self.n_paths() as u64, self.n_steps() as u64, self.n_modes as u64] {
            w.write_all(&h.to_le_bytes()).map_err(|e| Error::Io(e.to_string()))?;
        }
        for p in paths {
            for v in p {
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::Io(e.to_string()))?;
            }
        }
        Ok(())
    }
}

fn paired_mean_stderr(v: &[f64], antithetic: bool) -> (f64, f64) {
    if antithetic && v.len() >= 4 {
        let pairs: Vec<f64> = v.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let (m, se) = mean_stderr(&pairs);
        // Unpaired tail element is weighted like a pair; negligible for large counts.
        (if v.len().is_multiple_of(2) { pairwise_sum(v) / v.len() as f64 } else { m }, se)
    } else {
        mean_stderr(v)
    }
}

fn check_start(coeffs: &CoefficientSet, x: &[f64]) -> Result<()> {
    if x.len() != coeffs.n_modes() {
        return Err(Error::DimensionMismatch { expected: coeffs.n_modes(), got: x.len() });
    }
    let r = norm(x);
    ensure(r <= coeffs.model.ball_radius() * (1.0 + 1e-12), || {
        format!("starting point has norm {r}, outside the ball of radius {}", coeffs.model.ball_radius())
    })
}

/// Simulates `cfg.n_paths` paths of the controlled SPDE from `x` over `[0, t]`.
pub fn spde_simulate(
    coeffs: &CoefficientSet,
    u: Option<&dyn SolutionField>,
    x: &[f64],
    t: f64,
    cfg: &SimConfig,
    control: Option<&ControlPath>,
) -> Result<TrajectoryEnsemble> {
    cfg.validate()?;
    check_start(coeffs, x)?;
    let eng = Engine::new(coeffs, u, control, t, cfg.n_steps, cfg.epsilon, cfg.exit_radius)?;
    let n = coeffs.n_modes();
    let rows: Vec<(Vec<f64>, Option<Vec<f64>>, bool)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|idx| {
            let mut state = x.to_vec();
            let mut store = cfg.store_paths.then(|| Vec::with_capacity((cfg.n_steps + 1) * n));
            let exited = eng.run(cfg.seed, idx, cfg.antithetic, &mut state, |_, s, _| {
                if let Some(v) = store.as_mut() {
                    v.extend_from_slice(s);
                }
            })?;
            Ok((state, store, exited))
        })
        .collect::<Result<_>>()?;
    let times = (0..=cfg.n_steps).map(|k| t * k as f64 / cfg.n_steps as f64).collect();
    let exits = rows.iter().filter(|r| r.2).count();
    let mut terminal = Vec::with_capacity(rows.len());
    let mut paths = cfg.store_paths.then(Vec::new);
    for (s, p, _) in rows {
        if let (Some(all), Some(p)) = (paths.as_mut(), p) {
            all.push(p);
        }
        terminal.push(HVector::new(s));
    }
    let g_values = terminal.iter().map(|s| coeffs.g.value(s.as_slice())).collect();
    Ok(TrajectoryEnsemble { times, n_modes: n, paths, terminal, g_values, exit_fraction: exits as f64 / cfg.n_paths as f64 })
}

/// Outcome of a Feynman-Kac comparison at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FKReport {
    pub x: Vec<f64>,
    pub t: f64,
    pub u_value: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    /// `(mc_mean - u_value) / mc_stderr`.
    pub z_score: f64,
    /// Mean of `g(X_fine) - g(X_coarse)` from coupled step halving.
    pub bias_estimate: f64,
    pub bias_stderr: f64,
    /// `|bias_estimate| + 2 bias_stderr`.
    pub bias_budget: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub exit_fraction: f64,
    /// `|mc_mean - u_value| <= 4 mc_stderr + bias_budget`.
    pub pass: bool,
}

/// Compares `u(t, x)` with `E g(X(t))`, estimating the time-step bias from a
/// coupled run with half as many steps.
pub fn feynman_kac_verify(
    coeffs: &CoefficientSet,
    u: &dyn SolutionField,
    x: &[f64],
    t: f64,
    cfg: &SimConfig,
) -> Result<FKReport> {
    cfg.validate()?;
    check_start(coeffs, x)?;
    let u_value = u.value(t, x);
    if t == 0.0 {
        let g = coeffs.g.value(x);
        return Ok(FKReport {
            x: x.to_vec(),
            t,
            u_value,
            mc_mean: g,
            mc_stderr: 0.0,
            z_score: if g == u_value { 0.0 } else { f64::INFINITY.copysign(g - u_value) },
            bias_estimate: 0.0,
            bias_stderr: 0.0,
            bias_budget: 0.0,
            n_paths: cfg.n_paths,
            n_steps: 0,
            exit_fraction: 0.0,
            pass: (g - u_value).abs() <= 1e-12,
        });
    }
    let fine_steps = cfg.n_steps.max(2).div_ceil(2) * 2;
    let fine = Engine::new(coeffs, Some(u), None, t, fine_steps, cfg.epsilon, cfg.exit_radius)?;
    let coarse = Engine::new(coeffs, Some(u), None, t, fine_steps / 2, cfg.epsilon, cfg.exit_radius)?;
    let n = coeffs.n_modes();
    let rows: Vec<(f64, f64, bool)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|idx| {
            let (mut rng, sign) = Engine::rng(cfg.seed, idx, cfg.antithetic);
            let mut wf = Work::new(n);
            let mut wc = Work::new(n);
            let (mut xf, mut xc) = (x.to_vec(), x.to_vec());
            let (mut xa, mut xb, mut xcomb) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            let mut exited = false;
            for k in 0..fine_steps / 2 {
                Engine::draw(&mut rng, sign, &mut xa);
                Engine::draw(&mut rng, sign, &mut xb);
                exited |= fine.step(2 * k, &mut xf, &xa, &mut wf)?;
                exited |= fine.step(2 * k + 1, &mut xf, &xb, &mut wf)?;
                for i in 0..n {
                    let d = fine.decay[i];
                    xcomb[i] = (d * xa[i] + xb[i]) / (1.0 + d * d).sqrt();
                }
                coarse.step(k, &mut xc, &xcomb, &mut wc)?;
            }
            let gf = coeffs.g.value(&xf);
            Ok((gf, gf - coeffs.g.value(&xc), exited))
        })
        .collect::<Result<_>>()?;
    let gf: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (mc_mean, mc_stderr) = paired_mean_stderr(&gf, cfg.antithetic);
    let (bias_estimate, bias_stderr) = paired_mean_stderr(&diff, cfg.antithetic);
    let bias_budget = bias_estimate.abs() + 2.0 * bias_stderr;
    let gap = mc_mean - u_value;
    Ok(FKReport {
        x: x.to_vec(),
        t,
        u_value,
        mc_mean,
        mc_stderr,
        z_score: gap / mc_stderr,
        bias_estimate,
        bias_stderr,
        bias_budget,
        n_paths: cfg.n_paths,
        n_steps: fine_steps,
        exit_fraction: rows.iter().filter(|r| r.2).count() as f64 / cfg.n_paths as f64,
        pass: gap.abs() <= 4.0 * mc_stderr + bias_budget,
    })
}

/// Grids and stopping rule of the probabilistic fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbabilisticParams {
    pub horizon: f64,
    pub slices: usize,
    pub grading: f64,
    pub degree: usize,
    /// Box half-width of the node grid; derived from the noise level when absent.
    pub half_width: Option<f64>,
    /// Simulation steps per unit time (at least two per run).
    pub steps_per_unit: usize,
    /// Paths per node and slice; the simulation config supplies seed, noise
    /// level and antithetic pairing.
    pub n_paths: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Subtract `g` of the linear OU path driven by the same noise and add
    /// back its exact mean.
    pub control_variate: bool,
    pub gh_nodes: usize,
    pub eta: f64,
    pub theta: f64,
}

impl Default for ProbabilisticParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            slices: 8,
            grading: 1.5,
            degree: 12,
            half_width: None,
            steps_per_unit: 30,
            n_paths: 400,
            tol: 1e-7,
            max_iter: 20,
            control_variate: true,
            gh_nodes: 40,
            eta: 0.9,
            theta: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilisticReport {
    /// Node sup-distance between successive iterates.
    pub sup_distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub iterations: usize,
    pub verdict: Verdict,
    /// Largest per-node standard error of the last iterate.
    pub max_stderr: f64,
    /// Largest tail-coefficient estimate of the last iterate.
    pub interpolation_tol: f64,
    /// Mean over nodes of the fraction of paths leaving the box's circumscribed ball.
    pub exit_fraction: f64,
    pub n_paths: usize,
}

/// Iterates `u_{k+1}(tau, x) = E g(X^{tau, x}(tau))` with the diffusion
/// frozen at `u_k`, on a tensor node grid. Every node reuses the same noise
/// streams, so the iteration is a deterministic map and converges like one.
pub fn probabilistic_fixed_point(
    coeffs: &CoefficientSet,
    params: &ProbabilisticParams,
    cfg: &SimConfig,
) -> Result<(SpaceTimeField, ProbabilisticReport)> {
    cfg.validate()?;
    ensure(cfg.epsilon > 0.0, || "the probabilistic fixed point needs epsilon > 0".into())?;
    ensure(params.steps_per_unit >= 1 && params.max_iter >= 1 && params.tol > 0.0 && params.n_paths >= 2, || {
        "steps_per_unit, max_iter, tol must be positive and n_paths >= 2".into()
    })?;
    let n = coeffs.n_modes();
    ensure(n <= 3, || format!("tensor node grids support up to 3 modes, got {n}"))?;
    let model = &coeffs.model;
    let half_width = match params.half_width {
        Some(h) => h,
        None => {
            let q = crate::spectral::qt_covariance(model, params.horizon, cfg.epsilon)?;
            model.ball_radius() + 6.0 * q.op_norm().sqrt()
        }
    };
    let times = graded_grid(params.horizon, params.slices, params.grading)?;
    let deg = params.degree;
    let points = node_points(n, deg, half_width);
    let box_radius = half_width * (n as f64).sqrt();
    let g_nodes: Vec<f64> = points.iter().map(|p| coeffs.g.value(p)).collect();
    let g_field = ScalarField::from_node_values(n, deg, half_width, g_nodes.clone())?;
    let wrap = |slices: Vec<ScalarField>| {
        SpaceTimeField::new(times.clone(), slices, cfg.epsilon, params.eta, params.theta, model.ball_radius())
    };

    // Exact linear means for the control variate.
    let linear_means: Vec<Vec<f64>> = if params.control_variate {
        times
            .par_iter()
            .map(|&t| {
                let k = OuKernel::new(model, t, cfg.epsilon, &OuQuadrature::gauss_hermite(params.gh_nodes))?;
                points.iter().map(|p| Ok(k.apply(&coeffs.g, p)?.value)).collect()
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let linear = CoefficientSet::linear(model.clone(), coeffs.g.clone())?;

    let mut current = wrap(vec![g_field.clone(); times.len()])?;
    let mut sup_distances = Vec::new();
    let mut ratios = Vec::new();
    let mut streak = 0;
    let mut verdict = Verdict::MaxIterations;
    let mut max_stderr = 0.0;
    let mut exit_fraction = 0.0;
    let jobs: Vec<(usize, usize)> = (1..times.len()).flat_map(|j| (0..points.len()).map(move |p| (j, p))).collect();
    for it in 0..params.max_iter {
        let u_ref: &dyn SolutionField = &current;
        let results: Vec<(f64, f64, f64)> = jobs
            .par_iter()
            .map(|&(j, pi)| {
                let tau = times[j];
                let steps = ((params.steps_per_unit as f64 * tau).ceil() as usize).max(2);
                let eng = Engine::new(coeffs, Some(u_ref), None, tau, steps, cfg.epsilon, Some(box_radius))?;
                let lin = Engine::new(&linear, None, None, tau, steps, cfg.epsilon, None)?;
                let x0 = &points[pi];
                let mut vals = Vec::with_capacity(params.n_paths);
                let mut exits = 0usize;
                let mut w = Work::new(n);
                let mut wl = Work::new(n);
                for idx in 0..params.n_paths {
                    let (mut rng, sign) = Engine::rng(cfg.seed, idx, cfg.antithetic);
                    let (mut x, mut y) = (x0.clone(), x0.clone());
                    let mut exited = false;
                    let mut xi = vec![0.0; n];
                    for k in 0..steps {
                        Engine::draw(&mut rng, sign, &mut xi);
                        exited |= eng.step(k, &mut x, &xi, &mut w)?;
                        if params.control_variate {
                            lin.step(k, &mut y, &xi, &mut wl)?;
                        }
                    }
                    exits += exited as usize;
                    let gx = coeffs.g.value(&x);
                    vals.push(if params.control_variate { gx - coeffs.g.value(&y) } else { gx });
                }
                let (m, se) = paired_mean_stderr(&vals, cfg.antithetic);
                let base = if params.control_variate { linear_means[j][pi] } else { 0.0 };
                Ok((base + m, se, exits as f64 / params.n_paths as f64))
            })
            .collect::<Result<_>>()?;
        let mut slices = vec![g_field.clone()];
        for j in 1..times.len() {
            let v: Vec<f64> = results[(j - 1) * points.len()..j * points.len()].iter().map(|r| r.0).collect();
            slices.push(ScalarField::from_node_values(n, deg, half_width, v)?);
        }
        max_stderr = results.iter().map(|r| r.1).fold(0.0, f64::max);
        exit_fraction = results.iter().map(|r| r.2).sum::<f64>() / results.len() as f64;
        let d = current.slices.iter().zip(&slices).map(|(a, b)| a.max_node_diff(b)).fold(0.0, f64::max);
        current = wrap(slices)?;
        if let Some(prev) = sup_distances.last().copied() {
            if prev > 0.0 {
                let r: f64 = d / prev;
                ratios.push(r);
                streak = if r >= 1.0 { streak + 1 } else { 0 };
            }
        }
        sup_distances.push(d);
        // With delta = 0 the map ignores its argument: one pass is the answer.
        if coeffs.delta == 0.0 || (d < params.tol && ratios.last().is_none_or(|r| *r < 1.0) && it > 0) || d == 0.0 {
            verdict = Verdict::Converged;
            break;
        }
        if streak >= 3 {
            verdict = Verdict::NonContraction;
            break;
        }
    }
    let interpolation_tol = current.slices.iter().map(|s| s.tail_estimate()).fold(0.0, f64::max);
    let report = ProbabilisticReport {
        iterations: sup_distances.len(),
        sup_distances,
        ratios,
        verdict,
        max_stderr,
        interpolation_tol,
        exit_fraction,
        n_paths: params.n_paths,
    };
    Ok((current, report))
}

/// Per-step mean of `||Lambda(X)(s) - X(s)||^2`, where `Lambda` re-integrates
/// the drift convolution on the simulated path with a trapezoid rule in
/// place of the scheme's left-point rule.
pub fn space_residual_profile(
    coeffs: &CoefficientSet,
    u: Option<&dyn SolutionField>,
    x: &[f64],
    t: f64,
    cfg: &SimConfig,
    control: Option<&ControlPath>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    check_start(coeffs, x)?;
    let eng = Engine::new(coeffs, u, control, t, cfg.n_steps, cfg.epsilon, cfg.exit_radius)?;
    let n = coeffs.n_modes();
    let dt = eng.dt;
    // Weights of b_k and b_{k+1} in int_0^dt e^{-alpha (dt - r)} (linear interpolant) dr.
    let (w0, w1): (Vec<f64>, Vec<f64>) =
        coeffs.model.alpha().iter().map(|a| crate::quadrature::linear_conv_weights(*a, dt)).unzip();
    let rows: Vec<Vec<f64>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|idx| {
            let mut state = x.to_vec();
            let mut r = vec![0.0; n];
            let mut prev_b = vec![0.0; n];
            let mut out = vec![0.0; cfg.n_steps + 1];
            let mut err = None;
            let mut w2 = Work::new(n);
            eng.run(cfg.seed, idx, cfg.antithetic, &mut state, |k, s, _| {
                if k == 0 {
                    if let Err(e) = eng.coefficients(0, s, &mut w2) {
                        err = Some(e);
                    }
                    prev_b.copy_from_slice(&w2.b);
                    return;
                }
                if let Err(e) = eng.coefficients(k, s, &mut w2) {
                    err = Some(e);
                    return;
                }
                let mut acc = 0.0;
                for i in 0..n {
                    let left = eng.decay[i] * dt * prev_b[i];
                    r[i] = eng.decay[i] * r[i] + (w0[i] * prev_b[i] + w1[i] * w2.b[i]) - left;
                    acc += r[i] * r[i];
                }
                prev_b.copy_from_slice(&w2.b);
                out[k] = acc;
            })?;
            match err {
                Some(e) => Err(e),
                None => Ok(out),
            }
        })
        .collect::<Result<_>>()?;
    let times: Vec<f64> = (0..=cfg.n_steps).map(|k| t * k as f64 / cfg.n_steps as f64).collect();
    let means = (0..=cfg.n_steps)
        .map(|k| pairwise_sum(&rows.iter().map(|r| r[k]).collect::<Vec<_>>()) / rows.len() as f64)
        .collect();
    Ok((times, means))
}

/// `sup_s e^{-beta s} E ||Lambda(X)(s) - X(s)||^2`.
pub fn weighted_space_residual(
    coeffs: &CoefficientSet,
    u: Option<&dyn SolutionField>,
    x: &[f64],
    t: f64,
    cfg: &SimConfig,
    beta: f64,
) -> Result<f64> {
    let (times, means) = space_residual_profile(coeffs, u, x, t, cfg, None)?;
    Ok(weight_profile(&times, &means, beta))
}

/// Applies the `e^{-beta s}` weight to a residual profile.
pub fn weight_profile(times: &[f64], means: &[f64], beta: f64) -> f64 {
    times.iter().zip(means).map(|(s, m)| (-beta * s).exp() * m).fold(0.0, f64::max)
}

/// Number of paths with `||X(t) - target|| <= radius`.
pub fn endpoint_hit_count(
    coeffs: &CoefficientSet,
    u: Option<&dyn SolutionField>,
    x: &[f64],
    t: f64,
    cfg: &SimConfig,
    target: &[f64],
    radius: f64,
) -> Result<usize> {
    cfg.validate()?;
    check_start(coeffs, x)?;
    if target.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: target.len() });
    }
    let eng = Engine::new(coeffs, u, None, t, cfg.n_steps, cfg.epsilon, cfg.exit_radius)?;
    let hits: Vec<bool> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|idx| {
            let mut s = x.to_vec();
            eng.run(cfg.seed, idx, cfg.antithetic, &mut s, |_, _, _| {})?;
            let d: f64 = s.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(d.sqrt() <= radius)
        })
        .collect::<Result<_>>()?;
    Ok(hits.into_iter().filter(|h| *h).count())
}

/// `E sup_s ||X(s)||^p` across noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub epsilons: Vec<f64>,
    pub powers: Vec<f64>,
    /// `moments[p][e]`.
    pub moments: Vec<Vec<f64>>,
    /// `moments / (1 + ||x||^p)`.
    pub constants: Vec<Vec<f64>>,
    /// Largest over smallest constant per power.
    pub spread: Vec<f64>,
}

/// Moment bound probe; `fields[e]` is the solution field for `epsilons[e]`.
pub fn moment_probe(
    coeffs: &CoefficientSet,
    fields: &[Option<&dyn SolutionField>],
    x: &[f64],
    t: f64,
    cfg: &SimConfig,
    epsilons: &[f64],
    powers: &[f64],
) -> Result<MomentReport> {
    if fields.len() != epsilons.len() {
        return Err(Error::DimensionMismatch { expected: epsilons.len(), got: fields.len() });
    }
    check_start(coeffs, x)?;
    let mut moments = vec![Vec::new(); powers.len()];
    for (e, f) in epsilons.iter().zip(fields) {
        let eng = Engine::new(coeffs, *f, None, t, cfg.n_steps, *e, cfg.exit_radius)?;
        let sups: Vec<f64> = (0..cfg.n_paths)
            .into_par_iter()
            .map(|idx| {
                let mut s = x.to_vec();
                let mut m: f64 = 0.0;
                eng.run(cfg.seed, idx, cfg.antithetic, &mut s, |_, st, _| m = m.max(norm(st)))?;
                Ok(m)
            })
            .collect::<Result<_>>()?;
        for (pi, p) in powers.iter().enumerate() {
            let v: Vec<f64> = sups.iter().map(|s| s.powf(*p)).collect();
            moments[pi].push(pairwise_sum(&v) / v.len() as f64);
        }
    }
    let xn = norm(x);
    let constants: Vec<Vec<f64>> =
        powers.iter().zip(&moments).map(|(p, m)| m.iter().map(|v| v / (1.0 + xn.powf(*p))).collect()).collect();
    let spread = constants
        .iter()
        .map(|c| c.iter().cloned().fold(0.0, f64::max) / c.iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    Ok(MomentReport { epsilons: epsilons.to_vec(), powers: powers.to_vec(), moments, constants, spread })
}

/// `E sup_s ||X_eps(s) - Z(s)||` against `sqrt(eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub epsilons: Vec<f64>,
    pub mean_sup_deviation: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Log-log slope against `sqrt(eps)`.
    pub slope: f64,
}

/// Small-noise collapse onto the skeleton path `Z` from the same start.
pub fn collapse_probe(
    coeffs: &CoefficientSet,
    fields: &[Option<&dyn SolutionField>],
    x: &[f64],
    t: f64,
    cfg: &SimConfig,
    epsilons: &[f64],
) -> Result<CollapseReport> {
    if fields.len() != epsilons.len() {
        return Err(Error::DimensionMismatch { expected: epsilons.len(), got: fields.len() });
    }
    check_start(coeffs, x)?;
    let n = coeffs.n_modes();
    let skel_eng = Engine::new(coeffs, fields.first().copied().flatten(), None, t, cfg.n_steps, 0.0, cfg.exit_radius)?;
    let mut z = Vec::with_capacity((cfg.n_steps + 1) * n);
    let mut s0 = x.to_vec();
    skel_eng.run(0, 0, false, &mut s0, |_, st, _| z.extend_from_slice(st))?;
    let mut means = Vec::new();
    let mut ses = Vec::new();
    for (e, f) in epsilons.iter().zip(fields) {
        let eng = Engine::new(coeffs, *f, None, t, cfg.n_steps, *e, cfg.exit_radius)?;
        let devs: Vec<f64> = (0..cfg.n_paths)
            .into_par_iter()
            .map(|idx| {
                let mut s = x.to_vec();
                let mut m: f64 = 0.0;
                eng.run(cfg.seed, idx, cfg.antithetic, &mut s, |k, st, _| {
                    let d: f64 = st.iter().zip(&z[k * n..(k + 1) * n]).map(|(a, b)| (a - b) * (a - b)).sum();
                    m = m.max(d.sqrt());
                })?;
                Ok(m)
            })
            .collect::<Result<_>>()?;
        let (m, se) = mean_stderr(&devs);
        means.push(m);
        ses.push(se);
    }
    let sq: Vec<f64> = epsilons.iter().map(|e| e.sqrt()).collect();
    let slope = loglog_fit(&sq, &means)?.1;
    Ok(CollapseReport { epsilons: epsilons.to_vec(), mean_sup_deviation: means, stderr: ses, slope })
}

/// `E g(X(t))` with `N` modes against a `2N`-mode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub n_modes: usize,
    pub n_modes_fine: usize,
    pub mean: f64,
    pub stderr: f64,
    pub mean_fine: f64,
    pub stderr_fine: f64,
    pub difference: f64,
    pub difference_stderr: f64,
}

/// Mode-truncation sensitivity. The fine model must extend the coarse one;
/// `u` is evaluated on the leading coordinates.
pub fn mode_truncation_sensitivity(
    coarse: &CoefficientSet,
    fine: &CoefficientSet,
    u: Option<&dyn SolutionField>,
    x: &[f64],
    t: f64,
    cfg: &SimConfig,
) -> Result<TruncationReport> {
    ensure(fine.n_modes() > coarse.n_modes(), || "the fine model must have more modes".into())?;
    let a = spde_simulate(coarse, u, x, t, cfg, None)?;
    let mut xf = x.to_vec();
    xf.resize(fine.n_modes(), 0.0);
    let b = spde_simulate(fine, u, &xf, t, cfg, None)?;
    let (m1, s1) = a.g_mean_stderr(cfg.antithetic);
    let (m2, s2) = b.g_mean_stderr(cfg.antithetic);
    Ok(TruncationReport {
        n_modes: coarse.n_modes(),
        n_modes_fine: fine.n_modes(),
        mean: m1,
        stderr: s1,
        mean_fine: m2,
        stderr_fine: s2,
        difference: m2 - m1,
        difference_stderr: (s1 * s1 + s2 * s2).sqrt(),
    })
}

/// Strong error at `t` against a reference with `refine` times more steps on
/// the same Brownian path, for each step count; returns the fitted order.
pub fn strong_order(
    coeffs: &CoefficientSet,
    u: Option<&dyn SolutionField>,
    x: &[f64],
    t: f64,
    cfg: &SimConfig,
    steps: &[usize],
    refine: usize,
) -> Result<(Vec<f64>, f64)> {
    ensure(refine >= 2 && steps.len() >= 2, || "need refine >= 2 and at least two step counts".into())?;
    check_start(coeffs, x)?;
    let n = coeffs.n_modes();
    let mut errs = Vec::new();
    for &m in steps {
        let fine = Engine::new(coeffs, u, None, t, m * refine, cfg.epsilon, cfg.exit_radius)?;
        let coarse = Engine::new(coeffs, u, None, t, m, cfg.epsilon, cfg.exit_radius)?;
        let e: Vec<f64> = (0..cfg.n_paths)
            .into_par_iter()
            .map(|idx| {
                let (mut rng, sign) = Engine::rng(cfg.seed, idx, false);
                let mut wf = Work::new(n);
                let mut wc = Work::new(n);
                let (mut xf, mut xc) = (x.to_vec(), x.to_vec());
                let mut xi = vec![0.0; n];
                let mut acc = vec![0.0; n];
                for k in 0..m {
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..refine {
                        Engine::draw(&mut rng, sign, &mut xi);
                        fine.step(k * refine + j, &mut xf, &xi, &mut wf)?;
                        // Coarse increment: sum of fine increments pushed to the coarse step end.
                        for i in 0..n {
                            let d = fine.decay[i].powi((refine - 1 - j) as i32);
                            acc[i] += d * fine.noise[i] * xi[i];
                        }
                    }
                    let comb: Vec<f64> = (0..n).map(|i| acc[i] / coarse.noise[i].max(f64::MIN_POSITIVE)).collect();
                    coarse.step(k, &mut xc, &comb, &mut wc)?;
                }
                Ok(xf.iter().zip(&xc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            })
            .collect::<Result<_>>()?;
        errs.push(pairwise_sum(&e) / e.len() as f64);
    }
    let dts: Vec<f64> = steps.iter().map(|m| t / *m as f64).collect();
    let order = loglog_fit(&dts, &errs)?.1;
    Ok((errs, order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Drift, FFamily, FKind, SModulation};
    use crate::field::FieldSpec;
    use crate::solver::{solve_qlpde, SolverParams};
    use crate::spectral::SpectralModel;

    fn one_mode(g: FieldSpec) -> CoefficientSet {
        CoefficientSet::linear(SpectralModel::new(vec![1.0], vec![1.0], 1.0).unwrap(), g).unwrap()
    }

    #[test]
    fn noiseless_decay() {
        let c = one_mode(FieldSpec::Linear { a: vec![1.0] });
        let cfg = SimConfig { epsilon: 0.0, n_paths: 4, n_steps: 7, ..Default::default() };
        let e = spde_simulate(&c, None, &[1.0], 2f64.ln(), &cfg, None).unwrap();
        for s in &e.terminal {
            assert!((s[0] - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn second_moment_matches_closed_form() {
        let c = one_mode(FieldSpec::Quadratic { c: vec![1.0] });
        let t = 0.8;
        let cfg = SimConfig { n_paths: 20_000, n_steps: 20, ..Default::default() };
        let e = spde_simulate(&c, None, &[0.7], t, &cfg, None).unwrap();
        let (m, se) = e.g_mean_stderr(true);
        let exact = (-2.0 * t).exp() * 0.49 + 0.1 * (1.0 - (-2.0 * t).exp()) / 2.0;
        assert!((m - exact).abs() <= 4.0 * se, "{m} {exact} {se}");
    }

    #[test]
    fn ensembles_are_reproducible_and_dumpable() {
        let c = CoefficientSet::reference(0.05).unwrap();
        let p = SolverParams { slices: 6, degree: 10, ..Default::default() };
        let (u, _) = solve_qlpde(&c, &p).unwrap();
        let cfg = SimConfig { n_paths: 64, n_steps: 10, store_paths: true, ..Default::default() };
        let a = spde_simulate(&c, Some(&u), &[0.2, 0.1], 1.0, &cfg, None).unwrap();
        let b = spde_simulate(&c, Some(&u), &[0.2, 0.1], 1.0, &cfg, None).unwrap();
        assert_eq!(a, b);
        let paths = a.paths.as_ref().unwrap();
        assert!(paths.iter().all(|p| p[0] == 0.2 && p[1] == 0.1));
        let mut buf = Vec::new();
        a.write_paths_bin(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 64 * 11 * 2 * 8);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 10);
        assert!(spde_simulate(&c, None, &[0.2, 0.1], 1.0, &cfg, None).is_err());
    }

    #[test]
    fn antithetic_pairs_reduce_variance() {
        let c = one_mode(FieldSpec::Tanh { a: vec![1.0] });
        let plain = SimConfig { n_paths: 4000, n_steps: 10, antithetic: false, ..Default::default() };
        let anti = SimConfig { antithetic: true, ..plain.clone() };
        let a = spde_simulate(&c, None, &[0.3], 1.0, &plain, None).unwrap().g_mean_stderr(false).1;
        let b = spde_simulate(&c, None, &[0.3], 1.0, &anti, None).unwrap().g_mean_stderr(true).1;
        assert!(b * b <= 0.5 * a * a, "{a} {b}");
    }

    #[test]
    fn strong_order_at_least_half() {
        let c = CoefficientSet::new(
            SpectralModel::laplacian(2, 1.0).unwrap(),
            Drift::TanhModewise { scale: 0.5, decay: 2.0 },
            FieldSpec::tanh_first(2),
            1.0,
            FFamily::power_decay(2, 2.0, FKind::Tanh, SModulation::Unit),
            0.0,
        )
        .unwrap();
        let cfg = SimConfig { n_paths: 500, ..Default::default() };
        let (errs, order) = strong_order(&c, None, &[0.5, 0.0], 1.0, &cfg, &[8, 16, 32], 4).unwrap();
        assert!(errs.iter().all(|e| e.is_finite()));
        assert!(order >= 0.5, "{order}");
    }

    #[test]
    fn feynman_kac_linear_and_at_time_zero() {
        let c = one_mode(FieldSpec::Quadratic { c: vec![1.0] });
        let p = SolverParams { horizon: 1.0, slices: 4, degree: 6, ..Default::default() };
        let (u, _) = solve_qlpde(&c, &p).unwrap();
        let cfg = SimConfig { n_paths: 20_000, n_steps: 10, ..Default::default() };
        let r = feynman_kac_verify(&c, &u, &[0.5], 1.0, &cfg).unwrap();
        assert!(r.pass, "{r:?}");
        assert!((r.z_score - (r.mc_mean - r.u_value) / r.mc_stderr).abs() < 1e-12);
        let r0 = feynman_kac_verify(&c, &u, &[0.5], 0.0, &cfg).unwrap();
        assert_eq!(r0.mc_mean, 0.25);
        assert!(r0.pass);
    }

    #[test]
    fn probabilistic_fixed_point_trivial_cases() {
        let pp = ProbabilisticParams { slices: 3, degree: 6, steps_per_unit: 10, n_paths: 64, ..Default::default() };
        let cfg = SimConfig::default();
        let mut c = CoefficientSet::reference(0.05).unwrap();
        c.g = FieldSpec::Constant { c: 0.3 };
        let (u, rep) = probabilistic_fixed_point(&c, &pp, &cfg).unwrap();
        assert_eq!(rep.verdict, Verdict::Converged);
        assert!(u.slices.iter().all(|s| s.values().iter().all(|v| (v - 0.3).abs() < 1e-14)));

        let lin = one_mode(FieldSpec::Quadratic { c: vec![1.0] });
        let (u, rep) = probabilistic_fixed_point(&lin, &pp, &cfg).unwrap();
        assert_eq!(rep.iterations, 1);
        // The control variate is exact when the path equals the linear path.
        let k = OuKernel::new(&lin.model, 1.0, 0.1, &OuQuadrature::gauss_hermite(10)).unwrap();
        let exact = k.apply(&lin.g, &[0.4]).unwrap().value;
        assert!((u.value(1.0, &[0.4]) - exact).abs() < 1e-10);
    }

    #[test]
    fn residual_orders_and_weights() {
        let c = CoefficientSet::new(
            SpectralModel::new(vec![1.0], vec![1.0], 1.0).unwrap(),
            Drift::TanhModewise { scale: 1.0, decay: 0.0 },
            FieldSpec::tanh_first(1),
            1.0,
            FFamily::power_decay(1, 2.0, FKind::Tanh, SModulation::Unit),
            0.0,
        )
        .unwrap();
        let det = |m| SimConfig { epsilon: 0.0, n_paths: 2, n_steps: m, ..Default::default() };
        let r: Vec<f64> = [10, 20, 40]
            .iter()
            .map(|m| weighted_space_residual(&c, None, &[0.8], 1.0, &det(*m), 0.0).unwrap())
            .collect();
        let order = loglog_fit(&[0.1, 0.05, 0.025], &r).unwrap().1;
        assert!(order >= 1.0 - 1e-2, "{order}");

        let cfg = SimConfig { n_paths: 200, n_steps: 20, ..Default::default() };
        let (t, m) = space_residual_profile(&c, None, &[0.8], 1.0, &cfg, None).unwrap();
        let w: Vec<f64> = [0.0, 1.0, 5.0].iter().map(|b| weight_profile(&t, &m, *b)).collect();
        assert!(w[0] >= w[1] && w[1] >= w[2]);
        let finer = SimConfig { n_steps: 40, ..cfg.clone() };
        assert!(weighted_space_residual(&c, None, &[0.8], 1.0, &finer, 0.0).unwrap() < w[0]);
    }

    #[test]
    fn bounded_terminal_mean_respects_bound() {
        let c = one_mode(FieldSpec::Tanh { a: vec![3.0] });
        let cfg = SimConfig { n_paths: 500, n_steps: 10, ..Default::default() };
        let e = spde_simulate(&c, None, &[1.0], 0.5, &cfg, None).unwrap();
        assert!(e.g_mean_stderr(true).0.abs() <= 1.0);
    }
}
