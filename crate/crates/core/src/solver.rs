//! Mild-form Picard solver for the quasi-linear Kolmogorov equation
//!
//! `u(t) = R^eps_t g + int_0^t R^eps_{t-s} gamma(u, s) ds`,
//! `gamma(v, s)(x) = (eps/2) delta sum_i lambda_i frak_f(x_i, v) d_ii v + <b(x), D v>`.
//!
//! Each time slice of `u` is a tensor Chebyshev interpolant on a box that
//! contains the ball plus six noise standard deviations. `R^eps_tau` maps a
//! polynomial to a polynomial, so on node values it is a product of one
//! `m x m` matrix per mode, computed once per `tau` with Gauss-Hermite rules
//! that are exact for the interpolant degree.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chebyshev::{lobatto_nodes, tensor_apply, values_to_coeffs, cheb_values, Mat, ScalarField};
use crate::coefficients::CoefficientSet;
use crate::error::{ensure, Error, Result};
use crate::field::{Field, FieldSpec};
use crate::ou::{OuKernel, OuQuadrature};
use crate::quadrature::{graded_grid, legendre, NormalRule};
use crate::spectral::{holder_seminorm_with, qt_covariance, BallSampler, Metric, SpectralModel};
use crate::stats::mix;

/// Discretization and stopping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    pub epsilon: f64,
    pub horizon: f64,
    /// Time slices per continuation segment.
    pub slices: usize,
    /// Grid grading exponent `p` in `t_k = T (k/M)^p`.
    pub grading: f64,
    /// Chebyshev degree per mode.
    pub degree: usize,
    /// Gauss-Legendre nodes per time interval.
    pub sub_nodes: usize,
    /// Gauss-Hermite nodes per mode for `R_t g`.
    pub gh_nodes: usize,
    pub eta: f64,
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Number of restarts of the contraction over `[0, T]`.
    pub segments: usize,
    /// Pairs used by each Hölder estimate inside the weighted norm.
    pub norm_pairs: usize,
    pub seed: u64,
    /// Box half-width; derived from the noise level when absent.
    pub half_width: Option<f64>,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            horizon: 1.0,
            slices: 24,
            grading: 1.5,
            degree: 20,
            sub_nodes: 4,
            gh_nodes: 40,
            eta: 0.9,
            theta: 0.2,
            tol: 1e-8,
            max_iter: 60,
            segments: 1,
            norm_pairs: 120,
            seed: 1,
            half_width: None,
        }
    }
}

impl SolverParams {
    /// `rho = (1 - (eta - theta)) / 2`.
    pub fn rho(&self) -> f64 {
        (1.0 - (self.eta - self.theta)) / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.epsilon > 0.0 && self.epsilon.is_finite(), || "epsilon must be positive".into())?;
        ensure(self.horizon > 0.0 && self.horizon.is_finite(), || "horizon must be positive".into())?;
        ensure(self.eta > 0.5 && self.eta <= 1.0, || format!("eta must lie in (1/2, 1], got {}", self.eta))?;
        let top = (self.eta - 0.5).min(1.0);
        ensure(self.theta > 0.0 && self.theta < top, || {
            format!("theta must lie in (0, {top}) for eta = {}, got {}", self.eta, self.theta)
        })?;
        ensure(self.slices >= 1 && self.segments >= 1, || "slices and segments must be >= 1".into())?;
        ensure(self.degree >= 2, || "degree must be >= 2".into())?;
        ensure(self.sub_nodes >= 1 && self.gh_nodes >= 1, || "quadrature node counts must be >= 1".into())?;
        ensure(self.tol > 0.0, || "tol must be positive".into())?;
        ensure(self.max_iter >= 1, || "max_iter must be >= 1".into())?;
        ensure(self.norm_pairs >= 2, || "norm_pairs must be >= 2".into())?;
        ensure(self.grading >= 1.0, || "grading must be >= 1".into())
    }

    /// Box half-width: ball radius plus six noise standard deviations at `T`.
    pub fn box_half_width(&self, model: &SpectralModel) -> Result<f64> {
        if let Some(h) = self.half_width {
            ensure(h >= model.ball_radius(), || "half_width must cover the ball".into())?;
            return Ok(h);
        }
        let q = qt_covariance(model, self.horizon, self.epsilon)?;
        Ok(model.ball_radius() + 6.0 * q.op_norm().sqrt())
    }

    /// Full time grid over `[0, T]` with one graded block per segment.
    pub fn time_grid(&self) -> Result<Vec<f64>> {
        let seg = self.horizon / self.segments as f64;
        let mut grid = vec![0.0];
        for s in 0..self.segments {
            let local = graded_grid(seg, self.slices, self.grading)?;
            let t0 = s as f64 * seg;
            grid.extend(local.into_iter().skip(1).map(|t| t0 + t));
        }
        *grid.last_mut().expect("nonempty") = self.horizon;
        Ok(grid)
    }
}

/// `u` on a time grid: one interpolant per time, linear in between.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub t_grid: Vec<f64>,
    pub slices: Vec<ScalarField>,
    pub epsilon: f64,
    pub rho: f64,
    pub eta: f64,
    pub theta: f64,
    pub ball_radius: f64,
}

impl SpaceTimeField {
    pub fn new(
        t_grid: Vec<f64>,
        slices: Vec<ScalarField>,
        epsilon: f64,
        eta: f64,
        theta: f64,
        ball_radius: f64,
    ) -> Result<Self> {
        ensure(!t_grid.is_empty() && t_grid[0] == 0.0, || "t_grid must start at 0".into())?;
        ensure(t_grid.windows(2).all(|w| w[0] < w[1]), || "t_grid must be strictly increasing".into())?;
        if t_grid.len() != slices.len() {
            return Err(Error::DimensionMismatch { expected: t_grid.len(), got: slices.len() });
        }
        Ok(Self { t_grid, slices, epsilon, rho: (1.0 - (eta - theta)) / 2.0, eta, theta, ball_radius })
    }

    pub fn n_modes(&self) -> usize {
        self.slices[0].n_modes()
    }

    pub fn horizon(&self) -> f64 {
        *self.t_grid.last().expect("nonempty")
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let t = t.clamp(0.0, self.horizon());
        let k = self.t_grid.partition_point(|s| *s <= t);
        if k >= self.t_grid.len() {
            return (self.t_grid.len() - 1, 0.0);
        }
        let j = k - 1;
        let w = (t - self.t_grid[j]) / (self.t_grid[k] - self.t_grid[j]);
        (j, w)
    }

    /// `u(t, x)` with linear interpolation in time and clamping in space.
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let (j, w) = self.locate(t);
        let a = self.slices[j].eval_clamped(x);
        if w == 0.0 {
            a
        } else {
            (1.0 - w) * a + w * self.slices[j + 1].eval_clamped(x)
        }
    }

    /// `u(t, .)` as a frozen field.
    pub fn at(&self, t: f64) -> TimeSlice<'_> {
        TimeSlice { u: self, t }
    }

    /// Largest `|u|` over grid slices and ball probe points.
    pub fn sup_abs(&self, n_points: usize, seed: u64) -> f64 {
        let pts = BallSampler::new(self.n_modes(), self.ball_radius).probe_points(n_points, seed);
        self.slices
            .iter()
            .map(|s| pts.iter().map(|p| s.eval_clamped(p).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }

    pub fn to_state(&self) -> FieldState {
        FieldState {
            t_grid: self.t_grid.clone(),
            grid_nodes: self.slices[0].grid_nodes(),
            n_modes: self.n_modes(),
            degree: self.slices[0].degree(),
            half_width: self.slices[0].half_width(),
            values: self.slices.iter().map(|s| s.values().to_vec()).collect(),
            epsilon: self.epsilon,
            rho: self.rho,
            eta: self.eta,
            theta: self.theta,
            ball_radius: self.ball_radius,
        }
    }

    pub fn from_state(s: &FieldState) -> Result<Self> {
        let slices = s
            .values
            .iter()
            .map(|v| ScalarField::from_node_values(s.n_modes, s.degree, s.half_width, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(s.t_grid.clone(), slices, s.epsilon, s.eta, s.theta, s.ball_radius)
    }
}

/// `x -> u(t, x)`.
pub struct TimeSlice<'a> {
    u: &'a SpaceTimeField,
    t: f64,
}

impl Field for TimeSlice<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.u.value(self.t, x)
    }
}

/// Serialized layout of a space-time field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub t_grid: Vec<f64>,
    /// 1-D Chebyshev-Lobatto node coordinates shared by every mode.
    pub grid_nodes: Vec<f64>,
    pub n_modes: usize,
    pub degree: usize,
    pub half_width: f64,
    /// Node values per time slice; tensor index with mode 0 slowest.
    pub values: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub rho: f64,
    pub eta: f64,
    pub theta: f64,
    pub ball_radius: f64,
}

/// `(eps/2) delta sum_i lambda_i frak_f(x_i, v) d_ii v + <b(x), D v>` from
/// the value, gradient and Hessian of `v` at `x`.
pub fn gamma_from_derivs(
    coeffs: &CoefficientSet,
    epsilon: f64,
    x: &[f64],
    v: f64,
    grad: &[f64],
    hess: &[f64],
    b: &mut [f64],
) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    if coeffs.delta != 0.0 {
        let mut tr = 0.0;
        for i in 0..n {
            tr += coeffs.f.lambda[i] * coeffs.f.frak(x[i], v) * hess[i * n + i];
        }
        acc += 0.5 * epsilon * coeffs.delta * tr;
    }
    if !coeffs.drift.is_zero() {
        coeffs.drift.eval(x, b);
        acc += b.iter().zip(grad).map(|(a, g)| a * g).sum::<f64>();
    }
    acc
}

/// `gamma_{eps,delta}(v, s)(x)`; points outside the ball are rejected.
pub fn gamma_term(coeffs: &CoefficientSet, v: &SpaceTimeField, s: f64, x: &[f64], epsilon: f64) -> Result<f64> {
    let r = crate::spectral::norm(x);
    if r > v.ball_radius * (1.0 + 1e-12) {
        let (mode, value) = x
            .iter()
            .enumerate()
            .fold((0, 0.0), |(m, a), (i, c)| if c.abs() > a { (i, c.abs()) } else { (m, a) });
        return Err(Error::Extrapolation { mode, value, half_width: v.ball_radius });
    }
    let k = v.t_grid.iter().position(|t| (t - s).abs() <= 1e-12 * (1.0 + s.abs())).ok_or_else(|| {
        Error::InvalidArgument(format!("s = {s} is not a grid time"))
    })?;
    let (u, g, h) = v.slices[k].eval_all(x)?;
    let mut b = vec![0.0; x.len()];
    Ok(gamma_from_derivs(coeffs, epsilon, x, u, &g, &h, &mut b))
}

/// Per-mode matrices of `R^eps_tau` acting on node values of degree-`deg`
/// interpolants on `[-L, L]`.
pub fn ou_node_matrices(model: &SpectralModel, epsilon: f64, tau: f64, deg: usize, half_width: f64) -> Result<Vec<Mat>> {
    let m = deg + 1;
    let c = values_to_coeffs(deg);
    if tau == 0.0 {
        return Ok((0..model.n_modes()).map(|_| Mat::identity(m)).collect());
    }
    let rule = NormalRule::new(deg / 2 + 2)?;
    let q = qt_covariance(model, tau, epsilon)?;
    let nodes = lobatto_nodes(deg);
    let mut tk = vec![0.0; m];
    let mut out = Vec::with_capacity(model.n_modes());
    for i in 0..model.n_modes() {
        let decay = (-model.alpha()[i] * tau).exp();
        let sd = q.diag[i].sqrt();
        let mut e = Mat::zeros(m);
        for (j, y) in nodes.iter().enumerate() {
            for (z, w) in rule.nodes.iter().zip(&rule.weights) {
                let arg = decay * y + sd * z / half_width;
                cheb_values(arg, m, &mut tk);
                for k in 0..m {
                    e.data[j * m + k] += w * tk[k];
                }
            }
        }
        out.push(e.mul(&c));
    }
    Ok(out)
}

/// Initial data of one contraction segment.
pub enum Initial<'a> {
    Terminal(&'a FieldSpec),
    Interpolant(&'a ScalarField),
}

/// Precomputed linear pieces of the Picard map on one segment.
/// `(weight_left, weight_right, mats)` for one sub-node of one interval.
type SubNodeKernel = (f64, f64, Vec<Mat>);

pub struct MildOperator<'a> {
    coeffs: &'a CoefficientSet,
    epsilon: f64,
    deg: usize,
    half_width: f64,
    /// Local times of the segment, starting at 0.
    pub times: Vec<f64>,
    points: Vec<Vec<f64>>,
    /// `R_{t_k} g` at the nodes.
    pub free: Vec<Vec<f64>>,
    /// For target `k`, interval `j < k`: one kernel per sub-node.
    kernels: Vec<Vec<Vec<SubNodeKernel>>>,
}

impl<'a> MildOperator<'a> {
    pub fn new(
        coeffs: &'a CoefficientSet,
        params: &SolverParams,
        times: Vec<f64>,
        initial: Initial<'_>,
        half_width: f64,
    ) -> Result<Self> {
        let model = &coeffs.model;
        let n = model.n_modes();
        let deg = params.degree;
        let eps = params.epsilon;
        let points = crate::chebyshev::node_points(n, deg, half_width);
        let free: Vec<Vec<f64>> = match initial {
            Initial::Terminal(g) => times
                .par_iter()
                .map(|&t| {
                    let k = OuKernel::new(model, t, eps, &OuQuadrature::gauss_hermite(params.gh_nodes))?;
                    points.iter().map(|p| Ok(k.apply(g, p)?.value)).collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?,
            Initial::Interpolant(f) => {
                ensure(f.degree() == deg && f.n_modes() == n && (f.half_width() - half_width).abs() < 1e-12, || {
                    "initial interpolant must share the solver grid".into()
                })?;
                times
                    .par_iter()
                    .map(|&t| {
                        let mats = ou_node_matrices(model, eps, t, deg, half_width)?;
                        let refs: Vec<&Mat> = mats.iter().collect();
                        Ok(tensor_apply(&refs, f.values(), deg + 1))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let mut kernels = Vec::with_capacity(times.len());
        for k in 0..times.len() {
            let row = (0..k)
                .into_par_iter()
                .map(|j| {
                    let (a, b) = (times[j], times[j + 1]);
                    let (xs, ws) = legendre(params.sub_nodes, a, b)?;
                    xs.iter()
                        .zip(&ws)
                        .map(|(s, w)| {
                            let th = (s - a) / (b - a);
                            let mats = ou_node_matrices(model, eps, times[k] - s, deg, half_width)?;
                            Ok((w * (1.0 - th), w * th, mats))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            kernels.push(row);
        }
        Ok(Self { coeffs, epsilon: eps, deg, half_width, times, points, free, kernels })
    }

    pub fn node_points(&self) -> &[Vec<f64>] {
        &self.points
    }

    fn interpolant(&self, values: Vec<f64>) -> Result<ScalarField> {
        ScalarField::from_node_values(self.coeffs.n_modes(), self.deg, self.half_width, values)
    }

    /// `gamma(v, t_j)` at the nodes for every slice.
    pub fn gamma_nodes(&self, slices: &[ScalarField]) -> Result<Vec<Vec<f64>>> {
        let n = self.coeffs.n_modes();
        slices
            .par_iter()
            .map(|f| {
                let mut b = vec![0.0; n];
                self.points
                    .iter()
                    .map(|p| {
                        let (v, g, h) = f.eval_all(p)?;
                        Ok(gamma_from_derivs(self.coeffs, self.epsilon, p, v, &g, &h, &mut b))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect()
    }

    /// One application of the mild-form map.
    pub fn apply(&self, slices: &[ScalarField]) -> Result<Vec<ScalarField>> {
        if slices.len() != self.times.len() {
            return Err(Error::DimensionMismatch { expected: self.times.len(), got: slices.len() });
        }
        let gamma = self.gamma_nodes(slices)?;
        let m = self.deg + 1;
        let out: Vec<Vec<f64>> = (0..self.times.len())
            .into_par_iter()
            .map(|k| {
                let mut acc = self.free[k].clone();
                let mut mix = vec![0.0; acc.len()];
                for (j, subs) in self.kernels[k].iter().enumerate() {
                    for (wl, wr, mats) in subs {
                        for ((o, a), b) in mix.iter_mut().zip(&gamma[j]).zip(&gamma[j + 1]) {
                            *o = wl * a + wr * b;
                        }
                        let refs: Vec<&Mat> = mats.iter().collect();
                        for (a, v) in acc.iter_mut().zip(tensor_apply(&refs, &mix, m)) {
                            *a += v;
                        }
                    }
                }
                acc
            })
            .collect();
        out.into_iter().map(|v| self.interpolant(v)).collect()
    }

    /// `R_{t_k} g` slices.
    pub fn free_solution(&self) -> Result<Vec<ScalarField>> {
        self.free.iter().map(|v| self.interpolant(v.clone())).collect()
    }
}

/// Components of the weighted norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormBreakdown {
    /// `sup_t ||u(t)||_eta`
    pub value_part: f64,
    /// `sup_t eps^rho (t^1)^rho ||D u(t)||_theta`
    pub gradient_part: f64,
    /// `sup_t eps^{rho+1/2} (t^1)^{rho+1/2} ||D^2 u(t)||_theta`
    pub hessian_part: f64,
    /// `sup_t` of the sum of the three weighted terms.
    pub total: f64,
}

/// `||u||_{eps, rho, eta, theta, T}` over the positive grid times, with
/// ball-restricted Hölder estimates on `pairs` sample pairs.
pub fn weighted_norm(u: &SpaceTimeField, pairs: usize, seed: u64) -> Result<NormBreakdown> {
    ensure(u.t_grid.len() >= 2, || "weighted norm needs a positive-time slice".into())?;
    let ball = BallSampler::new(u.n_modes(), u.ball_radius);
    let rows: Vec<[f64; 3]> = u
        .t_grid
        .par_iter()
        .zip(&u.slices)
        .skip(1)
        .map(|(&t, f)| -> Result<[f64; 3]> {
            let v = holder_seminorm_with(|x| Ok(vec![f.eval(x)?]), Metric::Euclid, u.eta, &ball, pairs, seed)?;
            let g = holder_seminorm_with(|x| f.grad(x), Metric::Euclid, u.theta, &ball, pairs, seed)?;
            let h = holder_seminorm_with(|x| f.hess(x), Metric::Operator, u.theta, &ball, pairs, seed)?;
            let tm = t.min(1.0);
            let w1 = (u.epsilon * tm).powf(u.rho);
            let w2 = (u.epsilon * tm).powf(u.rho + 0.5);
            Ok([
                v.sup_norm + v.holder_seminorm_est,
                w1 * (g.sup_norm + g.holder_seminorm_est),
                w2 * (h.sup_norm + h.holder_seminorm_est),
            ])
        })
        .collect::<Result<_>>()?;
    let mut out = NormBreakdown { value_part: 0.0, gradient_part: 0.0, hessian_part: 0.0, total: 0.0 };
    for r in rows {
        out.value_part = out.value_part.max(r[0]);
        out.gradient_part = out.gradient_part.max(r[1]);
        out.hessian_part = out.hessian_part.max(r[2]);
        out.total = out.total.max(r[0] + r[1] + r[2]);
    }
    Ok(out)
}

fn difference(a: &SpaceTimeField, b: &[ScalarField]) -> Result<SpaceTimeField> {
    let slices = a
        .slices
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let v = x.values().iter().zip(y.values()).map(|(p, q)| p - q).collect();
            ScalarField::from_node_values(x.n_modes(), x.degree(), x.half_width(), v)
        })
        .collect::<Result<Vec<_>>>()?;
    SpaceTimeField::new(a.t_grid.clone(), slices, a.epsilon, a.eta, a.theta, a.ball_radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    NonContraction,
    MaxIterations,
}

/// History and diagnostics of the contraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub delta: f64,
    /// Weighted-norm distances `d_k = ||u_{k+1} - u_k||` (all segments, in order).
    pub distances: Vec<f64>,
    /// Node sup-norm distances.
    pub sup_distances: Vec<f64>,
    /// `d_{k+1} / d_k` within each segment.
    pub ratios: Vec<f64>,
    /// Largest ratio among iterations with non-negligible `d_k`.
    pub max_ratio: f64,
    pub iterations: usize,
    pub segments: usize,
    pub verdict: Verdict,
    pub rho: f64,
    /// `rho < 1/4`.
    pub rho_below_quarter: bool,
    /// `sup |u|` over slices and ball probe points.
    pub sup_abs_u: f64,
    /// `||g||_0` used by the maximum principle.
    pub g_sup: f64,
    pub max_principle_ok: bool,
    /// Largest tail-coefficient estimate of the final slices.
    pub interpolation_tol: f64,
    pub norm: Option<NormBreakdown>,
    /// `||g||_eta` on the ball.
    pub g_eta_norm: f64,
    /// `norm.total / ||g||_eta`.
    pub a_priori_constant: f64,
}

/// Solver output.
pub struct SolveOutcome {
    pub field: SpaceTimeField,
    pub report: ContractionReport,
}

/// Tolerance on the maximum principle.
pub const MAX_PRINCIPLE_TOL: f64 = 1e-3;

fn negligible(d: f64, first: f64) -> bool {
    d <= 1e-12 * first.max(1e-300) || d <= 1e-13
}

/// Runs the contraction and returns the field with its report, whatever the verdict.
pub fn solve_qlpde_report(coeffs: &CoefficientSet, params: &SolverParams) -> Result<SolveOutcome> {
    params.validate()?;
    let model = &coeffs.model;
    ensure(model.n_modes() <= 3, || {
        format!("the interpolation solver supports up to 3 modes, got {}", model.n_modes())
    })?;
    let half_width = params.box_half_width(model)?;
    let grid = params.time_grid()?;
    let seg_len = params.slices;

    let mut all_slices: Vec<ScalarField> = Vec::with_capacity(grid.len());
    let mut distances = Vec::new();
    let mut sup_distances = Vec::new();
    let mut ratios = Vec::new();
    let mut max_ratio: f64 = 0.0;
    let mut iterations = 0;
    let mut verdict = Verdict::Converged;

    let norm_seed = mix(params.seed, 0x40);
    for s in 0..params.segments {
        let lo = s * seg_len;
        let local: Vec<f64> = grid[lo..=lo + seg_len].iter().map(|t| t - grid[lo]).collect();
        let start = all_slices.last().cloned();
        let op = match &start {
            None => MildOperator::new(coeffs, params, local.clone(), Initial::Terminal(&coeffs.g), half_width)?,
            Some(f) => MildOperator::new(coeffs, params, local.clone(), Initial::Interpolant(f), half_width)?,
        };
        let mut current = op.free_solution()?;
        let mut first = None;
        let mut streak = 0;
        let mut seg_verdict = Verdict::MaxIterations;
        for k in 0..params.max_iter {
            let next = op.apply(&current)?;
            iterations += 1;
            let cur_field = SpaceTimeField::new(
                grid[lo..=lo + seg_len].to_vec(),
                current.clone(),
                params.epsilon,
                params.eta,
                params.theta,
                model.ball_radius(),
            )?;
            let diff = difference(&cur_field, &next)?;
            let d = weighted_norm(&diff, params.norm_pairs, norm_seed)?.total;
            let sd = current.iter().zip(&next).map(|(a, b)| a.max_node_diff(b)).fold(0.0, f64::max);
            distances.push(d);
            sup_distances.push(sd);
            let first_d = *first.get_or_insert(d);
            let prev = if k > 0 { Some(distances[distances.len() - 2]) } else { None };
            let mut ratio_ok = true;
            if let Some(p) = prev {
                if !negligible(p, first_d) {
                    let r = d / p;
                    ratios.push(r);
                    max_ratio = max_ratio.max(r);
                    ratio_ok = r < 1.0;
                    streak = if r >= 1.0 { streak + 1 } else { 0 };
                }
            }
            current = next;
            if d < params.tol && ratio_ok {
                seg_verdict = Verdict::Converged;
                break;
            }
            if streak >= 3 {
                seg_verdict = Verdict::NonContraction;
                break;
            }
        }
        if s == 0 {
            all_slices.extend(current);
        } else {
            all_slices.extend(current.into_iter().skip(1));
        }
        if seg_verdict != Verdict::Converged {
            verdict = seg_verdict;
            break;
        }
    }
    if all_slices.len() < grid.len() {
        let t: Vec<f64> = grid[..all_slices.len()].to_vec();
        let field = SpaceTimeField::new(t, all_slices, params.epsilon, params.eta, params.theta, model.ball_radius())?;
        let report = finish_report(coeffs, params, &field, distances, sup_distances, ratios, max_ratio, iterations, verdict, false)?;
        return Ok(SolveOutcome { field, report });
    }
    let field = SpaceTimeField::new(grid, all_slices, params.epsilon, params.eta, params.theta, model.ball_radius())?;
    let report = finish_report(coeffs, params, &field, distances, sup_distances, ratios, max_ratio, iterations, verdict, true)?;
    Ok(SolveOutcome { field, report })
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    coeffs: &CoefficientSet,
    params: &SolverParams,
    field: &SpaceTimeField,
    distances: Vec<f64>,
    sup_distances: Vec<f64>,
    ratios: Vec<f64>,
    max_ratio: f64,
    iterations: usize,
    verdict: Verdict,
    with_norm: bool,
) -> Result<ContractionReport> {
    let g_sup = match coeffs.g.global_sup() {
        Some(v) => v,
        None => {
            let hw = field.slices[0].half_width();
            let n = coeffs.n_modes();
            crate::chebyshev::node_points(n, params.degree, hw)
                .iter()
                .map(|p| coeffs.g.value(p).abs())
                .fold(0.0, f64::max)
        }
    };
    let sup_abs_u = field.sup_abs(400, mix(params.seed, 0x51));
    let ball = BallSampler::for_model(&coeffs.model);
    let gh = holder_seminorm_with(|x| Ok(vec![coeffs.g.value(x)]), Metric::Euclid, params.eta, &ball, params.norm_pairs.max(200), mix(params.seed, 0x52))?;
    let g_eta_norm = gh.sup_norm + gh.holder_seminorm_est;
    let norm = if with_norm { Some(weighted_norm(field, params.norm_pairs, mix(params.seed, 0x40))?) } else { None };
    let a_priori_constant = norm.as_ref().map_or(f64::NAN, |n| if g_eta_norm > 0.0 { n.total / g_eta_norm } else { f64::NAN });
    let interpolation_tol = field.slices.iter().map(|s| s.tail_estimate()).fold(0.0, f64::max);
    Ok(ContractionReport {
        delta: coeffs.delta,
        distances,
        sup_distances,
        ratios,
        max_ratio,
        iterations,
        segments: params.segments,
        verdict,
        rho: params.rho(),
        rho_below_quarter: params.rho() < 0.25,
        sup_abs_u,
        g_sup,
        max_principle_ok: sup_abs_u <= g_sup + MAX_PRINCIPLE_TOL,
        interpolation_tol,
        norm,
        g_eta_norm,
        a_priori_constant,
    })
}

/// Solves the mild equation; non-contraction and exhaustion are errors.
pub fn solve_qlpde(coeffs: &CoefficientSet, params: &SolverParams) -> Result<(SpaceTimeField, ContractionReport)> {
    let out = solve_qlpde_report(coeffs, params)?;
    match out.report.verdict {
        Verdict::Converged => Ok((out.field, out.report)),
        Verdict::NonContraction => Err(Error::NonContraction { ratio: out.report.ratios.last().copied().unwrap_or(f64::NAN) }),
        Verdict::MaxIterations => Err(Error::MaxIterations {
            max_iter: params.max_iter,
            last_distance: out.report.distances.last().copied().unwrap_or(f64::NAN),
        }),
    }
}

/// One Picard step applied to `v` on its own grid (single segment from `g`).
pub fn picard_step(coeffs: &CoefficientSet, v: &SpaceTimeField, params: &SolverParams) -> Result<SpaceTimeField> {
    let hw = v.slices[0].half_width();
    let op = MildOperator::new(coeffs, params, v.t_grid.clone(), Initial::Terminal(&coeffs.g), hw)?;
    let slices = op.apply(&v.slices)?;
    SpaceTimeField::new(v.t_grid.clone(), slices, v.epsilon, v.eta, v.theta, v.ball_radius)
}

/// One row of a delta sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub max_ratio: f64,
    pub iterations: usize,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Measured ratio never decreases along the sweep.
    pub monotone: bool,
    /// Empirical threshold where the ratio reaches 1.
    pub delta_bar: Option<f64>,
    /// `true` when `delta_bar` is a linear extrapolation beyond the sweep.
    pub delta_bar_extrapolated: bool,
    /// Largest `delta` keeping `sigma sigma*` positive.
    pub positivity_threshold: f64,
}

/// Contraction ratio as a function of `delta`.
pub fn sweep_delta(coeffs: &CoefficientSet, params: &SolverParams, deltas: &[f64]) -> Result<SweepReport> {
    ensure(deltas.len() >= 2, || "a sweep needs at least two deltas".into())?;
    ensure(deltas.windows(2).all(|w| w[0] < w[1]), || "deltas must be increasing".into())?;
    let mut rows = Vec::new();
    for &d in deltas {
        let c = coeffs.with_delta(d)?;
        let out = solve_qlpde_report(&c, params)?;
        rows.push(SweepRow { delta: d, max_ratio: out.report.max_ratio, iterations: out.report.iterations, verdict: out.report.verdict });
    }
    let monotone = rows.windows(2).all(|w| w[1].max_ratio >= w[0].max_ratio);
    let mut delta_bar = None;
    let mut extrapolated = false;
    for w in rows.windows(2) {
        if w[0].max_ratio < 1.0 && w[1].max_ratio >= 1.0 {
            let s = (1.0 - w[0].max_ratio) / (w[1].max_ratio - w[0].max_ratio);
            delta_bar = Some(w[0].delta + s * (w[1].delta - w[0].delta));
            break;
        }
    }
    if delta_bar.is_none() && rows.iter().all(|r| r.max_ratio < 1.0) {
        let k = rows.len();
        let (a, b) = (&rows[k - 2], &rows[k - 1]);
        let slope = (b.max_ratio - a.max_ratio) / (b.delta - a.delta);
        if slope > 0.0 {
            delta_bar = Some(b.delta + (1.0 - b.max_ratio) / slope);
            extrapolated = true;
        }
    }
    Ok(SweepReport {
        rows,
        monotone,
        delta_bar,
        delta_bar_extrapolated: extrapolated,
        positivity_threshold: coeffs.positivity_threshold(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Drift, FFamily, FKind, SModulation};
    use crate::spectral::SpectralModel;

    fn linear_square() -> CoefficientSet {
        let m = SpectralModel::new(vec![1.0], vec![1.0], 1.0).unwrap();
        CoefficientSet::linear(m, FieldSpec::Quadratic { c: vec![1.0] }).unwrap()
    }

    #[test]
    fn gamma_examples() {
        let m = SpectralModel::new(vec![1.0], vec![1.0], 1.0).unwrap();
        let g = FieldSpec::Quadratic { c: vec![1.0] };
        let c = CoefficientSet::new(
            m.clone(),
            Drift::Zero,
            g.clone(),
            1.0,
            FFamily::new(vec![1.0], FKind::Constant, SModulation::Unit).unwrap(),
            0.1,
        )
        .unwrap();
        let sq = ScalarField::from_fn(1, 4, 2.0, |x| x[0] * x[0]).unwrap();
        let v = SpaceTimeField::new(vec![0.0], vec![sq.clone()], 0.5, 0.9, 0.2, 1.0).unwrap();
        // (0.5 / 2) * 0.1 * 1 * 2
        assert!((gamma_term(&c, &v, 0.0, &[0.3], 0.5).unwrap() - 0.05).abs() < 1e-12);
        assert!(matches!(gamma_term(&c, &v, 0.0, &[1.5], 0.5), Err(Error::Extrapolation { .. })));

        let lin = ScalarField::from_fn(2, 4, 2.0, |x| x[0]).unwrap();
        let v2 = SpaceTimeField::new(vec![0.0], vec![lin], 0.5, 0.9, 0.2, 1.0).unwrap();
        let m2 = SpectralModel::laplacian(2, 1.0).unwrap();
        let c2 = CoefficientSet::new(
            m2.clone(),
            Drift::Constant { value: vec![1.0, 0.0] },
            FieldSpec::tanh_first(2),
            1.0,
            FFamily::power_decay(2, 2.0, FKind::Tanh, SModulation::Unit),
            0.0,
        )
        .unwrap();
        assert!((gamma_term(&c2, &v2, 0.0, &[0.2, 0.1], 0.5).unwrap() - 1.0).abs() < 1e-12);
        let c3 = CoefficientSet::linear(m2, FieldSpec::tanh_first(2)).unwrap();
        assert_eq!(gamma_term(&c3, &v2, 0.0, &[0.2, 0.1], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn node_matrices_reproduce_second_moment() {
        let m = SpectralModel::new(vec![1.0], vec![1.0], 1.0).unwrap();
        let mats = ou_node_matrices(&m, 0.1, 2f64.ln(), 6, 2.0).unwrap();
        let f = ScalarField::from_fn(1, 6, 2.0, |x| x[0] * x[0]).unwrap();
        let v = tensor_apply(&[&mats[0]], f.values(), 7);
        let out = ScalarField::from_node_values(1, 6, 2.0, v).unwrap();
        assert!((out.eval(&[1.0]).unwrap() - 0.2875).abs() < 1e-13);
    }

    #[test]
    fn linear_case_one_step() {
        let c = linear_square();
        let p = SolverParams { horizon: 2f64.ln(), slices: 4, degree: 6, ..Default::default() };
        let (u, rep) = solve_qlpde(&c, &p).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!((u.value(2f64.ln(), &[1.0]) - 0.2875).abs() < 1e-10);
        assert!(rep.rho_below_quarter);
    }

    #[test]
    fn state_roundtrip() {
        let c = linear_square();
        let p = SolverParams { horizon: 0.5, slices: 3, degree: 4, ..Default::default() };
        let (u, _) = solve_qlpde(&c, &p).unwrap();
        let s = serde_json::to_string(&u.to_state()).unwrap();
        let back = SpaceTimeField::from_state(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(back.value(0.3, &[0.4]), u.value(0.3, &[0.4]));
    }

    #[test]
    fn params_validation() {
        let bad = SolverParams { eta: 0.4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SolverParams { theta: 0.45, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!((SolverParams::default().rho() - 0.15).abs() < 1e-15);
    }
}
