//! TOML experiment configuration, validation and seed derivation.

use serde::{Deserialize, Serialize};

use crate::coefficients::{CheckOptions, CoefficientSet, Drift, FFamily};
use crate::field::FieldSpec;
use crate::ldp::LdpOptions;
use crate::ou::{OuQuadrature, MAX_TENSOR_MODES};
use crate::solver::SolverParams;
use crate::spde::{ProbabilisticParams, SimConfig};
use crate::spectral::SpectralModel;
use crate::stats::named_seed;

/// A rejected configuration, with the clause it violates.
#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize)]
#[error("invalid configuration ({clause}): {message}")]
pub struct ConfigError {
    pub clause: String,
    pub message: String,
}

fn reject(clause: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { clause: clause.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// `alpha_i = i^2`, `gamma_i = 1`.
    #[default]
    Laplacian,
    /// `alpha_i = 1`, `gamma_i = 1`.
    ConstantAlpha,
    /// `alpha` and `gamma` given explicitly.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: ModelPreset,
    pub n_modes: usize,
    pub ball_radius: f64,
    pub alpha: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { preset: ModelPreset::Laplacian, n_modes: 2, ball_radius: 1.0, alpha: None, gamma: None }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<SpectralModel, ConfigError> {
        let m = match self.preset {
            ModelPreset::Laplacian => SpectralModel::laplacian(self.n_modes, self.ball_radius),
            ModelPreset::ConstantAlpha => SpectralModel::constant_alpha(self.n_modes, self.ball_radius),
            ModelPreset::Explicit => {
                let (Some(a), Some(g)) = (&self.alpha, &self.gamma) else {
                    return Err(reject("model.explicit", "explicit spectra need both alpha and gamma"));
                };
                SpectralModel::new(a.clone(), g.clone(), self.ball_radius)
            }
        };
        m.map_err(|e| reject("model", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientPreset {
    /// Tanh drift, `g = tanh(x_1)`, tanh-profile `f` with `lambda = (2, 0.5, i^-2...)`.
    #[default]
    Reference,
    /// Reference with odd `s`-modulation of `f`.
    Symmetric,
    /// `delta = 0`, `b = 0`.
    Linear,
    /// Everything from the fields below.
    Custom,
}

/// Coefficients: a preset plus overrides. `delta` always applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientConfig {
    pub preset: CoefficientPreset,
    pub delta: f64,
    pub drift: Option<Drift>,
    pub g: Option<FieldSpec>,
    pub eta: Option<f64>,
    pub f: Option<FFamily>,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self { preset: CoefficientPreset::Reference, delta: 0.05, drift: None, g: None, eta: None, f: None }
    }
}

impl CoefficientConfig {
    pub fn build(&self, model: SpectralModel) -> Result<CoefficientSet, ConfigError> {
        let bad = |e: crate::Error| reject("coefficients", e.to_string());
        let n = model.n_modes();
        let base = match self.preset {
            CoefficientPreset::Reference | CoefficientPreset::Custom => CoefficientSet::reference(0.0).map_err(bad)?,
            CoefficientPreset::Symmetric => CoefficientSet::symmetric(0.0).map_err(bad)?,
            CoefficientPreset::Linear => {
                CoefficientSet::linear(SpectralModel::laplacian(2, 1.0).map_err(bad)?, FieldSpec::tanh_first(2))
                    .map_err(bad)?
            }
        };
        if self.preset == CoefficientPreset::Custom && (self.drift.is_none() || self.g.is_none() || self.f.is_none()) {
            return Err(reject("coefficients.custom", "custom coefficients need drift, g and f"));
        }
        if self.preset == CoefficientPreset::Linear && self.delta != 0.0 {
            return Err(reject("coefficients.linear", "the linear preset requires delta = 0"));
        }
        let base = base.with_model(model).map_err(bad)?;
        let drift = self.drift.clone().unwrap_or(base.drift);
        let g = self.g.clone().unwrap_or(match &base.g {
            FieldSpec::Tanh { .. } => FieldSpec::tanh_first(n),
            other => other.clone(),
        });
        let eta = self.eta.unwrap_or(base.eta);
        let f = self.f.clone().unwrap_or(base.f);
        if f.lambda.len() != n {
            return Err(reject("coefficients.f", format!("lambda has {} entries for {n} modes", f.lambda.len())));
        }
        let c = CoefficientSet::new(base.model, drift, g, eta, f, 0.0).map_err(bad)?;
        let thr = c.positivity_threshold();
        if !(self.delta >= 0.0 && self.delta < thr) {
            return Err(reject(
                "sigma_positivity",
                format!("delta = {} must lie in [0, {thr:.6}) so that Q + delta f stays positive", self.delta),
            ));
        }
        c.with_delta(self.delta).map_err(bad)
    }
}

/// Inputs of the individual subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Start point for `simulate` and `ldp-minimize`; padded with zeros.
    pub x: Vec<f64>,
    pub t: f64,
    /// Points checked by `verify-fk` and compared by `solve-probabilistic`.
    pub probe_points: Vec<Vec<f64>>,
    /// Number of ball samples added to the comparison grid.
    pub probe_samples: usize,
    pub deltas: Vec<f64>,
    pub ldp_target: Vec<f64>,
    pub ldp_radius: f64,
    pub ldp_epsilons: Vec<f64>,
    pub smoothing_t_grid: Vec<f64>,
    /// Terminal data for the smoothing probe (default `sign(x_1)`); `g` of the coefficients when absent.
    pub smoothing_g: Option<FieldSpec>,
    pub smoothing_quadrature: OuQuadrature,
    pub interp_count: usize,
    pub interp_theta: f64,
    pub interp_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            x: vec![0.0],
            t: 1.0,
            probe_points: vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![0.0, -0.5]],
            probe_samples: 20,
            deltas: vec![0.0, 0.02, 0.05, 0.1, 0.2, 0.4],
            ldp_target: vec![0.6],
            ldp_radius: 0.1,
            ldp_epsilons: vec![0.2, 0.1, 0.075, 0.05],
            smoothing_t_grid: crate::stats::logspace(1e-3, 1e-1, 7),
            smoothing_g: Some(FieldSpec::Sign { mode: 0 }),
            smoothing_quadrature: OuQuadrature::gauss_hermite(64),
            interp_count: 20,
            interp_theta: 0.5,
            interp_pairs: 400,
        }
    }
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; sub-seeds come from the named streams "solver", "mc", "ldp".
    pub seed: u64,
    /// Noise level shared by the solver and the simulator.
    pub epsilon: f64,
    pub out_dir: Option<String>,
    pub model: ModelConfig,
    pub coefficients: CoefficientConfig,
    pub solver: SolverParams,
    pub simulation: SimConfig,
    pub probabilistic: ProbabilisticParams,
    pub ldp: LdpOptions,
    pub check: CheckOptions,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            epsilon: 0.1,
            out_dir: None,
            model: ModelConfig::default(),
            coefficients: CoefficientConfig::default(),
            solver: SolverParams::default(),
            simulation: SimConfig::default(),
            probabilistic: ProbabilisticParams::default(),
            ldp: LdpOptions::default(),
            check: CheckOptions::default(),
            run: RunConfig::default(),
        }
    }
}

/// Validated configuration with built coefficients.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub coeffs: CoefficientSet,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| reject("parse", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the master seed; sub-seeds are derived by [`ExperimentConfig::resolve`].
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Validates every clause and fills derived fields: shared `epsilon`,
    /// sub-seeds, and vectors padded to the number of modes.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let mut c = self.clone();
        if !(c.epsilon > 0.0 && c.epsilon.is_finite()) {
            return Err(reject("epsilon", format!("epsilon must be positive, got {}", c.epsilon)));
        }
        let model = c.model.build()?;
        let n = model.n_modes();
        let coeffs = c.coefficients.build(model)?;

        c.solver.epsilon = c.epsilon;
        c.simulation.epsilon = c.epsilon;
        c.solver.seed = named_seed(c.seed, "solver");
        c.simulation.seed = named_seed(c.seed, "mc");
        c.check.seed = named_seed(c.seed, "solver");
        if let OuQuadrature::MonteCarlo { seed, .. } = &mut c.run.smoothing_quadrature {
            *seed = named_seed(c.seed, "mc");
        }

        let rho = c.solver.rho();
        if !(rho < 0.25) {
            return Err(reject(
                "rho_below_quarter",
                format!("rho = (1 - (eta - theta))/2 = {rho} must be < 1/4 (eta = {}, theta = {})", c.solver.eta, c.solver.theta),
            ));
        }
        c.solver.validate().map_err(|e| reject("solver", e.to_string()))?;
        c.simulation.validate().map_err(|e| reject("simulation", e.to_string()))?;
        c.ldp.validate().map_err(|e| reject("ldp", e.to_string()))?;
        if n > MAX_TENSOR_MODES {
            return Err(reject(
                "quadrature_budget",
                format!("tensor grids support at most {MAX_TENSOR_MODES} modes, got {n}"),
            ));
        }
        c.run.smoothing_quadrature.validate(n).map_err(|e| reject("quadrature_budget", e.to_string()))?;
        let p = &c.probabilistic;
        if !(p.eta - p.theta > 0.5) {
            return Err(reject("rho_below_quarter", "probabilistic eta - theta must exceed 1/2"));
        }
        if p.slices == 0 || p.degree < 2 || p.steps_per_unit < 1 || p.max_iter == 0 || p.n_paths < 2 || !(p.horizon > 0.0) {
            return Err(reject("probabilistic", "slices, max_iter, steps_per_unit >= 1, n_paths >= 2, degree >= 2 and horizon > 0 required"));
        }

        let pad = |v: &[f64]| -> Result<Vec<f64>, ConfigError> {
            if v.len() > n {
                return Err(reject("run.dimension", format!("vector of length {} for {n} modes", v.len())));
            }
            let mut out = v.to_vec();
            out.resize(n, 0.0);
            Ok(out)
        };
        c.run.x = pad(&c.run.x)?;
        c.run.ldp_target = pad(&c.run.ldp_target)?;
        c.run.probe_points = c.run.probe_points.iter().map(|p| pad(p)).collect::<Result<_, _>>()?;
        let r = coeffs.model.ball_radius();
        let outside = |p: &[f64]| crate::spectral::norm(p) > r * (1.0 + 1e-12);
        if outside(&c.run.x) || c.run.probe_points.iter().any(|p| outside(p)) {
            return Err(reject("run.ball", format!("start and probe points must lie in the ball of radius {r}")));
        }
        if !(c.run.t > 0.0 && c.run.t <= c.solver.horizon) {
            return Err(reject("run.t", format!("t must lie in (0, {}]", c.solver.horizon)));
        }
        if c.run.deltas.iter().any(|d| !(*d >= 0.0)) {
            return Err(reject("run.deltas", "deltas must be >= 0"));
        }
        let e = &c.run.ldp_epsilons;
        if e.len() < 4 || e.iter().any(|v| !(*v > 0.0)) || e.windows(2).any(|w| w[0] <= w[1]) {
            return Err(reject("run.ldp_epsilons", "at least four positive, strictly decreasing noise levels"));
        }
        if !(c.run.ldp_radius > 0.0) {
            return Err(reject("run.ldp_radius", "radius must be positive"));
        }
        if !(c.run.interp_theta > 0.0 && c.run.interp_theta < 1.0) || c.run.interp_count == 0 || c.run.interp_pairs < 2 {
            return Err(reject("run.interp", "theta in (0,1), count >= 1 and pairs >= 2 required"));
        }
        Ok(Resolved { config: c, coeffs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_resolves() {
        let r = ExperimentConfig::default().resolve().unwrap();
        assert_eq!(r.coeffs.n_modes(), 2);
        assert_eq!(r.config.run.x, vec![0.0, 0.0]);
        assert_eq!(r.config.solver.epsilon, r.config.epsilon);
    }

    #[test]
    fn toml_roundtrip() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c = ExperimentConfig::from_toml("seed = 9\n[coefficients]\ndelta = 0.1\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.coefficients.delta, 0.1);
        assert_eq!(c.solver.slices, SolverParams::default().slices);
    }

    #[test]
    fn violations_name_clause() {
        let mut c = ExperimentConfig::default();
        c.coefficients.delta = 0.9;
        assert_eq!(c.resolve().unwrap_err().clause, "sigma_positivity");

        let mut c = ExperimentConfig::default();
        c.solver.theta = 0.5;
        assert_eq!(c.resolve().unwrap_err().clause, "rho_below_quarter");

        let mut c = ExperimentConfig::default();
        c.model.n_modes = 5;
        assert_eq!(c.resolve().unwrap_err().clause, "quadrature_budget");

        assert_eq!(ExperimentConfig::from_toml("bogus = 1").unwrap_err().clause, "parse");
    }

    #[test]
    fn named_streams_differ() {
        let r = ExperimentConfig::default().with_seed(5).resolve().unwrap();
        assert_ne!(r.config.solver.seed, r.config.simulation.seed);
        let again = ExperimentConfig::default().with_seed(5).resolve().unwrap();
        assert_eq!(r.config, again.config);
    }

    #[test]
    fn linear_preset_rejects_delta() {
        let mut c = ExperimentConfig::default();
        c.coefficients.preset = CoefficientPreset::Linear;
        assert_eq!(c.resolve().unwrap_err().clause, "coefficients.linear");
        c.coefficients.delta = 0.0;
        let r = c.resolve().unwrap();
        assert!(r.coeffs.drift.is_zero());
    }
}
