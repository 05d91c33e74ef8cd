//! Subcommand execution: each run writes `summary.json` and CSV tables into
//! an output directory.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, Resolved};
use crate::field::FieldSpec;
use crate::ldp::{minimize_action, ldp_mc_probe, EndpointEvent};
use crate::solver::{solve_qlpde, solve_qlpde_report, sweep_delta, FieldState, SpaceTimeField, Verdict};
use crate::spde::{feynman_kac_verify, probabilistic_fixed_point, spde_simulate, SimConfig, SolutionField};
use crate::spectral::{BallSampler, HVector};
use crate::stats::named_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    CheckHypotheses,
    SolveQlpde,
    SolveProbabilistic,
    VerifyFk,
    Simulate,
    LdpMinimize,
    LdpMc,
    SmoothingProbe,
    InterpProbe,
    SweepDelta,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::CheckHypotheses,
        Command::SolveQlpde,
        Command::SolveProbabilistic,
        Command::VerifyFk,
        Command::Simulate,
        Command::LdpMinimize,
        Command::LdpMc,
        Command::SmoothingProbe,
        Command::InterpProbe,
        Command::SweepDelta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::CheckHypotheses => "check-hypotheses",
            Command::SolveQlpde => "solve-qlpde",
            Command::SolveProbabilistic => "solve-probabilistic",
            Command::VerifyFk => "verify-fk",
            Command::Simulate => "simulate",
            Command::LdpMinimize => "ldp-minimize",
            Command::LdpMc => "ldp-mc",
            Command::SmoothingProbe => "smoothing-probe",
            Command::InterpProbe => "interp-probe",
            Command::SweepDelta => "sweep-delta",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown subcommand `{s}`"))
    }
}

/// Failure of a run, mapped to the process exit status.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical failure: {0}")]
    Numerical(#[from] crate::Error),
    #[error("numerical failure: {0}")]
    Verdict(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numerical(_) | RunError::Verdict(_) => 3,
        }
    }

    pub fn to_json(&self, command: &str) -> Value {
        match self {
            RunError::Config(e) => json!({
                "command": command, "status": 2, "kind": "config", "clause": e.clause, "message": e.message,
            }),
            RunError::Numerical(e) => json!({
                "command": command, "status": 3, "kind": "numerical", "message": e.to_string(),
            }),
            RunError::Verdict(m) => json!({
                "command": command, "status": 3, "kind": "numerical", "message": m,
            }),
        }
    }
}

/// A named pass/fail check declared by a subcommand.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: impl Into<String>) -> Assertion {
    Assertion { name: name.into(), pass, detail: detail.into() }
}

/// A CSV table; cells are pre-formatted so output is byte-stable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> Result<(), crate::Error> {
        let io = |e: csv::Error| crate::Error::Io(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn coord_header(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Everything a subcommand produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub command: Command,
    pub result: Value,
    pub assertions: Vec<Assertion>,
    pub tables: Vec<(String, Table)>,
    /// Extra files (name, bytes), e.g. `paths.bin` or `field.json`.
    pub files: Vec<(String, Vec<u8>)>,
}

impl RunOutput {
    pub fn pass(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }

    /// Summary document; `timestamp` is the only field that varies between
    /// identical runs.
    pub fn summary(&self, resolved: &Resolved, timestamp: Option<u64>) -> Value {
        json!({
            "command": self.command.name(),
            "timestamp": timestamp,
            "config": resolved.config,
            "coefficients": resolved.coeffs,
            "result": self.result,
            "assertions": self.assertions,
            "pass": self.pass(),
        })
    }

    /// Writes `summary.json`, the CSV tables and extra files into `dir`.
    pub fn write(&self, resolved: &Resolved, dir: &Path, timestamp: Option<u64>) -> Result<(), crate::Error> {
        fs::create_dir_all(dir)?;
        let s = serde_json::to_string_pretty(&self.summary(resolved, timestamp))
            .map_err(|e| crate::Error::Io(e.to_string()))?;
        fs::write(dir.join("summary.json"), s + "\n")?;
        for (name, t) in &self.tables {
            t.write(&dir.join(name))?;
        }
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

/// Optional inputs that do not belong in the config file.
#[derive(Debug, Clone, Default)]
pub struct RunInputs {
    /// Previously saved `field.json` reused by `verify-fk` and `simulate`.
    pub field: Option<FieldState>,
}

/// Executes one subcommand.
pub fn run(cmd: Command, r: &Resolved, inputs: &RunInputs) -> Result<RunOutput, RunError> {
    let out = match cmd {
        Command::CheckHypotheses => check_hypotheses(r),
        Command::SolveQlpde => solve(r),
        Command::SolveProbabilistic => solve_probabilistic(r),
        Command::VerifyFk => verify_fk(r, inputs),
        Command::Simulate => simulate(r, inputs),
        Command::LdpMinimize => ldp_minimize(r),
        Command::LdpMc => ldp_mc(r),
        Command::SmoothingProbe => smoothing(r),
        Command::InterpProbe => interp(r),
        Command::SweepDelta => sweep(r),
    }?;
    Ok(RunOutput { command: cmd, ..out })
}

fn output(result: Value, assertions: Vec<Assertion>, tables: Vec<(String, Table)>) -> RunOutput {
    RunOutput { command: Command::CheckHypotheses, result, assertions, tables, files: Vec::new() }
}

fn check_hypotheses(r: &Resolved) -> Result<RunOutput, RunError> {
    let rep = crate::coefficients::check_hypotheses(&r.coeffs, &r.config.check)?;
    let mut t = Table::new(&["group", "clause", "pass", "measured", "bound", "note"]);
    for e in &rep.entries {
        t.push(vec![e.group.clone(), e.clause.clone(), e.pass.to_string(), f(e.measured), f(e.bound), e.note.clone()]);
    }
    let a = vec![check("all_clauses", rep.pass, format!("failed: {:?}", rep.failed()))];
    Ok(output(to_json(&rep), a, vec![("hypotheses.csv".into(), t)]))
}

/// Solves, failing with status 3 unless the contraction converged.
fn solved_field(r: &Resolved) -> Result<(SpaceTimeField, crate::solver::ContractionReport), RunError> {
    let o = solve_qlpde_report(&r.coeffs, &r.config.solver)?;
    if o.report.verdict != Verdict::Converged {
        return Err(RunError::Verdict(format!(
            "solver verdict {:?} after {} iterations (max ratio {:.4})",
            o.report.verdict, o.report.iterations, o.report.max_ratio
        )));
    }
    Ok((o.field, o.report))
}

fn field_or_solve(r: &Resolved, inputs: &RunInputs) -> Result<(SpaceTimeField, Option<Value>), RunError> {
    match &inputs.field {
        Some(s) => {
            let u = SpaceTimeField::from_state(s)?;
            if (u.epsilon - r.config.epsilon).abs() > 1e-15 * r.config.epsilon || u.n_modes() != r.coeffs.n_modes() {
                return Err(RunError::Config(ConfigError {
                    clause: "field".into(),
                    message: "saved field does not match epsilon or the number of modes".into(),
                }));
            }
            Ok((u, None))
        }
        None => {
            let (u, rep) = solved_field(r)?;
            Ok((u, Some(to_json(&rep))))
        }
    }
}

fn solve(r: &Resolved) -> Result<RunOutput, RunError> {
    let (u, rep) = solved_field(r)?;
    let n = r.coeffs.n_modes();
    let mut hist = Table::new(&["iteration", "distance", "sup_distance", "ratio"]);
    for (k, (d, s)) in rep.distances.iter().zip(&rep.sup_distances).enumerate() {
        let ratio = if k == 0 { String::new() } else { rep.ratios.get(k - 1).map(|v| f(*v)).unwrap_or_default() };
        hist.push(vec![(k + 1).to_string(), f(*d), f(*s), ratio]);
    }
    let mut h = coord_header("x", n);
    h.push("u".into());
    let mut vals = Table { header: h, rows: Vec::new() };
    for p in &r.config.run.probe_points {
        let mut row: Vec<String> = p.iter().map(|v| f(*v)).collect();
        row.push(f(u.value(r.config.run.t, p)));
        vals.push(row);
    }
    let a = vec![
        check("converged", rep.verdict == Verdict::Converged, format!("{:?}", rep.verdict)),
        check(
            "maximum_principle",
            rep.max_principle_ok,
            format!("sup|u| = {:.6} vs ||g||_0 = {:.6}", rep.sup_abs_u, rep.g_sup),
        ),
        check("rho_below_quarter", rep.rho_below_quarter, format!("rho = {}", rep.rho)),
    ];
    let state = serde_json::to_vec(&u.to_state()).map_err(|e| crate::Error::Io(e.to_string()))?;
    let mut o = output(to_json(&rep), a, vec![("contraction.csv".into(), hist), ("values.csv".into(), vals)]);
    o.files.push(("field.json".into(), state));
    Ok(o)
}

fn comparison_points(r: &Resolved) -> Vec<Vec<f64>> {
    let mut pts = r.config.run.probe_points.clone();
    let ball = BallSampler::for_model(&r.coeffs.model);
    pts.extend(ball.probe_points(r.config.run.probe_samples, named_seed(r.config.seed, "mc")));
    pts
}

fn solve_probabilistic(r: &Resolved) -> Result<RunOutput, RunError> {
    let (u, rep) = solved_field(r)?;
    let (v, prep) = probabilistic_fixed_point(&r.coeffs, &r.config.probabilistic, &r.config.simulation)?;
    let n = r.coeffs.n_modes();
    let t = r.config.run.t.min(r.config.probabilistic.horizon);
    let mut h = coord_header("x", n);
    h.extend(["u_pde".into(), "u_probabilistic".into(), "difference".into()]);
    let mut tab = Table { header: h, rows: Vec::new() };
    let mut sup: f64 = 0.0;
    for p in comparison_points(r) {
        let (a, b) = (u.value(t, &p), v.value(t, &p));
        sup = sup.max((a - b).abs());
        let mut row: Vec<String> = p.iter().map(|x| f(*x)).collect();
        row.extend([f(a), f(b), f(a - b)]);
        tab.push(row);
    }
    let allowance = 3.0 * (prep.max_stderr + prep.interpolation_tol);
    let a = vec![
        check("probabilistic_converged", prep.verdict == Verdict::Converged, format!("{:?}", prep.verdict)),
        check("cross_solver_agreement", sup <= allowance, format!("sup difference {sup:.3e} vs allowance {allowance:.3e}")),
        check("maximum_principle", rep.max_principle_ok, format!("sup|u| = {:.6}", rep.sup_abs_u)),
    ];
    let result = json!({ "t": t, "sup_difference": sup, "allowance": allowance, "probabilistic": prep, "pde": rep });
    Ok(output(result, a, vec![("comparison.csv".into(), tab)]))
}

fn verify_fk(r: &Resolved, inputs: &RunInputs) -> Result<RunOutput, RunError> {
    let (u, rep) = field_or_solve(r, inputs)?;
    let n = r.coeffs.n_modes();
    let mut h = coord_header("x", n);
    h.extend(
        ["u", "mc_mean", "mc_stderr", "z_score", "bias_estimate", "bias_stderr", "bias_budget", "exit_fraction", "pass"]
            .map(String::from),
    );
    let mut tab = Table { header: h, rows: Vec::new() };
    let mut reports = Vec::new();
    for p in &r.config.run.probe_points {
        let fk = feynman_kac_verify(&r.coeffs, &u, p, r.config.run.t, &r.config.simulation)?;
        let mut row: Vec<String> = p.iter().map(|x| f(*x)).collect();
        row.extend([
            f(fk.u_value),
            f(fk.mc_mean),
            f(fk.mc_stderr),
            f(fk.z_score),
            f(fk.bias_estimate),
            f(fk.bias_stderr),
            f(fk.bias_budget),
            f(fk.exit_fraction),
            fk.pass.to_string(),
        ]);
        tab.push(row);
        reports.push(fk);
    }
    let worst = reports.iter().map(|r| r.z_score.abs()).fold(0.0, f64::max);
    let a = vec![check(
        "feynman_kac",
        reports.iter().all(|r| r.pass),
        format!("{} points, largest |z| = {worst:.3}", reports.len()),
    )];
    Ok(output(json!({ "points": reports, "solver": rep }), a, vec![("fk.csv".into(), tab)]))
}

fn simulate(r: &Resolved, inputs: &RunInputs) -> Result<RunOutput, RunError> {
    let field = if r.coeffs.delta != 0.0 { Some(field_or_solve(r, inputs)?.0) } else { None };
    let u = field.as_ref().map(|f| f as &dyn SolutionField);
    let ens = spde_simulate(&r.coeffs, u, &r.config.run.x, r.config.run.t, &r.config.simulation, None)?;
    let n = r.coeffs.n_modes();
    let (m, se) = ens.g_mean_stderr(r.config.simulation.antithetic);
    let mut h = vec!["path".to_string()];
    h.extend(coord_header("x", n));
    h.push("g".into());
    let mut tab = Table { header: h, rows: Vec::new() };
    for (k, (s, g)) in ens.terminal.iter().zip(&ens.g_values).enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(s.as_slice().iter().map(|v| f(*v)));
        row.push(f(*g));
        tab.push(row);
    }
    let mut o = output(
        json!({
            "x": r.config.run.x, "t": r.config.run.t, "n_paths": ens.n_paths(), "n_steps": ens.n_steps(),
            "g_mean": m, "g_stderr": se, "exit_fraction": ens.exit_fraction,
            "paths_file": r.config.simulation.store_paths.then_some("paths.bin"),
        }),
        Vec::new(),
        vec![("terminal.csv".into(), tab)],
    );
    if r.config.simulation.store_paths {
        let mut buf = Vec::new();
        ens.write_paths_bin(&mut buf)?;
        o.files.push(("paths.bin".into(), buf));
    }
    Ok(o)
}

fn ldp_minimize(r: &Resolved) -> Result<RunOutput, RunError> {
    let ev = EndpointEvent::Point { target: HVector::new(r.config.run.ldp_target.clone()) };
    let x = HVector::new(r.config.run.x.clone());
    let res = minimize_action(&r.coeffs, &x, r.config.run.t, &ev, &r.config.ldp)?;
    let mut trace = Table::new(&["outer", "penalty", "action", "gap", "inner_iterations"]);
    for (k, s) in res.trace.iter().enumerate() {
        trace.push(vec![k.to_string(), f(s.penalty), f(s.action), f(s.gap), s.inner_iterations.to_string()]);
    }
    let n = r.coeffs.n_modes();
    let mut h = vec!["s".to_string()];
    h.extend(coord_header("phi", n));
    let mut ctl = Table { header: h, rows: Vec::new() };
    for (s, v) in res.control.times.iter().zip(&res.control.values) {
        let mut row = vec![f(*s)];
        row.extend(v.as_slice().iter().map(|c| f(*c)));
        ctl.push(row);
    }
    let a = vec![check("converged", res.converged, format!("endpoint gap {:.3e}", res.endpoint_gap))];
    let control = serde_json::to_vec(&res.control).map_err(|e| crate::Error::Io(e.to_string()))?;
    let result = json!({
        "value": res.value, "endpoint": res.endpoint, "endpoint_gap": res.endpoint_gap,
        "converged": res.converged, "trace": res.trace,
    });
    let mut o = output(result, a, vec![("trace.csv".into(), trace), ("control.csv".into(), ctl)]);
    o.files.push(("control.json".into(), control));
    Ok(o)
}

fn ldp_mc(r: &Resolved) -> Result<RunOutput, RunError> {
    let eps = &r.config.run.ldp_epsilons;
    let mut fields = Vec::new();
    if r.coeffs.delta != 0.0 {
        for &e in eps {
            let p = crate::solver::SolverParams { epsilon: e, ..r.config.solver.clone() };
            fields.push(solve_qlpde(&r.coeffs, &p)?.0);
        }
    }
    let refs: Vec<Option<&dyn SolutionField>> = if fields.is_empty() {
        vec![None; eps.len()]
    } else {
        fields.iter().map(|u| Some(u as &dyn SolutionField)).collect()
    };
    let cfg = SimConfig { seed: named_seed(r.config.seed, "ldp"), ..r.config.simulation.clone() };
    let rep = ldp_mc_probe(
        &r.coeffs,
        &refs,
        &HVector::new(r.config.run.x.clone()),
        r.config.run.t,
        &HVector::new(r.config.run.ldp_target.clone()),
        r.config.run.ldp_radius,
        eps,
        &cfg,
        &r.config.ldp,
    )?;
    let mut tab = Table::new(&[
        "epsilon", "hits", "n_paths", "probability", "rate", "oracle_probability", "oracle_rate", "relative_gap",
    ]);
    let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
    for l in &rep.levels {
        tab.push(vec![
            f(l.epsilon),
            l.hits.to_string(),
            l.n_paths.to_string(),
            f(l.probability),
            f(l.rate),
            opt(l.oracle_probability),
            opt(l.oracle_rate),
            f(l.relative_gap),
        ]);
    }
    let a = vec![
        check("hits_per_level", rep.min_hits >= rep.min_hits_required, format!("min hits {}", rep.min_hits)),
        check(
            "rate_limit_gap",
            rep.limit_gap <= rep.gap_tol,
            format!("limit {:.4} vs ball action {:.4}, gap {:.3}", rep.limit, rep.ball_action, rep.limit_gap),
        ),
    ];
    Ok(output(to_json(&rep), a, vec![("ldp_mc.csv".into(), tab)]))
}

fn smoothing(r: &Resolved) -> Result<RunOutput, RunError> {
    let g: FieldSpec = r.config.run.smoothing_g.clone().unwrap_or_else(|| r.coeffs.g.clone());
    let rep = crate::ou::smoothing_scan(
        &r.coeffs.model,
        &g,
        &[1, 2],
        &r.config.run.smoothing_t_grid,
        r.config.epsilon,
        &r.config.run.smoothing_quadrature,
    )?;
    let mut tab = Table::new(&["order", "t", "sup_norm"]);
    for o in &rep.orders {
        for (t, v) in rep.t_grid.iter().zip(&o.norms) {
            tab.push(vec![o.order.to_string(), f(*t), f(*v)]);
        }
    }
    let a = rep
        .orders
        .iter()
        .map(|o| check(&format!("order_{}_rate", o.order), o.pass, format!("fitted exponent {:.4}", o.exponent)))
        .collect();
    Ok(output(json!({ "g": g, "report": rep }), a, vec![("smoothing.csv".into(), tab)]))
}

fn interp(r: &Resolved) -> Result<RunOutput, RunError> {
    let n = r.coeffs.n_modes();
    let run = &r.config.run;
    let seed = named_seed(r.config.seed, "solver");
    let catalog = crate::field::generated_catalog(n, run.interp_count, seed);
    let mut tab = Table::new(&["field", "inequality", "lhs", "rhs", "constant", "implied_constant", "violated"]);
    let mut reports = Vec::new();
    let mut violations = 0;
    for (k, g) in catalog.iter().enumerate() {
        let rep = crate::spectral::interpolation_probe(g, run.interp_theta, &r.coeffs.model, run.interp_pairs, seed ^ k as u64)?;
        violations += rep.violations();
        for e in &rep.entries {
            tab.push(vec![
                k.to_string(),
                e.name.clone(),
                f(e.lhs),
                f(e.rhs),
                e.constant.map(f).unwrap_or_default(),
                f(e.implied_constant),
                e.violated.to_string(),
            ]);
        }
        reports.push(json!({ "field": g, "report": rep }));
    }
    let a = vec![check("no_violations", violations == 0, format!("{violations} violations over {} fields", catalog.len()))];
    Ok(output(json!({ "fields": reports, "violations": violations }), a, vec![("interp.csv".into(), tab)]))
}

fn sweep(r: &Resolved) -> Result<RunOutput, RunError> {
    let rep = sweep_delta(&r.coeffs, &r.config.solver, &r.config.run.deltas)?;
    let mut tab = Table::new(&["delta", "max_ratio", "iterations", "verdict", "delta_bar"]);
    let bar = rep.delta_bar.map(f).unwrap_or_default();
    for row in &rep.rows {
        let v = serde_json::to_value(row.verdict).expect("verdict serializes");
        tab.push(vec![f(row.delta), f(row.max_ratio), row.iterations.to_string(), v.as_str().unwrap_or("").into(), bar.clone()]);
    }
    let small_ok = rep.rows.iter().filter(|w| w.delta <= 0.05).all(|w| w.max_ratio < 1.0);
    let a = vec![
        check("contraction_small_delta", small_ok, "ratio < 1 for every delta <= 0.05"),
        check("monotone_ratio", rep.monotone, "ratio non-decreasing along the sweep"),
    ];
    Ok(output(to_json(&rep), a, vec![("sweep.csv".into(), tab)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_roundtrip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("nope".parse::<Command>().is_err());
    }

    #[test]
    fn exit_codes() {
        let c = RunError::Config(ConfigError { clause: "x".into(), message: "m".into() });
        assert_eq!(c.exit_code(), 2);
        assert_eq!(c.to_json("solve-qlpde")["clause"], "x");
        assert_eq!(RunError::Numerical(crate::Error::NonContraction { ratio: 1.2 }).exit_code(), 3);
    }
}
