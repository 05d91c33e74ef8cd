//! Command-line experiment runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qlspde::config::{ConfigError, ExperimentConfig, Resolved};
use qlspde::runner::{run, Command, RunError, RunInputs};
use qlspde::solver::FieldState;

#[derive(Parser, Debug)]
#[command(name = "qlspde", version, about = "Quasi-linear Kolmogorov equations, SPDE simulation and action minimization")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// TOML experiment file; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` in the config; default `out/<subcommand>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone)]
enum Sub {
    /// Evaluate the structural hypotheses on the coefficients.
    CheckHypotheses,
    /// Solve the quasi-linear equation by Picard iteration of the mild form.
    SolveQlpde,
    /// Solve by the probabilistic fixed point and compare with the PDE solver.
    SolveProbabilistic,
    /// Compare u(t, x) with Monte-Carlo averages of g(X(t)).
    VerifyFk {
        /// Reuse a `field.json` written by solve-qlpde.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Simulate paths of the SPDE.
    Simulate {
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Minimize the action for the configured endpoint.
    LdpMinimize,
    /// Monte-Carlo large-deviation rate against the minimized action.
    LdpMc,
    /// Small-time blow-up of derivatives of the OU semigroup.
    SmoothingProbe,
    /// Interpolation inequalities on a generated field catalog.
    InterpProbe,
    /// Contraction ratio as a function of delta.
    SweepDelta,
}

impl Sub {
    fn command(&self) -> Command {
        match self {
            Sub::CheckHypotheses => Command::CheckHypotheses,
            Sub::SolveQlpde => Command::SolveQlpde,
            Sub::SolveProbabilistic => Command::SolveProbabilistic,
            Sub::VerifyFk { .. } => Command::VerifyFk,
            Sub::Simulate { .. } => Command::Simulate,
            Sub::LdpMinimize => Command::LdpMinimize,
            Sub::LdpMc => Command::LdpMc,
            Sub::SmoothingProbe => Command::SmoothingProbe,
            Sub::InterpProbe => Command::InterpProbe,
            Sub::SweepDelta => Command::SweepDelta,
        }
    }

    fn field(&self) -> Option<&Path> {
        match self {
            Sub::VerifyFk { field } | Sub::Simulate { field } => field.as_deref(),
            _ => None,
        }
    }
}

fn config_error(clause: &str, message: impl ToString) -> RunError {
    RunError::Config(ConfigError { clause: clause.into(), message: message.to_string() })
}

fn load(cli: &Cli) -> Result<(Resolved, RunInputs), RunError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_error("config_file", format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let resolved = cfg.resolve()?;
    let mut inputs = RunInputs::default();
    if let Some(p) = cli.command.field() {
        let text = std::fs::read_to_string(p).map_err(|e| config_error("field", format!("{}: {e}", p.display())))?;
        let state: FieldState = serde_json::from_str(&text).map_err(|e| config_error("field", e))?;
        inputs.field = Some(state);
    }
    Ok((resolved, inputs))
}

fn out_dir(cli: &Cli, resolved: Option<&Resolved>, cmd: Command) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| resolved.and_then(|r| r.config.out_dir.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(cmd.name()))
}

fn write_error(dir: &Path, cmd: Command, e: &RunError) {
    let body = serde_json::to_string_pretty(&e.to_json(cmd.name())).unwrap_or_default();
    if std::fs::create_dir_all(dir).and_then(|_| std::fs::write(dir.join("error.json"), body + "\n")).is_err() {
        eprintln!("could not write error.json to {}", dir.display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = cli.command.command();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    let (resolved, inputs) = match load(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            write_error(&out_dir(&cli, None, cmd), cmd, &e);
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let dir = out_dir(&cli, Some(&resolved), cmd);
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .ok();
    match run(cmd, &resolved, &inputs) {
        Ok(out) => {
            if let Err(e) = out.write(&resolved, &dir, stamp) {
                eprintln!("error: {e}");
                return ExitCode::from(3);
            }
            for a in &out.assertions {
                println!("{} {}: {}", if a.pass { "PASS" } else { "FAIL" }, a.name, a.detail);
            }
            println!("wrote {}", dir.display());
            if out.pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            write_error(&dir, cmd, &e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
