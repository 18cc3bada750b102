//! Batch harness around `bsdeflow-core`: loads an experiment config, checks the problem
//! hypotheses, runs one experiment and writes its reports.
//!
//! Exit status: 0 when every verdict passes, 1 on a failed verdict or runtime error, 2 on a
//! config error, 3 when the hypothesis checks fail (without `--force`).

pub mod config;
pub mod report;
pub mod run;
pub mod user;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use clap::{Parser, Subcommand};

use config::{ConfigError, Experiment, ExperimentConfig};
use run::CliError;

#[derive(Debug, Parser)]
#[command(name = "bsdeflow", version, about = "Probabilistic Dirichlet solvers and derivative-estimate experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run even when hypothesis checks fail.
    #[arg(long, global = true)]
    pub force: bool,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Estimate u(x) at the configured points.
    Solve,
    /// First directional derivatives by perturbed difference quotients.
    Grad,
    /// Second directional derivatives by perturbed difference quotients.
    Hess,
    /// Barrier ordering and calibrated supermartingale tests.
    VerifyBarriers,
    /// Martingale test of the quasi-derivatives and flow-derivative convergence.
    VerifyQuasi,
    /// Gradient/Hessian bound panels and the boundary normal-derivative bound.
    VerifyBounds,
    /// Hypothesis checks only.
    Hypotheses,
}

impl Command {
    pub fn experiment(self) -> Experiment {
        match self {
            Command::Solve => Experiment::Solve,
            Command::Grad => Experiment::Grad,
            Command::Hess => Experiment::Hess,
            Command::VerifyBarriers => Experiment::VerifyBarriers,
            Command::VerifyQuasi => Experiment::VerifyQuasi,
            Command::VerifyBounds => Experiment::VerifyBounds,
            Command::Hypotheses => Experiment::Hypotheses,
        }
    }
}

/// Config after the command-line overrides, plus what is needed to locate errors.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub source: String,
    pub base: PathBuf,
    pub out: PathBuf,
}

pub fn prepare(cli: &Cli) -> Result<Prepared, CliError> {
    let path = cli.config.as_deref().ok_or_else(|| ConfigError::field("--config", "a config file is required"))?;
    let (mut config, source) = ExperimentConfig::load(path)?;
    let exp = cli.command.experiment();
    if let Some(e) = config.experiment {
        if e != exp {
            return Err(ConfigError::field(
                "experiment",
                format!("config is for `{}` but the command is `{}`", e.name(), exp.name()),
            )
            .located(&source)
            .into());
        }
    }
    config.experiment = Some(exp);
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    config.validate().map_err(|e| e.located(&source))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = cli.out.clone().unwrap_or_else(|| base.join(&config.output.dir));
    Ok(Prepared { config, source, base, out })
}

/// Runs the command and returns the process exit status.
pub fn execute(cli: &Cli) -> i32 {
    match execute_inner(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute_inner(cli: &Cli) -> Result<i32, CliError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let Prepared { mut config, source, base, out } = prepare(cli)?;
    let problem = run::load_problem(&config, &base).map_err(|e| match e {
        CliError::Config(c) => CliError::Config(c.located(&source)),
        e => e,
    })?;
    // record the effective values in the embedded config
    config.numerics.lambda = Some(problem.domain.lambda);
    config.numerics.delta1 = Some(problem.domain.delta1);
    config.numerics.beta = Some(config.numerics.beta.unwrap_or(problem.spec.constants.beta));
    let gate = run::hypothesis_gate(&config, &problem)?;
    let exp = config.experiment.expect("resolved");
    let mut warnings = Vec::new();
    if !gate.pass && exp != Experiment::Hypotheses {
        if !cli.force {
            return Err(CliError::Hypotheses(gate.failures().join(", ")));
        }
        warnings = gate.failures().into_iter().map(|f| format!("hypothesis check failed: {f}")).collect();
    }
    let outcome = run::run(&config, &problem, &gate)?;
    let rep = report::Report {
        experiment: exp.name(),
        pass: outcome.pass,
        config: &config,
        problem: &problem.record,
        dims: problem.spec.dims,
        hypotheses: &gate,
        forced: !warnings.is_empty(),
        warnings,
        results: &outcome.results,
    };
    report::write_reports(&out, &rep, &outcome, started, clock.elapsed())?;
    print!("{}", report::summary_text(&rep, &outcome));
    Ok(match (exp, outcome.pass) {
        (_, true) => 0,
        (Experiment::Hypotheses, false) => 3,
        (_, false) => 1,
    })
}
