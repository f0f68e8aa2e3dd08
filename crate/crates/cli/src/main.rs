use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use rough_burgers::experiment::{emit, run, run_simulate, ExperimentConfig, ExperimentKind, Format, RateKind, Report};

#[derive(Parser)]
#[command(name = "rough-burgers", version, about = "Rough-path Burgers SPDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// First seed of the ensemble.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Grid size.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Time step.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Mollification width (replaces the ladder for `convergence`).
    #[arg(long, global = true)]
    eps: Option<f64>,
    /// Ensemble size.
    #[arg(long, global = true)]
    ensemble: Option<usize>,
    /// Report format.
    #[arg(long, global = true, default_value = "csv")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Solve once per seed and save the bundles.
    Simulate,
    /// Stability of the solution under mollified noise.
    Convergence,
    /// Rate studies: rough_integral_order, remainder_scaling, kernel_bounds, holder_exponents.
    Rates { kind: Option<String> },
    /// Canonical, modified and corrected runs on shared noise.
    Correction,
    /// Integration by parts for gradient nonlinearities.
    Gradient,
    /// Small-scale invariant suite.
    Validate,
}

fn configure(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let c = &cli.common;
    cfg.kind = match &cli.command {
        Command::Simulate => ExperimentKind::Simulate,
        Command::Convergence => ExperimentKind::Convergence,
        Command::Rates { kind } => {
            if let Some(k) = kind {
                cfg.rate = k.parse::<RateKind>()?;
            }
            ExperimentKind::Rates
        }
        Command::Correction => ExperimentKind::Correction,
        Command::Gradient => ExperimentKind::Gradient,
        Command::Validate => ExperimentKind::Validate,
    };
    if let Some(s) = c.seed {
        cfg.seed_base = s;
        cfg.solver.seed = s;
    }
    if let Some(m) = c.m {
        cfg.solver.m = m;
    }
    if let Some(dt) = c.dt {
        cfg.solver.dt = dt;
    }
    if let Some(e) = c.eps {
        if cfg.kind == ExperimentKind::Convergence {
            cfg.eps_ladder = vec![e];
        } else {
            cfg.solver.eps = Some(e);
        }
    }
    if let Some(n) = c.ensemble {
        cfg.ensemble = n;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Report> {
    let cfg = configure(cli)?;
    let format: Format = cli.common.format.parse()?;
    let out = PathBuf::from(&cfg.out_dir);
    let report = match cfg.kind {
        ExperimentKind::Simulate => run_simulate(&cfg, Some(&out))?,
        _ => run(&cfg)?,
    };
    let files = emit(&report, &cfg, format, &out)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(report) => {
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
