use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fracfp::acceptance::{self, Level};
use fracfp::config::RunConfig;
use fracfp::manifest::{RunOutput, RunStatus};
use fracfp::run::{self, RunError, Stage};

#[derive(Parser)]
#[command(name = "fracfp", version, about = "Fractional nonlinear Fokker-Planck toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file, or `builtin:<name>` for a catalog scenario.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Output directory (defaults to the config's `output_dir`, then `runs/<scenario>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "quick")]
    level: Level,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve one nonlinear resolvent problem.
    Resolvent,
    /// Implicit Euler evolution.
    Evolve,
    /// Gauge audit of two run directories.
    Gauge,
    /// Resolvent-kernel tables by both routes.
    Kernel,
    /// Particle simulation and superposition check.
    Sde,
    /// Acceptance suite.
    Accept,
    /// Every stage configured in the file.
    Scenario,
}

fn load(cli: &Cli) -> Result<RunConfig, RunError> {
    let spec = cli
        .config
        .as_deref()
        .ok_or_else(|| fracfp::config::ConfigError::Invalid("--config is required for this subcommand".into()))?;
    let mut cfg = RunConfig::load(spec)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn accept(cli: &Cli) -> Result<i32, RunError> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/accept"));
    let report = acceptance::acceptance_suite(cli.level, |c| println!("{}", c.line()));
    let cfg = fracfp::config::builtin("linear_heat_d1")?;
    let mut o = RunOutput::create(&out, "accept", &cfg)?;
    for c in &report.criteria {
        o.invariant(&format!("criterion_{}", c.id), if c.passed { 1.0 } else { 0.0 }, 1.0, c.passed);
    }
    o.manifest.status = if report.passed { RunStatus::Ok } else { RunStatus::AcceptanceFailure };
    o.write_json("report.json", &report)?;
    let m = o.finish()?;
    println!("acceptance ({:?}): {}", cli.level, if report.passed { "PASS" } else { "FAIL" });
    Ok(run::exit_code(m.status))
}

fn execute(cli: &Cli) -> Result<i32, RunError> {
    let stage = match cli.command {
        Command::Accept => return accept(cli),
        Command::Scenario => None,
        Command::Resolvent => Some(Stage::Resolvent),
        Command::Evolve => Some(Stage::Evolve),
        Command::Gauge => Some(Stage::Gauge),
        Command::Kernel => Some(Stage::Kernel),
        Command::Sde => Some(Stage::Sde),
    };
    let cfg = load(cli)?;
    let out = run::output_dir(&cfg, cli.out.as_deref());
    let manifest = match stage {
        Some(s) => run::run_stages(&cfg, &[s], &out, s.name())?,
        None => run::run_scenario(&cfg, &out)?,
    };
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    for e in &manifest.errors {
        eprintln!("error: {e}");
    }
    for i in manifest.invariants.iter().filter(|i| !i.passed) {
        eprintln!("invariant failed: {} = {:e} (threshold {:e})", i.name, i.value, i.threshold);
    }
    println!("{}: {:?}, outputs in {}", manifest.command, manifest.status, out.display());
    Ok(run::exit_code(manifest.status))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
