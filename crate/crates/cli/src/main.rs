//! `frb`: run experiments from TOML configs and replay their manifests.
//!
//! Exit codes: 0 success, 1 other failure (including a replay whose outputs
//! differ), 2 configuration error, 3 numerical divergence, 4 insufficient data.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use frb_core::experiments::{self, ExperimentConfig, ExperimentKind, RunManifest, MANIFEST_FILE};
use frb_core::Error;

#[derive(Parser, Debug)]
#[command(name = "frb", version, about = "Fractional rough Burgers / DP experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Master seed; overrides `noise.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core). Results do not depend on this.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo check of the Ornstein–Uhlenbeck mode covariances.
    Covariance(RunArgs),
    /// Spatial and temporal regularity exponents of the stochastic convolution.
    Regularity(RunArgs),
    /// Global solutions by window continuation.
    Simulate(RunArgs),
    /// Discrete energy balance and Gronwall envelope.
    Energy(RunArgs),
    /// Mollification ladder ‖u^ε − u^{ε/2}‖.
    Convergence(RunArgs),
    /// Paracontrolled solver with exponent report.
    Paracontrolled(RunArgs),
    /// Band-limited first-iterate scan (admissible-pair sign test).
    #[command(name = "admissible_scan", alias = "admissible-scan")]
    AdmissibleScan(RunArgs),
    /// Re-run a manifest and verify its outputs bit for bit.
    Replay {
        manifest: PathBuf,
        /// Where to write the re-run (default: `<manifest dir>/replay`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
}

fn load_config(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if cfg.experiment != kind {
        return Err(Error::Config(format!(
            "config describes a '{}' experiment, not '{kind}'",
            cfg.experiment
        )));
    }
    if let Some(seed) = args.seed {
        cfg.noise.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(m: &RunManifest, dir: &Path) {
    println!("{} run completed in {:.2}s", m.experiment, m.wall_clock_seconds.unwrap_or(0.0));
    println!("manifest: {}", dir.join(MANIFEST_FILE).display());
    for o in &m.outputs {
        println!("  {} ({})", dir.join(&o.file).display(), o.schema);
    }
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    match serde_json::to_string_pretty(&m.summary) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("warning: cannot render summary: {e}"),
    }
}

fn run_experiment(kind: ExperimentKind, args: &RunArgs) -> Result<(), Error> {
    let cfg = load_config(kind, args)?;
    let m = experiments::run(&cfg, args.threads)?;
    report(&m, &cfg.output_dir);
    Ok(())
}

fn replay(manifest: &Path, out: Option<&Path>, threads: usize) -> Result<bool, Error> {
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        manifest
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("replay")
    });
    let rep = experiments::replay(manifest, &out, threads)?;
    if rep.identical() {
        println!(
            "replay of {} reproduced {} output(s) bit-identically into {}",
            manifest.display(),
            rep.rerun.outputs.len(),
            out.display()
        );
    } else {
        eprintln!("replay differs in: {}", rep.mismatches.join(", "));
    }
    Ok(rep.identical())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Covariance(a) => run_experiment(ExperimentKind::Covariance, a),
        Command::Regularity(a) => run_experiment(ExperimentKind::Regularity, a),
        Command::Simulate(a) => run_experiment(ExperimentKind::Simulate, a),
        Command::Energy(a) => run_experiment(ExperimentKind::Energy, a),
        Command::Convergence(a) => run_experiment(ExperimentKind::Convergence, a),
        Command::Paracontrolled(a) => run_experiment(ExperimentKind::Paracontrolled, a),
        Command::AdmissibleScan(a) => run_experiment(ExperimentKind::AdmissibleScan, a),
        Command::Replay {
            manifest,
            out,
            threads,
        } => match replay(manifest, out.as_deref(), *threads) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
