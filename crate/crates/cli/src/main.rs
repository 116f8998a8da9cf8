use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gmy_cli::commands::render_zoo;
use gmy_cli::{cmd_build, cmd_hyp, cmd_report, cmd_stats, cmd_tails, cmd_verify, cmd_zoo, CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "gmylab", version, about = "Hyperbolic times, induced Markov partitions and orbit statistics")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides run.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (overrides run.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Resolution floor (overrides geometry.resolution).
    #[arg(long, global = true)]
    resolution: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// List the systems and their grid verification.
    Zoo,
    /// Expansion-time tail over the reference disk.
    Tails,
    /// Per-point hyperbolic times and pre-ball certificates.
    Hyp,
    /// Reference setup, partition build and verification.
    Build,
    /// Re-verify an exported partition.
    Verify,
    /// Correlations and large deviations.
    Stats,
    /// Summarise a run directory.
    Report,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let ov = Overrides { seed: cli.seed, out: cli.out.clone(), resolution: cli.resolution };
    let config = || -> Result<RunConfig, CliError> {
        let path = cli.config.as_ref().ok_or_else(|| CliError::Config {
            field: "--config".into(),
            line: None,
            message: "this subcommand needs a config file".into(),
        })?;
        RunConfig::load(path, &ov)
    };
    match cli.cmd {
        Cmd::Zoo => print!("{}", render_zoo(&cmd_zoo())),
        Cmd::Tails => {
            let r = cmd_tails(&config()?)?;
            match &r.fit {
                Some(f) => println!("tail fit: tau {:.4} d {:.4e} r2 {:.4}", f.tau, f.rate, f.r_squared),
                None => println!("tail fit: {}", r.fit_error.as_deref().unwrap_or("none")),
            }
        }
        Cmd::Hyp => {
            let s = cmd_hyp(&config()?)?;
            println!("{} points, frequency min {:.4}, C2_hat {:.4e}", s.points, s.frequency_min, s.c2_hat);
        }
        Cmd::Build => {
            let b = cmd_build(&config()?)?;
            println!(
                "{} elements, uncovered {:.4e}, verification pass {}, build {:.1} s",
                b.partition.elements.len(),
                b.partition.uncovered_mass,
                b.verify.report.pass,
                b.build_seconds
            );
        }
        Cmd::Verify => {
            let v = cmd_verify(&config()?)?;
            println!("{} elements checked, {} failures", v.report.checked, v.report.failures.len());
        }
        Cmd::Stats => {
            let s = cmd_stats(&config()?)?;
            println!("correlation fit: {}", s.correlation.fit.as_ref().map(|f| format!("d {:.4e}", f.rate)).unwrap_or("none".into()));
        }
        Cmd::Report => {
            let dir = match (&cli.out, &cli.config) {
                (Some(o), _) => o.clone(),
                (None, Some(_)) => config()?.run.out.unwrap_or_else(|| PathBuf::from("out")),
                (None, None) => PathBuf::from("out"),
            };
            print!("{}", cmd_report(&dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error [config]: worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.reason());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
