use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopdual::config::ExperimentConfig;
use koopdual::{pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "koopctl", version, about = "Koopman identification and dual-loop control experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the plant and write snapshot data per noise level
    Generate(Common),
    /// Fit Koopman models and mismatch bounds
    Identify(Common),
    /// LQG design and robust compensator synthesis
    Synthesize(Common),
    /// Closed-loop runs, LQG-only and dual loop
    Simulate(Common),
    /// Collate runs into plot-ready CSV files
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the master seed of the config
    #[arg(long)]
    seed: Option<u64>,
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| Error::Config(format!("{}: {e}", c.config.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate(c) => {
            let (cfg, out) = load(&c)?;
            for p in pipeline::generate(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Cmd::Identify(c) => {
            let (cfg, out) = load(&c)?;
            for s in pipeline::identify(&cfg, &out)? {
                println!(
                    "sigma {}: U {:.4e}, decay rate {:.4e}, one-step rms {}",
                    s.sigma,
                    s.bounds.u,
                    s.decay_rate,
                    s.one_step_rms.map_or("n/a".into(), |v| format!("{v:.3e}"))
                );
            }
        }
        Cmd::Synthesize(c) => {
            let (cfg, out) = load(&c)?;
            for r in pipeline::synthesize(&cfg, &out)? {
                println!(
                    "sigma {}: gamma {:.4e} at lambda {:.3e}, sector scale {:e}, verified {}",
                    r.sigma,
                    r.best_gamma.unwrap_or(f64::NAN),
                    r.lambda.unwrap_or(f64::NAN),
                    r.sector_scale.unwrap_or(f64::NAN),
                    r.verification.as_ref().is_some_and(|v| v.pass)
                );
            }
        }
        Cmd::Simulate(c) => {
            let (cfg, out) = load(&c)?;
            let rep = pipeline::simulate(&cfg, &out)?;
            for r in rep.runs.iter().filter(|r| !r.ok) {
                eprintln!(
                    "run sigma {} seed {} {}: {}",
                    r.sigma,
                    r.seed,
                    r.controller.name(),
                    r.error.as_deref().unwrap_or("failed")
                );
            }
            for c in &rep.comparison {
                println!(
                    "sigma {}: dual converged {}/{}, lqg not converged {}/{}",
                    c.sigma, c.dual_converged, c.runs, c.lqg_not_converged, c.runs
                );
            }
        }
        Cmd::Report(c) => {
            let (cfg, out) = load(&c)?;
            let m = pipeline::report(&cfg, &out)?;
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            for f in &m.files {
                println!("wrote {}", out.join(f).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("koopctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
