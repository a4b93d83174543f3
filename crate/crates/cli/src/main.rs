//! `cdsopt`: runs the worked examples and the oracle suite from a TOML
//! config and writes CSV tables plus `manifest.toml` to the output folder.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical failure, 4 a check
//! failed. `CDSOPT_WORKERS` sets the number of worker threads.

use cdsopt::config::{Config, ModeName};
use cdsopt::experiments::{run_complete_example, run_incomplete_example, run_nocds, run_oracle_suite, RunManifest};
use cdsopt::Error;
use clap::{Parser, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Complete,
    Incomplete,
    Nocds,
    Oracle,
}

#[derive(Debug, Parser)]
#[command(name = "cdsopt", version, about = "Optimal equity and CDS positions under default risk")]
struct Args {
    /// TOML config file
    #[arg(long)]
    config: PathBuf,
    /// output folder
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Monte Carlo seed, overriding the config
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo path count, overriding the config
    #[arg(long)]
    paths: Option<usize>,
    /// time and space nodes as `<nt>x<nx>`, overriding the config
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// run to perform; defaults to the config's market mode
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("expected <nt>x<nx>, got `{s}`"))?;
    let nt = a.trim().parse().map_err(|e| format!("bad nt `{a}`: {e}"))?;
    let nx = b.trim().parse().map_err(|e| format!("bad nx `{b}`: {e}"))?;
    Ok((nt, nx))
}

const WORKERS_VAR: &str = "CDSOPT_WORKERS";

fn init_workers() -> Result<(), Error> {
    let Ok(v) = std::env::var(WORKERS_VAR) else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| Error::Config {
        path: WORKERS_VAR.into(),
        message: format!("expected a positive integer, got `{v}`"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config {
            path: WORKERS_VAR.into(),
            message: e.to_string(),
        })
}

fn run(args: &Args) -> Result<RunManifest, Error> {
    init_workers()?;
    let mut config = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.monte_carlo.seed = seed;
    }
    if let Some(paths) = args.paths {
        config.monte_carlo.paths = paths;
    }
    if let Some((nt, nx)) = args.grid {
        config.grid.nt = nt;
        config.grid.nx = nx;
    }
    let mode = args.mode.unwrap_or(match config.model.mode {
        ModeName::Complete => Mode::Complete,
        ModeName::Incomplete => Mode::Incomplete,
    });
    log::info!("running {mode:?} from {} into {}", args.config.display(), args.out.display());
    match mode {
        Mode::Complete => run_complete_example(&config, &args.out),
        Mode::Incomplete => run_incomplete_example(&config, &args.out),
        Mode::Nocds => run_nocds(&config, &args.out),
        Mode::Oracle => run_oracle_suite(&config, &args.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(manifest) => {
            for c in &manifest.checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!(
                    "{tag} {}: measured {:.6e}, reference {:.6e}, tolerance {:.1e} ({:?})",
                    c.name, c.measured, c.reference, c.tolerance, c.rule
                );
            }
            for o in &manifest.outputs {
                println!("wrote {} ({} rows)", args.out.join(&o.file).display(), o.rows);
            }
            if manifest.passed() {
                ExitCode::SUCCESS
            } else {
                eprintln!("{} check(s) failed", manifest.failures().len());
                ExitCode::from(4)
            }
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
    }
}
