//! The `dismob` command line: subcommand parsing and exit-status mapping.
//!
//! Exit status is 0 on success, 1 for invalid configuration, input or
//! missing artifacts, and 2 for failures while running.

pub mod manifest;
pub mod plots;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgGroup, Parser, Subcommand};
use dismob_core::diffusion::ModelConfig;
use dismob_core::mobility::GridSpec;
use dismob_core::nn::gradcheck::GradCheckOptions;
use dismob_core::training::gradcheck_model;
use dismob_core::{Error, Result};

use crate::manifest::Lock;
use crate::stages::Run;

/// Passing threshold of `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "dismob", version, about = "Disaster-aware mobility trajectory generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate every configured city (or one) and write its trajectories.
    MakeWorld {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        city: Option<String>,
    },
    /// Fit the decay law per city from normal and disaster flows.
    FitPhysics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        city: Option<String>,
    },
    /// Meta-train over the source cities, or train one city alone.
    #[command(group(ArgGroup::new("how").required(true).args(["meta", "single_city"])))]
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        meta: bool,
        #[arg(long)]
        single_city: bool,
        /// City for --single-city; defaults to the target city.
        #[arg(long)]
        city: Option<String>,
    },
    /// Fine-tune the meta checkpoint on the target city.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        city: Option<String>,
    },
    /// Sample disaster-day trajectories from a checkpoint.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        city: Option<String>,
        /// Defaults to the adapted checkpoint of the city.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare generated trajectories with the held-out real ones.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        city: Option<String>,
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Also write SVG histograms of the four behavior statistics.
        #[arg(long)]
        plots: bool,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck {
        /// Model and grid from this config; the default model otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 400)]
        max_coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// World, physics, meta-training, adaptation, generation, evaluation.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Logging verbosity comes from `UNIDISMOB_LOG` (e.g. `info`, `debug`).
pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNIDISMOB_LOG", "warn"))
        .format_timestamp(None)
        .try_init();
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `argv` and runs the command, returning the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn with_run(config: &PathBuf, f: impl FnOnce(&Run) -> Result<()>) -> Result<i32> {
    let run = Run::load(config)?;
    let _lock = Lock::acquire(&run.root)?;
    f(&run)?;
    Ok(0)
}

pub fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::MakeWorld { config, city } => with_run(&config, |r| {
            for c in r.cities(city.as_deref())? {
                r.make_world(c)?;
            }
            Ok(())
        }),
        Command::FitPhysics { config, city } => with_run(&config, |r| {
            for c in r.cities(city.as_deref())? {
                r.fit_physics(c)?;
            }
            Ok(())
        }),
        Command::Train { config, meta, city, .. } => with_run(&config, |r| {
            if meta {
                if city.is_some() {
                    return Err(Error::InvalidInput("--city applies to --single-city only".into()));
                }
                r.train_meta().map(drop)
            } else {
                r.train_single(r.city(city.as_deref())?).map(drop)
            }
        }),
        Command::Adapt { config, city } => with_run(&config, |r| r.adapt(r.city(city.as_deref())?).map(drop)),
        Command::Generate { config, city, checkpoint } => {
            with_run(&config, |r| r.generate(r.city(city.as_deref())?, checkpoint.as_deref()).map(drop))
        }
        Command::Evaluate { config, city, generated, plots } => {
            with_run(&config, |r| r.evaluate(r.city(city.as_deref())?, generated.as_deref(), plots).map(drop))
        }
        Command::Gradcheck { config, max_coords, seed } => gradcheck(config, max_coords, seed),
        Command::Pipeline { config } => with_run(&config, |r| r.pipeline()),
    }
}

/// Grid used by `gradcheck` without a config.
pub fn default_gradcheck_grid() -> GridSpec {
    GridSpec { rows: 6, cols: 6, cell_km: 1.0, slots_per_day: 24, days: 1, slot_minutes: 60 }
}

fn gradcheck(config: Option<PathBuf>, max_coords: usize, seed: u64) -> Result<i32> {
    let (model, grid) = match &config {
        Some(p) => {
            let run = Run::load(p)?;
            (run.cfg.model.clone(), run.cfg.target().grid.clone())
        }
        None => (ModelConfig::default(), default_gradcheck_grid()),
    };
    let opts = GradCheckOptions { max_coords, seed, ..GradCheckOptions::default() };
    let r = gradcheck_model(&model, &grid, 3, &opts, seed)?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {}[{}])",
        r.max_rel_error, r.coords_checked, r.worst_param, r.worst_index
    );
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        println!("gradcheck passed (< {GRADCHECK_TOLERANCE:e})");
        Ok(0)
    } else {
        println!("gradcheck FAILED (>= {GRADCHECK_TOLERANCE:e})");
        Ok(2)
    }
}
