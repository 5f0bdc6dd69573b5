//! `tune`: learning-rate grid search for Adam and GD-M.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use optlab::baselines::{tune_learning_rate, TuneResult, TunedKind};
use optlab::{FunctionId, ObjectiveInstance};
use serde::Serialize;

use crate::config::config_hash;
use crate::manifest::Manifest;
use crate::{CliError, CliResult};

#[derive(Clone, Debug, Args, Serialize)]
pub struct TuneArgs {
    /// `adam` or `gdm`.
    #[arg(long)]
    pub optimizer: String,
    /// Function names, comma separated (e.g. `rosenbrock,sphere`).
    #[arg(long, value_delimiter = ',', required = true)]
    pub function: Vec<String>,
    /// Dimensions, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeded initial points per rate.
    #[arg(long, default_value_t = 64)]
    pub inits: usize,
    /// Iterations per run.
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn parse_function(name: &str) -> CliResult<FunctionId> {
    name.parse()
        .map_err(|_| CliError::usage(format!("unknown function `{name}`")))
}

pub fn tune_file_name(kind: TunedKind, id: FunctionId, dim: usize) -> String {
    let k = match kind {
        TunedKind::Adam => "adam",
        TunedKind::Gdm => "gdm",
    };
    format!("tune_{k}_{id}_{dim}.json")
}

/// Tunes on the untranslated instance of `id` in `dim` dimensions.
pub fn tune_one(
    kind: TunedKind,
    id: FunctionId,
    dim: usize,
    inits: usize,
    budget: usize,
    seed: u64,
) -> CliResult<TuneResult> {
    let inst = ObjectiveInstance::centered(id, dim)?;
    let result = tune_learning_rate(kind, &inst, budget, inits, seed)?;
    if result.all_diverged {
        eprintln!("warning: every learning rate diverged for {kind:?} on {id} d={dim}");
    }
    Ok(result)
}

pub fn write_tune_result(out: &Path, result: &TuneResult) -> CliResult<PathBuf> {
    let path = out.join(tune_file_name(
        result.optimizer,
        result.function,
        result.dim,
    ));
    fs::write(&path, serde_json::to_vec_pretty(result)?)?;
    Ok(path)
}

pub fn cmd_tune(args: &TuneArgs) -> CliResult<()> {
    let kind: TunedKind = args.optimizer.parse().map_err(|_| {
        CliError::usage(format!(
            "unknown optimizer `{}` (expected adam or gdm)",
            args.optimizer
        ))
    })?;
    let functions = args
        .function
        .iter()
        .map(|f| parse_function(f))
        .collect::<CliResult<Vec<_>>>()?;
    if args.dims.iter().any(|d| *d < 2) {
        return Err(CliError::usage("dimensions must be >= 2"));
    }
    if args.inits == 0 {
        return Err(CliError::usage("--inits must be >= 1"));
    }
    let started = Instant::now();
    fs::create_dir_all(&args.out)?;
    let mut manifest = Manifest::new("tune", args, config_hash(args), args.seed)?;
    for &id in &functions {
        for &dim in &args.dims {
            let result = tune_one(kind, id, dim, args.inits, args.budget, args.seed)?;
            let path = write_tune_result(&args.out, &result)?;
            manifest.add(&args.out, &path);
        }
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&args.out)?;
    Ok(())
}
