//! `analyze-direction` and `bench-runtime`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, ValueEnum};
use optlab::archive::load_params;
use optlab::baselines::{Adam, Bfgs, BfgsConfig, MomentumGd, TunedKind};
use optlab::bench::{direction_trace, runtime_scaling, RuntimeRow};
use optlab::nnet::{init_params, ArchConfig, OptimizerParams};
use optlab::optimus::{self, learned_step, InnerState, LearnedKind, StepConfig};
use optlab::trajectory::{self, FirstOrder, RecordOptions, StepRule, StopConfig, Trajectory};
use optlab::FunctionId;
use serde::Serialize;

use crate::config::config_hash;
use crate::evaluate::battery_problem;
use crate::manifest::Manifest;
use crate::report::{direction_rows, write_csv};
use crate::tune::tune_one;
use crate::{CliError, CliResult};

#[derive(Clone, Debug, Args, Serialize)]
pub struct DirectionArgs {
    /// Learned-optimizer weights; adds an `optimus` row set when given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub seeds: usize,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Adam learning rate; tuned on 2-d Rosenbrock when omitted.
    #[arg(long)]
    pub adam_lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Per-step (gradient, Newton) cosines of one run; `None` where undefined.
pub type Trace = Vec<Option<(f64, f64)>>;

/// Per-seed traces of one solver on untranslated 2-d Rosenbrock.
pub fn rosenbrock_traces<F>(
    seeds: usize,
    seed: u64,
    iters: usize,
    mut run: F,
) -> CliResult<Vec<Trace>>
where
    F: FnMut(
        &optlab::ObjectiveInstance,
        &[f64],
        &StopConfig,
        RecordOptions,
    ) -> optlab::Result<Trajectory>,
{
    let stop = StopConfig::fixed(iters);
    let record = RecordOptions {
        iterate_stride: 1,
        steps: true,
    };
    (0..seeds)
        .map(|i| {
            let (inst, x0) = battery_problem(seed, false, FunctionId::Rosenbrock, 2, i)?;
            let t = run(&inst, &x0, &stop, record)?;
            Ok(direction_trace(&inst, &t)?)
        })
        .collect()
}

pub fn cmd_analyze_direction(args: &DirectionArgs) -> CliResult<()> {
    let started = Instant::now();
    fs::create_dir_all(&args.out)?;
    let adam_lr = match args.adam_lr {
        Some(lr) => lr,
        None => {
            tune_one(
                TunedKind::Adam,
                FunctionId::Rosenbrock,
                2,
                64,
                100,
                args.seed,
            )?
            .best_lr
        }
    };
    let mut rows = Vec::new();
    let bfgs = rosenbrock_traces(args.seeds, args.seed, args.iters, |inst, x0, stop, rec| {
        trajectory::run(
            &mut Bfgs::new(inst.dim, BfgsConfig::default()),
            inst,
            x0,
            stop,
            rec,
        )
    })?;
    rows.extend(direction_rows("bfgs", &bfgs));
    let adam = rosenbrock_traces(args.seeds, args.seed, args.iters, |inst, x0, stop, rec| {
        trajectory::run(
            &mut FirstOrder(Adam::new(adam_lr, inst.dim)),
            inst,
            x0,
            stop,
            rec,
        )
    })?;
    rows.extend(direction_rows("adam", &adam));
    if let Some(ckpt) = &args.checkpoint {
        let (theta, _) = load_params(ckpt)?;
        let opt = rosenbrock_traces(args.seeds, args.seed, args.iters, |inst, x0, stop, rec| {
            optimus::run(&theta, LearnedKind::Optimus, inst, x0, stop, rec)
        })?;
        rows.extend(direction_rows("optimus", &opt));
    }
    let path = args.out.join("direction.csv");
    write_csv(&path, rows)?;
    let mut manifest = Manifest::new("analyze-direction", args, config_hash(args), args.seed)?;
    manifest.add(&args.out, &path);
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&args.out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    Default,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimedSolver {
    Optimus,
    AdafactorMlp,
    Adam,
    Gdm,
}

impl TimedSolver {
    pub fn name(self) -> &'static str {
        match self {
            TimedSolver::Optimus => "optimus",
            TimedSolver::AdafactorMlp => "adafactor_mlp",
            TimedSolver::Adam => "adam",
            TimedSolver::Gdm => "gdm",
        }
    }
}

impl FromStr for TimedSolver {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "optimus" => Ok(TimedSolver::Optimus),
            "adafactor_mlp" => Ok(TimedSolver::AdafactorMlp),
            "adam" => Ok(TimedSolver::Adam),
            "gdm" => Ok(TimedSolver::Gdm),
            other => Err(format!("unknown timed solver `{other}`")),
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct RuntimeArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![100, 250, 500, 1000])]
    pub dims: Vec<usize>,
    /// Timed steps per dimension for learned optimizers.
    #[arg(long, default_value_t = 15)]
    pub reps: usize,
    /// Timed steps per dimension for Adam and GD-M, whose steps take
    /// microseconds.
    #[arg(long, default_value_t = 2001)]
    pub fast_reps: usize,
    /// Untimed steps before timing (per dimension).
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Network shape when no checkpoint is given.
    #[arg(long, value_enum, default_value_t = ArchPreset::Default)]
    pub arch: ArchPreset,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["optimus".to_owned(), "adam".to_owned()])]
    pub solvers: Vec<String>,
    #[arg(long, default_value = "runtime-out")]
    pub out: PathBuf,
}

impl Default for RuntimeArgs {
    fn default() -> Self {
        Self {
            dims: vec![100, 250, 500, 1000],
            reps: 15,
            fast_reps: 2001,
            warmup: 2,
            arch: ArchPreset::Default,
            checkpoint: None,
            solvers: vec!["optimus".into(), "adam".into()],
            out: PathBuf::from("runtime-out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimedRow {
    pub solver: String,
    pub dim: usize,
    pub reps: usize,
    pub median_seconds: f64,
}

fn synthetic_gradient(n: usize) -> Vec<f64> {
    (0..n).map(|i| (0.37 * i as f64).sin()).collect()
}

/// Median time of one update step (objective evaluation excluded).
pub fn time_solver(
    solver: TimedSolver,
    theta: &OptimizerParams,
    args: &RuntimeArgs,
) -> CliResult<Vec<RuntimeRow>> {
    let rows = match solver {
        TimedSolver::Optimus | TimedSolver::AdafactorMlp => {
            let kind = if solver == TimedSolver::Optimus {
                LearnedKind::Optimus
            } else {
                LearnedKind::AdafactorMlp
            };
            runtime_scaling(
                |n| {
                    let mut state = InnerState::new(kind, &vec![0.5; n]);
                    let g = synthetic_gradient(n);
                    Ok(move || learned_step(theta, &mut state, &g).map(drop))
                },
                &args.dims,
                args.reps,
                args.warmup,
            )?
        }
        TimedSolver::Adam | TimedSolver::Gdm => runtime_scaling(
            |n| {
                let mut rule: Box<dyn StepRule> = if solver == TimedSolver::Adam {
                    Box::new(Adam::new(1e-3, n))
                } else {
                    Box::new(MomentumGd::new(1e-3, n))
                };
                let g = synthetic_gradient(n);
                let x = vec![0.0; n];
                Ok(move || rule.step(&x, &g).map(drop))
            },
            &args.dims,
            args.fast_reps,
            args.warmup.max(10),
        )?,
    };
    Ok(rows)
}

pub fn runtime_rows(args: &RuntimeArgs) -> CliResult<Vec<TimedRow>> {
    if args.dims.is_empty() || args.dims.windows(2).any(|w| w[0] >= w[1]) || args.dims[0] == 0 {
        return Err(CliError::usage(
            "--dims must be positive and strictly increasing",
        ));
    }
    let solvers = args
        .solvers
        .iter()
        .map(|s| s.parse::<TimedSolver>().map_err(CliError::usage))
        .collect::<CliResult<Vec<_>>>()?;
    let theta = match &args.checkpoint {
        Some(p) => load_params(p)?.0,
        None => {
            let arch = match args.arch {
                ArchPreset::Default => ArchConfig::default(),
                ArchPreset::Desk => ArchConfig::desk(),
            };
            init_params(0, &arch, StepConfig::default())?
        }
    };
    let mut out = Vec::new();
    for s in solvers {
        for r in time_solver(s, &theta, args)? {
            out.push(TimedRow {
                solver: s.name().to_owned(),
                dim: r.dim,
                reps: r.reps,
                median_seconds: r.median_seconds,
            });
        }
    }
    Ok(out)
}

pub fn write_runtime_csv(path: &Path, rows: &[TimedRow]) -> CliResult<()> {
    write_csv(path, rows)
}

pub fn cmd_bench_runtime(args: &RuntimeArgs) -> CliResult<()> {
    let started = Instant::now();
    let rows = runtime_rows(args)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("runtime.csv");
    write_runtime_csv(&path, &rows)?;
    let mut manifest = Manifest::new("bench-runtime", args, config_hash(args), 0)?;
    manifest.add(&args.out, &path);
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&args.out)?;
    Ok(())
}
