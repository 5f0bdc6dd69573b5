//! `report`: aggregates a directory of trajectory files into performance
//! profiles, relative-iteration percentiles and mean-loss tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use optlab::bench::{
    direction_trace, log_t_grid, mean_curve, percentile, performance_profile, relative_evaluations,
    relative_iterations, BenchmarkResult,
};
use optlab::FunctionId;
use serde::Serialize;

use crate::analyze::{runtime_rows, write_runtime_csv, RuntimeArgs};
use crate::config::config_hash;
use crate::evaluate::{TrajectoryFile, TRAJECTORY_DIR};
use crate::manifest::Manifest;
use crate::{CliError, CliResult};

pub const PERCENTILES: [f64; 5] = [10.0, 25.0, 50.0, 75.0, 90.0];

#[derive(Clone, Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Directory written by `evaluate` (or its `trajectories` subdirectory).
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference solver for relative iterations (default: `adam` if present,
    /// otherwise the first solver by name).
    #[arg(long)]
    pub baseline: Option<String>,
    /// Iteration at which the baseline's mean curve defines the target.
    #[arg(long, default_value_t = 100)]
    pub base_budget: usize,
    /// Largest performance-ratio threshold in the profile grid.
    #[arg(long, default_value_t = 1e4)]
    pub t_max: f64,
    #[arg(long, default_value_t = 201)]
    pub t_points: usize,
    /// Emit direction.csv from trajectories that recorded their steps.
    #[arg(long)]
    pub direction: bool,
    /// Emit runtime.csv by timing the solvers.
    #[arg(long)]
    pub runtime: bool,
}

/// Trajectories grouped as problem label -> solver -> seed index.
pub type Grid = BTreeMap<(FunctionId, usize), BTreeMap<String, BTreeMap<usize, TrajectoryFile>>>;

pub fn load_results(dir: &Path) -> CliResult<Vec<TrajectoryFile>> {
    let sub = dir.join(TRAJECTORY_DIR);
    let dir = if sub.is_dir() { sub } else { dir.to_owned() };
    let entries = fs::read_dir(&dir)
        .map_err(|e| CliError::data(format!("reading results {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p)?;
            serde_json::from_slice(&bytes).map_err(|e| {
                CliError::data(format!("{} is not a trajectory file: {e}", p.display()))
            })
        })
        .collect()
}

/// Groups results and checks that every solver has every seed of every
/// problem.
pub fn build_grid(results: Vec<TrajectoryFile>) -> CliResult<Grid> {
    if results.is_empty() {
        return Err(CliError::data("no trajectory files found"));
    }
    let solvers: BTreeSet<String> = results.iter().map(|r| r.solver.clone()).collect();
    let mut grid = Grid::new();
    for r in results {
        let cell = grid
            .entry((r.function, r.requested_dim))
            .or_default()
            .entry(r.solver.clone())
            .or_default();
        if cell.insert(r.seed_index, r).is_some() {
            return Err(CliError::data(
                "duplicate trajectory for one solver/problem/seed",
            ));
        }
    }
    let mut missing = Vec::new();
    for ((id, dim), by_solver) in &grid {
        let seeds: BTreeSet<usize> = by_solver.values().flat_map(|m| m.keys().copied()).collect();
        for s in &solvers {
            for seed in &seeds {
                if !by_solver.get(s).is_some_and(|m| m.contains_key(seed)) {
                    missing.push(format!("{id}_{dim}/{s}/s{seed:03}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(CliError::data(format!(
            "incomplete results grid; missing {} entries: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(grid)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

#[derive(Debug, Serialize)]
struct MeanLossRow<'a> {
    function: FunctionId,
    dim: usize,
    solver: &'a str,
    seeds: usize,
    mean_final_loss: f64,
    mean_best_loss: f64,
    f_star: f64,
}

#[derive(Debug, Serialize)]
struct ProfileRow<'a> {
    t: f64,
    solver: &'a str,
    rho: f64,
}

#[derive(Debug, Serialize)]
struct RelRow {
    percentile: f64,
    solver_pair: String,
    ratio: f64,
    problem_label: String,
    /// Seeds that never reached the target.
    unreached: usize,
}

#[derive(Debug, Serialize)]
pub struct DirectionRow {
    pub iteration: usize,
    pub cos_grad: f64,
    pub cos_newton: f64,
    pub solver: String,
    pub samples: usize,
}

/// Per-iteration mean similarities for one solver; undefined samples are
/// skipped.
pub fn direction_rows(solver: &str, traces: &[Vec<Option<(f64, f64)>>]) -> Vec<DirectionRow> {
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .filter_map(|k| {
            let vals: Vec<(f64, f64)> = traces
                .iter()
                .filter_map(|t| t.get(k).copied().flatten())
                .collect();
            (!vals.is_empty()).then(|| DirectionRow {
                iteration: k,
                cos_grad: mean(vals.iter().map(|v| v.0)),
                cos_newton: mean(vals.iter().map(|v| v.1)),
                solver: solver.to_owned(),
                samples: vals.len(),
            })
        })
        .collect()
}

pub(crate) fn write_csv<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn report(args: &ReportArgs) -> CliResult<Manifest> {
    let started = Instant::now();
    let grid = build_grid(load_results(&args.results)?)?;
    fs::create_dir_all(&args.out)?;
    let hash = grid
        .values()
        .flat_map(|m| m.values())
        .flat_map(|m| m.values())
        .next()
        .map(|t| t.config_hash.clone())
        .unwrap_or_default();
    let mut manifest = Manifest::new("report", args, config_hash(&(args, &hash)), 0)?;
    let solvers: Vec<String> = grid
        .values()
        .next()
        .map(|m| m.keys().cloned().collect())
        .unwrap_or_default();

    // mean losses and the profile
    let mut mean_rows = Vec::new();
    let mut results = Vec::new();
    for ((id, dim), by_solver) in &grid {
        for (solver, runs) in by_solver {
            let f_star = runs.values().next().map_or(0.0, |r| r.f_star);
            let best = mean(runs.values().map(|r| r.best_loss));
            mean_rows.push(MeanLossRow {
                function: *id,
                dim: *dim,
                solver,
                seeds: runs.len(),
                mean_final_loss: mean(runs.values().map(|r| r.final_loss)),
                mean_best_loss: best,
                f_star,
            });
            results.push(BenchmarkResult {
                problem: format!("{id}_{dim}"),
                solver: solver.clone(),
                f_hat: best.max(f_star),
                f_star,
            });
        }
    }
    let path = args.out.join("mean_final_loss.csv");
    write_csv(&path, &mean_rows)?;
    manifest.add(&args.out, &path);

    let profile = performance_profile(&results, &log_t_grid(args.t_max, args.t_points))?;
    let path = args.out.join("profile.csv");
    write_csv(
        &path,
        profile.solvers.iter().enumerate().flat_map(|(s, name)| {
            profile
                .t_grid
                .iter()
                .zip(&profile.rho[s])
                .map(move |(t, rho)| ProfileRow {
                    t: *t,
                    solver: name,
                    rho: *rho,
                })
        }),
    )?;
    manifest.add(&args.out, &path);

    // relative iterations and evaluations against the baseline
    let baseline = match &args.baseline {
        Some(b) if solvers.contains(b) => b.clone(),
        Some(b) => {
            return Err(CliError::usage(format!(
                "baseline `{b}` is not among the solvers"
            )))
        }
        None => solvers
            .iter()
            .find(|s| *s == "adam")
            .unwrap_or(&solvers[0])
            .clone(),
    };
    let mut iter_rows = Vec::new();
    let mut eval_rows = Vec::new();
    let len = args.base_budget + 1;
    for ((id, dim), by_solver) in &grid {
        let label = format!("{id}_{dim}");
        let base = &by_solver[&baseline];
        let base_bsf: Vec<Vec<f64>> = base.values().map(|r| r.trajectory.best_so_far()).collect();
        let base_curve = mean_curve(&base_bsf, len);
        let base_evals: Vec<Vec<f64>> = base
            .values()
            .map(|r| {
                r.trajectory
                    .cumulative_evals
                    .iter()
                    .map(|e| *e as f64)
                    .collect()
            })
            .collect();
        let base_evals = mean_curve(&base_evals, len);
        for (solver, runs) in by_solver {
            if *solver == baseline {
                continue;
            }
            let mut iters = Vec::new();
            let mut evals = Vec::new();
            let mut unreached = 0;
            for r in runs.values() {
                let bsf = r.trajectory.best_so_far();
                let it = relative_iterations(&bsf, &base_curve, args.base_budget)?;
                unreached += it.i_opt.is_none() as usize;
                iters.push(it.ratio);
                let ev: Vec<f64> = r
                    .trajectory
                    .cumulative_evals
                    .iter()
                    .map(|e| *e as f64)
                    .collect();
                evals.push(relative_evaluations(
                    &bsf,
                    &ev,
                    &base_curve,
                    &base_evals,
                    args.base_budget,
                )?);
            }
            let pair = format!("{solver}/{baseline}");
            for q in PERCENTILES {
                iter_rows.push(RelRow {
                    percentile: q,
                    solver_pair: pair.clone(),
                    ratio: percentile(&iters, q),
                    problem_label: label.clone(),
                    unreached,
                });
                eval_rows.push(RelRow {
                    percentile: q,
                    solver_pair: pair.clone(),
                    ratio: percentile(&evals, q),
                    problem_label: label.clone(),
                    unreached,
                });
            }
        }
    }
    for (name, rows) in [("rel_iters.csv", iter_rows), ("rel_evals.csv", eval_rows)] {
        let path = args.out.join(name);
        write_csv(&path, rows)?;
        manifest.add(&args.out, &path);
    }

    if args.direction {
        let mut rows = Vec::new();
        for solver in &solvers {
            let mut traces = Vec::new();
            for by_solver in grid.values() {
                for r in by_solver[solver].values() {
                    if r.trajectory.steps.is_empty() {
                        continue;
                    }
                    traces.push(direction_trace(&r.instance()?, &r.trajectory)?);
                }
            }
            rows.extend(direction_rows(solver, &traces));
        }
        if rows.is_empty() {
            return Err(CliError::data(
                "--direction needs trajectories evaluated with record_steps",
            ));
        }
        let path = args.out.join("direction.csv");
        write_csv(&path, rows)?;
        manifest.add(&args.out, &path);
    }

    if args.runtime {
        let rows = runtime_rows(&RuntimeArgs::default())?;
        let path = args.out.join("runtime.csv");
        write_runtime_csv(&path, &rows)?;
        manifest.add(&args.out, &path);
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    Ok(manifest)
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let manifest = report(args)?;
    manifest.write(&args.out)?;
    Ok(())
}
