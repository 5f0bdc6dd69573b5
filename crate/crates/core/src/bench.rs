//! Benchmark metrics: normalized performance measures and profiles,
//! relative iterations to a baseline target, step-direction similarity, and
//! step-time scaling.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::testfuncs::ObjectiveInstance;
use crate::trajectory::Trajectory;

/// Slack allowed when checking `f_star <= f_hat <= f_worst`.
pub const ORDER_SLACK: f64 = 1e-9;
/// Denominator floor for performance ratios.
pub const RATIO_FLOOR: f64 = 1e-12;

/// `(f_hat - f_star) / (f_worst - f_star)`, or 0 when every solver reached
/// the minimum.
pub fn performance_measure(f_hat: f64, f_star: f64, f_worst: f64) -> Result<f64> {
    if !(f_hat.is_finite() && f_star.is_finite() && f_worst.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite measure inputs ({f_hat}, {f_star}, {f_worst})"
        )));
    }
    if f_hat < f_star - ORDER_SLACK || f_hat > f_worst + ORDER_SLACK {
        return Err(Error::Data(format!(
            "expected f* <= f_hat <= f_worst, got {f_star} / {f_hat} / {f_worst}"
        )));
    }
    let span = f_worst - f_star;
    if span <= 0.0 {
        return Ok(0.0);
    }
    Ok(((f_hat - f_star) / span).clamp(0.0, 1.0))
}

/// Best value a solver reached on a problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub problem: String,
    pub solver: String,
    pub f_hat: f64,
    pub f_star: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileResult {
    pub t_grid: Vec<f64>,
    pub solvers: Vec<String>,
    pub problems: Vec<String>,
    /// `ratios[p][s]`
    pub ratios: Vec<Vec<f64>>,
    /// `rho[s][i]` is the fraction of problems with ratio `<= t_grid[i]`.
    pub rho: Vec<Vec<f64>>,
}

impl ProfileResult {
    pub fn rho_at(&self, solver: &str, t: f64) -> Option<f64> {
        let s = self.solvers.iter().position(|n| n == solver)?;
        Some(fraction_within(&self.ratios, s, t))
    }
}

fn fraction_within(ratios: &[Vec<f64>], s: usize, t: f64) -> f64 {
    let hits = ratios.iter().filter(|row| row[s] <= t).count();
    hits as f64 / ratios.len() as f64
}

/// Log-spaced thresholds from 1 to `t_max`.
pub fn log_t_grid(t_max: f64, points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points)
        .map(|i| match i {
            0 => 1.0,
            i if i == points - 1 => t_max,
            i => t_max.powf(i as f64 / (points - 1) as f64),
        })
        .collect()
}

/// Ratios `r[p][s] = m[p][s] / max(min_s m[p][s], floor)` and the profile
/// over `t_grid`.
pub fn profile_from_measures(
    problems: Vec<String>,
    solvers: Vec<String>,
    measures: &[Vec<f64>],
    t_grid: &[f64],
) -> Result<ProfileResult> {
    if problems.is_empty() || solvers.is_empty() {
        return Err(Error::Data(
            "profile needs at least one problem and one solver".into(),
        ));
    }
    if measures.len() != problems.len() || measures.iter().any(|r| r.len() != solvers.len()) {
        return Err(Error::Data(
            "measure table does not match problems x solvers".into(),
        ));
    }
    let ratios: Vec<Vec<f64>> = measures
        .iter()
        .map(|row| {
            let best = row.iter().copied().fold(f64::INFINITY, f64::min);
            let denom = best.max(RATIO_FLOOR);
            row.iter()
                .map(|m| if *m <= best { 1.0 } else { m / denom })
                .collect()
        })
        .collect();
    let rho = (0..solvers.len())
        .map(|s| {
            t_grid
                .iter()
                .map(|&t| fraction_within(&ratios, s, t))
                .collect()
        })
        .collect();
    Ok(ProfileResult {
        t_grid: t_grid.to_vec(),
        solvers,
        problems,
        ratios,
        rho,
    })
}

/// Performance profile from raw results. Every (problem, solver) pair must
/// be present exactly once; `f_worst` per problem is the largest `f_hat`.
pub fn performance_profile(results: &[BenchmarkResult], t_grid: &[f64]) -> Result<ProfileResult> {
    let problems: BTreeSet<&str> = results.iter().map(|r| r.problem.as_str()).collect();
    let solvers: BTreeSet<&str> = results.iter().map(|r| r.solver.as_str()).collect();
    let mut table: BTreeMap<(&str, &str), &BenchmarkResult> = BTreeMap::new();
    for r in results {
        if table.insert((&r.problem, &r.solver), r).is_some() {
            return Err(Error::Data(format!(
                "duplicate result for problem `{}`, solver `{}`",
                r.problem, r.solver
            )));
        }
    }
    let missing = missing_pairs(&problems, &solvers, |p, s| table.contains_key(&(p, s)));
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing results: {}",
            missing.join(", ")
        )));
    }
    let mut measures = Vec::with_capacity(problems.len());
    for p in &problems {
        let row: Vec<&BenchmarkResult> = solvers.iter().map(|s| table[&(*p, *s)]).collect();
        let f_worst = row
            .iter()
            .map(|r| r.f_hat)
            .fold(f64::NEG_INFINITY, f64::max);
        measures.push(
            row.iter()
                .map(|r| performance_measure(r.f_hat, r.f_star, f_worst))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    profile_from_measures(
        problems.into_iter().map(String::from).collect(),
        solvers.into_iter().map(String::from).collect(),
        &measures,
        t_grid,
    )
}

/// `problem/solver` labels of absent grid cells.
pub fn missing_pairs<F>(
    problems: &BTreeSet<&str>,
    solvers: &BTreeSet<&str>,
    present: F,
) -> Vec<String>
where
    F: Fn(&str, &str) -> bool,
{
    problems
        .iter()
        .flat_map(|p| solvers.iter().map(move |s| (*p, *s)))
        .filter(|(p, s)| !present(p, s))
        .map(|(p, s)| format!("{p}/{s}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeIterations {
    pub target: f64,
    pub i_base: usize,
    /// `None` when the candidate never reaches the target.
    pub i_opt: Option<usize>,
    pub ratio: f64,
}

/// First index at which a best-so-far curve is at or below `target`.
pub fn first_reaching(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&v| v <= target)
}

/// How many times fewer iterations the candidate needs to reach the value
/// the baseline curve has at `base_budget`. Both curves are best-so-far
/// losses indexed by iteration (index 0 is the start). Iteration counts are
/// floored at 1 so a start that is already at the target counts as one
/// iteration.
pub fn relative_iterations(
    opt_curve: &[f64],
    base_curve: &[f64],
    base_budget: usize,
) -> Result<RelativeIterations> {
    let idx = base_budget.min(base_curve.len().saturating_sub(1));
    let target = *base_curve
        .get(idx)
        .ok_or_else(|| Error::Data("empty baseline curve".into()))?;
    let i_base = first_reaching(base_curve, target)
        .expect("target is on the curve")
        .max(1);
    let i_opt = first_reaching(opt_curve, target).map(|i| i.max(1));
    let ratio = i_opt.map_or(0.0, |i| i_base as f64 / i as f64);
    Ok(RelativeIterations {
        target,
        i_base,
        i_opt,
        ratio,
    })
}

/// Same ratio measured in cumulative objective evaluations; `evals[k]` is
/// the evaluation count spent when iterate `k` was reached.
pub fn relative_evaluations(
    opt_curve: &[f64],
    opt_evals: &[f64],
    base_curve: &[f64],
    base_evals: &[f64],
    base_budget: usize,
) -> Result<f64> {
    let it = relative_iterations(opt_curve, base_curve, base_budget)?;
    let Some(i_opt) = first_reaching(opt_curve, it.target) else {
        return Ok(0.0);
    };
    let i_base = first_reaching(base_curve, it.target).expect("target is on the curve");
    let e_base = *base_evals
        .get(i_base)
        .ok_or_else(|| Error::Data("evaluation counts too short".into()))?;
    let e_opt = *opt_evals
        .get(i_opt)
        .ok_or_else(|| Error::Data("evaluation counts too short".into()))?;
    Ok(e_base.max(1.0) / e_opt.max(1.0))
}

/// Element-wise mean of several curves over `len` points; a curve shorter
/// than `len` is padded with its last value.
pub fn mean_curve(curves: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for c in curves {
        for (k, o) in out.iter_mut().enumerate() {
            *o += c.get(k).or(c.last()).copied().unwrap_or(f64::NAN);
        }
    }
    let n = curves.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Nearest-rank percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Absolute cosine similarity of a step to the negative gradient and to the
/// Newton direction `-H^{-1} g`. `None` if the step or gradient vanishes.
pub fn direction_similarity(dx: &[f64], grad: &[f64], hess: &DMatrix<f64>) -> Option<(f64, f64)> {
    let n = dx.len();
    let dx = DVector::from_column_slice(dx);
    let g = DVector::from_column_slice(grad);
    let (dn, gn) = (dx.norm(), g.norm());
    if dn == 0.0 || gn == 0.0 || !dn.is_finite() || !gn.is_finite() {
        return None;
    }
    let cos_grad = dx.dot(&g).abs() / (dn * gn);
    let newton = hess
        .clone()
        .lu()
        .solve(&g)
        .filter(|v| v.iter().all(|x| x.is_finite()))
        .or_else(|| {
            (hess + DMatrix::<f64>::identity(n, n) * 1e-8)
                .lu()
                .solve(&g)
        })?;
    let nn = newton.norm();
    if nn == 0.0 || !nn.is_finite() {
        return None;
    }
    let cos_newton = dx.dot(&newton).abs() / (dn * nn);
    Some((cos_grad, cos_newton))
}

/// Similarities of every recorded step of a trajectory. Needs iterates at
/// stride 1 and recorded steps; entry `k` describes the step taken from
/// iterate `k`.
pub fn direction_trace(
    inst: &ObjectiveInstance,
    traj: &Trajectory,
) -> Result<Vec<Option<(f64, f64)>>> {
    if traj.steps.is_empty() {
        return Ok(Vec::new());
    }
    if traj.iterates.len() < traj.steps.len() {
        return Err(Error::Data(
            "direction analysis needs every iterate recorded".into(),
        ));
    }
    traj.steps
        .iter()
        .zip(&traj.iterates)
        .enumerate()
        .map(|(k, (dx, (idx, x)))| {
            if *idx != k {
                return Err(Error::Data(
                    "direction analysis needs every iterate recorded".into(),
                ));
            }
            let g = inst.gradient(x)?;
            let h = inst.hessian(x)?;
            Ok(direction_similarity(dx, &g, &h))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub dim: usize,
    pub reps: usize,
    pub median_seconds: f64,
}

/// Median wall time of one call to the step closure produced by
/// `make(dim)`, over `reps` timed calls after `warmup` untimed ones. Timed
/// calls go round-robin over the dimensions so slow drift in machine speed
/// affects every dimension alike.
pub fn runtime_scaling<F, S>(
    mut make: F,
    dims: &[usize],
    reps: usize,
    warmup: usize,
) -> Result<Vec<RuntimeRow>>
where
    F: FnMut(usize) -> Result<S>,
    S: FnMut() -> Result<()>,
{
    if reps == 0 {
        return Err(Error::Argument("runtime scaling needs reps >= 1".into()));
    }
    if dims.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Argument("dims must be sorted ascending".into()));
    }
    let mut steps = dims.iter().map(|&d| make(d)).collect::<Result<Vec<_>>>()?;
    for step in &mut steps {
        for _ in 0..warmup {
            step()?;
        }
    }
    let mut times = vec![Vec::with_capacity(reps); dims.len()];
    for _ in 0..reps {
        for (step, t) in steps.iter_mut().zip(&mut times) {
            let start = Instant::now();
            step()?;
            t.push(start.elapsed().as_secs_f64());
        }
    }
    let rows = dims
        .iter()
        .zip(&mut times)
        .map(|(&dim, t)| RuntimeRow {
            dim,
            reps,
            median_seconds: median(t),
        })
        .collect();
    Ok(rows)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
