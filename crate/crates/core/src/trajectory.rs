//! Optimization run records and the shared iteration loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::testfuncs::ObjectiveInstance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminatedBy {
    Stopped,
    MaxIters,
    Error,
}

/// Termination settings for a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopConfig {
    /// Window of previous losses the current loss is compared against.
    pub window: usize,
    pub beta: f64,
    pub eps: f64,
    pub max_iters: usize,
    /// Apply the relative-decrease rule. Disabled during meta-training.
    pub use_rule: bool,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            window: 5,
            beta: 1.0,
            eps: 1e-8,
            max_iters: 200,
            use_rule: true,
        }
    }
}

impl StopConfig {
    /// Fixed budget: only `max_iters` ends the run.
    pub fn fixed(max_iters: usize) -> Self {
        Self {
            max_iters,
            use_rule: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Argument("stop window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Relative-decrease stopping rule. `previous` holds the losses before the
/// current one; the rule is inactive until `window` of them exist.
pub fn should_stop(previous: &[f64], current: f64, cfg: &StopConfig) -> bool {
    let n = cfg.window;
    if n == 0 || previous.len() < n {
        return false;
    }
    let recent = &previous[previous.len() - n..];
    let avg = recent.iter().map(|f| cfg.beta * f).sum::<f64>() / n as f64;
    current > avg + cfg.eps
}

/// What to keep besides the loss curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RecordOptions {
    /// Keep every `n`-th iterate (0 keeps none).
    pub iterate_stride: usize,
    pub steps: bool,
}

/// One optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `losses[k]` is the objective at iterate `k`; `losses[0]` is the start.
    pub losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterates: Vec<(usize, Vec<f64>)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<Vec<f64>>,
    pub func_evals: usize,
    /// `cumulative_evals[k]`: objective evaluations spent up to iterate `k`.
    pub cumulative_evals: Vec<usize>,
    pub terminated_by: TerminatedBy,
    pub final_x: Vec<f64>,
    pub best_x: Vec<f64>,
}

impl Trajectory {
    pub fn iterations(&self) -> usize {
        self.losses.len() - 1
    }

    pub fn best_loss(&self) -> f64 {
        self.losses.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trajectory has an initial loss")
    }

    /// Cumulative minimum of the loss curve.
    pub fn best_so_far(&self) -> Vec<f64> {
        best_so_far(&self.losses)
    }
}

pub fn best_so_far(losses: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    losses
        .iter()
        .map(|&l| {
            best = best.min(l);
            best
        })
        .collect()
}

/// Current iterate with its objective value and gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
}

impl Point {
    pub fn at(inst: &ObjectiveInstance, x: Vec<f64>) -> Result<Self> {
        let (f, g) = inst.value_and_gradient(&x)?;
        Ok(Self { x, f, g })
    }
}

/// Outcome of a single solver iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterInfo {
    /// Objective evaluations (value and gradient together) consumed.
    pub evals: usize,
    pub step: Vec<f64>,
    /// Solver-side convergence (e.g. vanishing gradient).
    pub converged: bool,
}

/// Anything that advances an iterate using objective information.
pub trait Solver {
    fn iterate(&mut self, inst: &ObjectiveInstance, point: &mut Point) -> Result<IterInfo>;
}

/// Optimizer that maps a gradient to an additive step, one evaluation per
/// iteration.
pub trait StepRule {
    fn step(&mut self, x: &[f64], grad: &[f64]) -> Result<Vec<f64>>;
}

/// Adapts a [`StepRule`] to the [`Solver`] interface.
#[derive(Clone, Debug)]
pub struct FirstOrder<R>(pub R);

impl<R: StepRule> Solver for FirstOrder<R> {
    fn iterate(&mut self, inst: &ObjectiveInstance, point: &mut Point) -> Result<IterInfo> {
        let step = self.0.step(&point.x, &point.g)?;
        if step.iter().any(|s| !s.is_finite()) {
            return Err(Error::Step("non-finite update".into()));
        }
        let x: Vec<f64> = point.x.iter().zip(&step).map(|(a, b)| a + b).collect();
        *point = Point::at(inst, x)?;
        Ok(IterInfo {
            evals: 1,
            step,
            converged: false,
        })
    }
}

/// Runs `solver` from `x0` until the stopping rule fires, the solver
/// converges, an error occurs, or `max_iters` iterations have been taken.
pub fn run<S: Solver + ?Sized>(
    solver: &mut S,
    inst: &ObjectiveInstance,
    x0: &[f64],
    stop: &StopConfig,
    record: RecordOptions,
) -> Result<Trajectory> {
    stop.validate()?;
    let mut point = Point::at(inst, x0.to_vec())?;
    if !point.f.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite loss at x0 for {}",
            inst.id
        )));
    }
    let mut traj = Trajectory {
        losses: vec![point.f],
        iterates: Vec::new(),
        steps: Vec::new(),
        func_evals: 1,
        cumulative_evals: vec![1],
        terminated_by: TerminatedBy::MaxIters,
        final_x: Vec::new(),
        best_x: point.x.clone(),
    };
    if record.iterate_stride > 0 {
        traj.iterates.push((0, point.x.clone()));
    }
    let mut best = point.f;
    for k in 1..=stop.max_iters {
        let info = match solver.iterate(inst, &mut point) {
            Ok(info) if point.f.is_finite() => info,
            _ => {
                traj.terminated_by = TerminatedBy::Error;
                break;
            }
        };
        traj.func_evals += info.evals;
        traj.losses.push(point.f);
        traj.cumulative_evals.push(traj.func_evals);
        if point.f < best {
            best = point.f;
            traj.best_x.clone_from(&point.x);
        }
        if record.steps {
            traj.steps.push(info.step);
        }
        if record.iterate_stride > 0 && k % record.iterate_stride == 0 {
            traj.iterates.push((k, point.x.clone()));
        }
        let n = traj.losses.len();
        if info.converged || (stop.use_rule && should_stop(&traj.losses[..n - 1], point.f, stop)) {
            traj.terminated_by = TerminatedBy::Stopped;
            break;
        }
    }
    traj.final_x = point.x;
    Ok(traj)
}
