//! Reference optimizers: Adam, gradient descent with momentum, BFGS with a
//! strong-Wolfe line search, basin hopping, and learning-rate grid search.

use nalgebra::{DMatrix, DVectorView};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::testfuncs::ObjectiveInstance;
use crate::trajectory::{
    self, FirstOrder, IterInfo, Point, RecordOptions, Solver, StepRule, StopConfig, TerminatedBy,
    Trajectory,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

impl StepRule for Adam {
    fn step(&mut self, _x: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        Ok(grad
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(g, (m, v))| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                -self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect())
    }
}

/// Heavy-ball momentum: `vel <- mu vel + g`, `dx = -lr vel`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumGd {
    pub lr: f64,
    pub mu: f64,
    pub velocity: Vec<f64>,
}

impl MomentumGd {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            mu: 0.9,
            velocity: vec![0.0; n],
        }
    }
}

impl StepRule for MomentumGd {
    fn step(&mut self, _x: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.velocity.len() {
            return Err(Error::DimensionMismatch {
                expected: self.velocity.len(),
                got: grad.len(),
            });
        }
        Ok(self
            .velocity
            .iter_mut()
            .zip(grad)
            .map(|(vel, g)| {
                *vel = self.mu * *vel + g;
                -self.lr * *vel
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BfgsConfig {
    pub c1: f64,
    pub c2: f64,
    pub max_trials: usize,
    /// Curvature pairs with `y's` at or below this are skipped.
    pub min_curvature: f64,
    /// Converged once the max-norm of the gradient drops to this.
    pub gtol: f64,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            c2: 0.9,
            max_trials: 20,
            min_curvature: 1e-10,
            gtol: 1e-12,
        }
    }
}

/// BFGS on the inverse Hessian, starting from the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Bfgs {
    pub cfg: BfgsConfig,
    pub h: DMatrix<f64>,
    pub line_search_failures: usize,
    pub skipped_updates: usize,
}

impl Bfgs {
    pub fn new(n: usize, cfg: BfgsConfig) -> Self {
        Self {
            cfg,
            h: DMatrix::identity(n, n),
            line_search_failures: 0,
            skipped_updates: 0,
        }
    }

    /// `H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T`, expanded so the
    /// result stays exactly symmetric.
    fn update_inverse(&mut self, s: &[f64], y: &[f64]) -> bool {
        let ys: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        if ys <= self.cfg.min_curvature {
            self.skipped_updates += 1;
            return false;
        }
        let n = s.len();
        let rho = 1.0 / ys;
        let hy = &self.h * DVectorView::from_slice(y, n);
        let yhy: f64 = hy.iter().zip(y).map(|(a, b)| a * b).sum();
        let coef = rho * rho * yhy + rho;
        for j in 0..n {
            for i in 0..n {
                self.h[(i, j)] += coef * s[i] * s[j] - rho * (s[i] * hy[j] + hy[i] * s[j]);
            }
        }
        true
    }
}

struct LineProbe {
    alpha: f64,
    f: f64,
    slope: f64,
    point: Option<Point>,
}

/// Strong-Wolfe line search (bracketing then cubic-interpolation zoom).
/// Returns the accepted probe and the number of evaluations used, or the
/// evaluation count on failure.
fn strong_wolfe(
    inst: &ObjectiveInstance,
    start: &Point,
    dir: &[f64],
    cfg: &BfgsConfig,
) -> std::result::Result<(Point, usize), usize> {
    let f0 = start.f;
    let slope0: f64 = start.g.iter().zip(dir).map(|(a, b)| a * b).sum();
    let mut evals = 0usize;
    let probe = |alpha: f64, evals: &mut usize| -> LineProbe {
        *evals += 1;
        let x: Vec<f64> = start
            .x
            .iter()
            .zip(dir)
            .map(|(a, d)| a + alpha * d)
            .collect();
        match Point::at(inst, x) {
            Ok(p) if p.f.is_finite() => {
                let slope = p.g.iter().zip(dir).map(|(a, b)| a * b).sum();
                LineProbe {
                    alpha,
                    f: p.f,
                    slope,
                    point: Some(p),
                }
            }
            _ => LineProbe {
                alpha,
                f: f64::INFINITY,
                slope: f64::NAN,
                point: None,
            },
        }
    };
    let armijo = |p: &LineProbe| p.f <= f0 + cfg.c1 * p.alpha * slope0;
    let curvature = |p: &LineProbe| p.slope.abs() <= -cfg.c2 * slope0;

    let mut prev = LineProbe {
        alpha: 0.0,
        f: f0,
        slope: slope0,
        point: None,
    };
    let mut alpha = 1.0;
    let (mut lo, mut hi);
    loop {
        if evals >= cfg.max_trials {
            return Err(evals);
        }
        let cur = probe(alpha, &mut evals);
        if !armijo(&cur) || (evals > 1 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Ok((cur.point.expect("finite probe"), evals));
        }
        if cur.slope >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        prev = cur;
        alpha *= 2.0;
    }
    while evals < cfg.max_trials {
        let trial = cubic_minimizer(&lo, &hi).unwrap_or(0.5 * (lo.alpha + hi.alpha));
        let cur = probe(trial, &mut evals);
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Ok((cur.point.expect("finite probe"), evals));
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
    }
    Err(evals)
}

/// Minimizer of the cubic through two probes, if it lies well inside the
/// bracket.
fn cubic_minimizer(a: &LineProbe, b: &LineProbe) -> Option<f64> {
    if !(a.f.is_finite() && b.f.is_finite() && a.slope.is_finite() && b.slope.is_finite()) {
        return None;
    }
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    let (lo, hi) = (a.alpha.min(b.alpha), a.alpha.max(b.alpha));
    let margin = 0.05 * (hi - lo);
    (t.is_finite() && t >= lo + margin && t <= hi - margin).then_some(t)
}

impl Solver for Bfgs {
    fn iterate(&mut self, inst: &ObjectiveInstance, point: &mut Point) -> Result<IterInfo> {
        let n = point.x.len();
        let g = DVectorView::from_slice(&point.g, n);
        let mut dir: Vec<f64> = (-(&self.h * g)).as_slice().to_vec();
        let slope: f64 = dir.iter().zip(&point.g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            // lost positive definiteness; restart from steepest descent
            self.h.fill_with_identity();
            dir = point.g.iter().map(|v| -v).collect();
        }
        let (next, evals) = match strong_wolfe(inst, point, &dir, &self.cfg) {
            Ok(found) => found,
            Err(used) => {
                self.line_search_failures += 1;
                let x: Vec<f64> = point
                    .x
                    .iter()
                    .zip(&dir)
                    .map(|(a, d)| a + 1e-8 * d)
                    .collect();
                (Point::at(inst, x)?, used + 1)
            }
        };
        let s: Vec<f64> = next.x.iter().zip(&point.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&point.g).map(|(a, b)| a - b).collect();
        self.update_inverse(&s, &y);
        *point = next;
        let gmax = point.g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Ok(IterInfo {
            evals,
            step: s,
            converged: gmax <= self.cfg.gtol,
        })
    }
}

/// One BFGS iteration from `point` (which it overwrites); returns the
/// evaluations used.
pub fn bfgs_step(state: &mut Bfgs, inst: &ObjectiveInstance, point: &mut Point) -> Result<usize> {
    Ok(state.iterate(inst, point)?.evals)
}

/// Baselines whose learning rate is tuned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunedKind {
    Adam,
    Gdm,
}

impl TunedKind {
    pub fn solver(self, lr: f64, n: usize) -> Box<dyn Solver + Send> {
        match self {
            TunedKind::Adam => Box::new(FirstOrder(Adam::new(lr, n))),
            TunedKind::Gdm => Box::new(FirstOrder(MomentumGd::new(lr, n))),
        }
    }
}

impl std::str::FromStr for TunedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(TunedKind::Adam),
            "gdm" => Ok(TunedKind::Gdm),
            other => Err(Error::Argument(format!("unknown optimizer `{other}`"))),
        }
    }
}

pub const LR_GRID_SIZE: usize = 100;

/// 100 log-spaced learning rates from 1e-6 to 1 inclusive.
pub fn lr_grid() -> Vec<f64> {
    (0..LR_GRID_SIZE)
        .map(|i| match i {
            0 => 1e-6,
            i if i == LR_GRID_SIZE - 1 => 1.0,
            i => 10f64.powf(-6.0 + 6.0 * i as f64 / (LR_GRID_SIZE - 1) as f64),
        })
        .collect()
}

/// Initial point for seed `i` of a battery rooted at `seed`.
pub fn initial_point(inst: &ObjectiveInstance, seed: u64, i: u64) -> Vec<f64> {
    inst.sample_point(&mut rng::stream(seed, &[0x1417, i]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub optimizer: TunedKind,
    pub function: crate::testfuncs::FunctionId,
    pub dim: usize,
    pub seed: u64,
    pub budget_iters: usize,
    pub best_lr: f64,
    pub grid: Vec<f64>,
    /// `None` where some run diverged.
    pub mean_final_loss: Vec<Option<f64>>,
    pub all_diverged: bool,
}

/// Grid search: every rate runs `inits` seeded starts for `budget_iters`
/// iterations; the rate with the lowest mean final loss wins.
pub fn tune_learning_rate(
    kind: TunedKind,
    inst: &ObjectiveInstance,
    budget_iters: usize,
    inits: usize,
    seed: u64,
) -> Result<TuneResult> {
    let grid = lr_grid();
    let stop = StopConfig::fixed(budget_iters);
    let starts: Vec<Vec<f64>> = (0..inits as u64)
        .map(|i| initial_point(inst, seed, i))
        .collect();
    let means: Vec<Option<f64>> = grid
        .par_iter()
        .map(|&lr| {
            let mut total = 0.0;
            for x0 in &starts {
                let mut solver = kind.solver(lr, inst.dim);
                let t = trajectory::run(solver.as_mut(), inst, x0, &stop, RecordOptions::default())
                    .ok()?;
                if t.terminated_by == TerminatedBy::Error {
                    return None;
                }
                total += t.final_loss();
            }
            let mean = total / starts.len() as f64;
            mean.is_finite().then_some(mean)
        })
        .collect();
    let best = means
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|m| (i, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let (best_lr, all_diverged) = match best {
        Some((i, _)) => (grid[i], false),
        None => (grid[0], true),
    };
    Ok(TuneResult {
        optimizer: kind,
        function: inst.id,
        dim: inst.dim,
        seed,
        budget_iters,
        best_lr,
        grid,
        mean_final_loss: means,
        all_diverged,
    })
}

/// Default perturbation: 5% of the domain-box width.
pub fn default_perturb_scale(inst: &ObjectiveInstance) -> f64 {
    let (lo, hi) = inst.domain_box();
    0.05 * (hi - lo)
}

/// Basin hopping around an inner run. Each hop runs `run_fn` to its own
/// termination from the perturbed best-so-far point; the concatenated
/// trajectory keeps every loss and the total evaluation count, and
/// numbers iterates along the concatenated loss curve.
pub fn basin_hopping<F, R>(
    mut run_fn: F,
    x0: &[f64],
    perturb_scale: f64,
    hops: usize,
    rng: &mut R,
) -> Result<Trajectory>
where
    F: FnMut(&[f64]) -> Result<Trajectory>,
    R: Rng + ?Sized,
{
    if hops == 0 {
        return Err(Error::Argument(
            "basin hopping needs at least one hop".into(),
        ));
    }
    let noise = Normal::new(0.0, perturb_scale)
        .map_err(|e| Error::Argument(format!("perturbation scale: {e}")))?;
    let mut total = run_fn(x0)?;
    let mut best = total.best_loss();
    for _ in 1..hops {
        if total.terminated_by == TerminatedBy::Error {
            break;
        }
        let start: Vec<f64> = total
            .best_x
            .iter()
            .map(|v| v + noise.sample(&mut *rng))
            .collect();
        let hop = run_fn(&start)?;
        let hop_best = hop.best_loss();
        let spent = total.func_evals;
        let offset = total.losses.len();
        if !hop.steps.is_empty() {
            // the perturbation is the step joining the two runs
            let jump = start
                .iter()
                .zip(&total.final_x)
                .map(|(a, b)| a - b)
                .collect();
            total.steps.push(jump);
        }
        total.losses.extend_from_slice(&hop.losses);
        total
            .cumulative_evals
            .extend(hop.cumulative_evals.iter().map(|e| e + spent));
        total
            .iterates
            .extend(hop.iterates.into_iter().map(|(k, x)| (k + offset, x)));
        total.steps.extend(hop.steps);
        total.func_evals += hop.func_evals;
        total.terminated_by = hop.terminated_by;
        total.final_x = hop.final_x;
        if hop_best < best {
            best = hop_best;
            total.best_x = hop.best_x;
        }
    }
    Ok(total)
}
