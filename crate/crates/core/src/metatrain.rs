//! Meta-training with persistent evolution strategies (PES).
//!
//! Each particle owns a task and two persistent inner trajectories, one run
//! with `theta + eps` and one with `theta - eps`. Every meta-step advances
//! both by `K` inner steps with a fresh `eps`, accumulates `xi += eps`, and
//! contributes `xi (L+ - L-) / (2 sigma^2)` to the meta-gradient. A particle
//! restarts (new task, `xi = 0`) once it has run `unroll_length` steps.
//!
//! All randomness is derived from `(seed, purpose, meta_step, particle)`, and
//! contributions are reduced in particle order, so runs are reproducible
//! regardless of the worker count.

use std::fs;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{params_archive, params_from_archive, Archive, Tensor};
use crate::error::{Error, Result};
use crate::features::FeatureState;
use crate::nnet::{init_params, ArchConfig, OptimizerParams};
use crate::optimus::{self, learned_step, InnerState, LearnedKind, PrecondState, StepConfig};
use crate::rng;
use crate::testfuncs::{sample_task, FunctionId, ObjectiveInstance};
use crate::trajectory::{Point, StopConfig};

/// Window loss substituted for a diverged unroll.
pub const PENALTY: f64 = 1e6;
/// Floor inside the log-regret normalization.
pub const REGRET_FLOOR: f64 = 1e-12;

const TAG_TASK: u64 = 1;
const TAG_EPS: u64 = 2;
const TAG_X0: u64 = 3;
const TAG_VAL: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub unroll_length: usize,
    /// Inner steps per meta-step (`K`).
    pub truncation: usize,
    /// Antithetic pairs per task; each pair is its own particle.
    pub antithetic_pairs: usize,
    pub sigma: f64,
    /// Tasks per meta-step.
    pub batch_size: usize,
    pub meta_lr: f64,
    pub clip_norm: f64,
    pub total_meta_steps: usize,
    pub seed: u64,
    /// Seed for the initial weights.
    pub init_seed: u64,
    pub kind: LearnedKind,
    pub arch: ArchConfig,
    pub step: StepConfig,
    pub train_functions: Vec<FunctionId>,
    pub train_dims: [usize; 2],
    pub val_tasks: usize,
    pub val_budget: usize,
    /// Validate (and emit a curve row) every this many meta-steps.
    pub val_every: usize,
    /// Write `ckpt_<meta_step>` every this many meta-steps (0: only the
    /// initial and final ones).
    pub checkpoint_every: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            unroll_length: 50,
            truncation: 5,
            antithetic_pairs: 1,
            sigma: 0.01,
            batch_size: 32,
            meta_lr: 5e-4,
            clip_norm: 3.0,
            total_meta_steps: 1000,
            seed: 0,
            init_seed: 0,
            kind: LearnedKind::Optimus,
            arch: ArchConfig::desk(),
            step: StepConfig::default(),
            train_functions: vec![
                FunctionId::Sphere,
                FunctionId::Rosenbrock,
                FunctionId::Rastrigin,
            ],
            train_dims: [2, 10],
            val_tasks: 32,
            val_budget: 50,
            val_every: 10,
            checkpoint_every: 100,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.to_owned()));
        if self.truncation == 0 || self.unroll_length == 0 {
            return bad("truncation and unroll_length must be positive");
        }
        if !self.unroll_length.is_multiple_of(self.truncation) {
            return bad("truncation must divide unroll_length");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if self.batch_size == 0 || self.antithetic_pairs == 0 {
            return bad("batch_size and antithetic_pairs must be positive");
        }
        if self.meta_lr.is_nan()
            || self.meta_lr <= 0.0
            || self.clip_norm.is_nan()
            || self.clip_norm <= 0.0
        {
            return bad("meta_lr and clip_norm must be positive");
        }
        if self.train_functions.is_empty() {
            return bad("train_functions is empty");
        }
        if self.train_dims[0] < 2 || self.train_dims[0] > self.train_dims[1] {
            return bad("train_dims must be [lo, hi] with 2 <= lo <= hi");
        }
        if self.val_every == 0 {
            return bad("val_every must be positive");
        }
        self.arch.validate()
    }

    pub fn num_particles(&self) -> usize {
        self.batch_size * self.antithetic_pairs
    }

    pub fn dims(&self) -> RangeInclusive<usize> {
        self.train_dims[0]..=self.train_dims[1]
    }
}

/// `sum_k log(max(L_k - f*, floor))` with a known minimum, `sum_k L_k`
/// otherwise. `None` if any loss is non-finite.
pub fn meta_loss_window(losses: &[f64], f_star: Option<f64>) -> Option<f64> {
    if losses.iter().any(|l| !l.is_finite()) {
        return None;
    }
    Some(match f_star {
        Some(fs) => losses.iter().map(|l| (l - fs).max(REGRET_FLOOR).ln()).sum(),
        None => losses.iter().sum(),
    })
}

/// Truncated inner rollouts driven by a flat weight vector.
pub trait Unroll: Sync {
    type State: Clone + Send + Sync;

    /// Fresh task and inner state, deterministic in `task_seed`.
    fn reset(&self, task_seed: u64) -> Result<Self::State>;

    /// Advances `state` by `steps` inner steps with weights `theta` and
    /// returns the window meta-loss. An error or non-finite value means the
    /// trajectory diverged.
    fn advance(&self, theta: &[f64], state: &mut Self::State, steps: usize) -> Result<f64>;

    /// Serializes a state for checkpointing.
    fn save_state(
        &self,
        _state: &Self::State,
        _prefix: &str,
        _out: &mut Vec<Tensor>,
    ) -> Result<()> {
        Err(Error::Checkpoint(
            "this unroll cannot be checkpointed".into(),
        ))
    }

    fn load_state(&self, _archive: &Archive, _prefix: &str) -> Result<Self::State> {
        Err(Error::Checkpoint(
            "this unroll cannot be checkpointed".into(),
        ))
    }
}

/// Learned-optimizer rollouts on sampled benchmark tasks.
#[derive(Clone, Debug)]
pub struct OptimizerUnroll {
    pub template: OptimizerParams,
    pub kind: LearnedKind,
    pub functions: Vec<FunctionId>,
    pub dims: RangeInclusive<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerUnrollState {
    pub task: ObjectiveInstance,
    pub inner: InnerState,
    pub point: Point,
}

impl OptimizerUnroll {
    pub fn from_config(cfg: &MetaConfig) -> Result<Self> {
        Ok(Self {
            template: OptimizerParams::zeros(cfg.arch.clone(), cfg.step)?,
            kind: cfg.kind,
            functions: cfg.train_functions.clone(),
            dims: cfg.dims(),
        })
    }

    fn state_at(&self, task: ObjectiveInstance, inner: InnerState) -> Result<OptimizerUnrollState> {
        let point = Point::at(&task, inner.x.clone())?;
        Ok(OptimizerUnrollState { task, inner, point })
    }
}

impl Unroll for OptimizerUnroll {
    type State = OptimizerUnrollState;

    fn reset(&self, task_seed: u64) -> Result<Self::State> {
        let task = sample_task(task_seed, &self.functions, self.dims.clone())?;
        let x0 = task.sample_point(&mut rng::stream(task_seed, &[TAG_X0]));
        let inner = InnerState::new(self.kind, &x0);
        self.state_at(task, inner)
    }

    fn advance(&self, theta: &[f64], state: &mut Self::State, steps: usize) -> Result<f64> {
        let params = self.template.with_values(theta.to_vec());
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            learned_step(&params, &mut state.inner, &state.point.g)?;
            state.point = Point::at(&state.task, state.inner.x.clone())?;
            losses.push(state.point.f);
        }
        meta_loss_window(&losses, Some(state.task.f_star()))
            .ok_or_else(|| Error::Step("non-finite inner loss".into()))
    }

    fn save_state(&self, s: &Self::State, prefix: &str, out: &mut Vec<Tensor>) -> Result<()> {
        let fi = FunctionId::ALL
            .iter()
            .position(|f| *f == s.task.id)
            .expect("known id");
        let f = &s.inner.features;
        out.push(Tensor::vector(
            format!("{prefix}.task"),
            vec![fi as f64, s.task.requested_dim as f64, f.k as f64],
        ));
        out.push(Tensor::vector(
            format!("{prefix}.offset"),
            s.task.offset.clone(),
        ));
        out.push(Tensor::vector(format!("{prefix}.x"), s.inner.x.clone()));
        for j in 0..3 {
            out.push(Tensor::vector(format!("{prefix}.m{j}"), f.m[j].clone()));
            out.push(Tensor::vector(
                format!("{prefix}.row{j}"),
                f.row_acc[j].clone(),
            ));
        }
        out.push(Tensor::vector(format!("{prefix}.v"), f.v.clone()));
        out.push(Tensor::vector(format!("{prefix}.col"), f.col_acc.to_vec()));
        if let Some(p) = &s.inner.precond {
            let n = p.dim();
            out.push(Tensor {
                name: format!("{prefix}.b"),
                shape: vec![n, n],
                data: p.b.as_slice().to_vec(),
            });
        }
        Ok(())
    }

    fn load_state(&self, a: &Archive, prefix: &str) -> Result<Self::State> {
        let get = |n: &str| a.require(&format!("{prefix}.{n}")).map(|t| t.data.clone());
        let meta = get("task")?;
        let id = *FunctionId::ALL
            .get(meta[0] as usize)
            .ok_or_else(|| Error::Checkpoint("bad function index".into()))?;
        let task = ObjectiveInstance::new(id, meta[1] as usize, get("offset")?)?;
        let col = get("col")?;
        let features = FeatureState {
            m: [get("m0")?, get("m1")?, get("m2")?],
            v: get("v")?,
            row_acc: [get("row0")?, get("row1")?, get("row2")?],
            col_acc: [col[0], col[1], col[2]],
            k: meta[2] as u64,
        };
        let precond = match self.kind {
            LearnedKind::Optimus => {
                let b = a.require(&format!("{prefix}.b"))?;
                let n = b.shape[0];
                Some(PrecondState {
                    b: nalgebra::DMatrix::from_column_slice(n, n, &b.data),
                })
            }
            LearnedKind::AdafactorMlp => None,
        };
        let inner = InnerState {
            x: get("x")?,
            features,
            precond,
        };
        self.state_at(task, inner)
    }
}

/// One antithetic pair with its persistent trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct PesParticle<S> {
    pub plus: S,
    pub minus: S,
    pub xi: Vec<f64>,
    pub steps_done: usize,
    /// Number of restarts so far; selects the next task.
    pub resets: u64,
}

fn task_seed(cfg: &MetaConfig, particle: usize, resets: u64) -> u64 {
    // antithetic pairs of one batch entry share a task stream
    let task = (particle / cfg.antithetic_pairs) as u64;
    rng::derive_seed(cfg.seed, &[TAG_TASK, task, resets])
}

impl<S: Clone> PesParticle<S> {
    pub fn new<U: Unroll<State = S>>(
        unroll: &U,
        cfg: &MetaConfig,
        index: usize,
        n: usize,
    ) -> Result<Self> {
        let state = unroll.reset(task_seed(cfg, index, 0))?;
        Ok(Self {
            plus: state.clone(),
            minus: state,
            xi: vec![0.0; n],
            steps_done: 0,
            resets: 0,
        })
    }

    fn restart<U: Unroll<State = S>>(
        &mut self,
        unroll: &U,
        cfg: &MetaConfig,
        index: usize,
    ) -> Result<()> {
        self.resets += 1;
        let state = unroll.reset(task_seed(cfg, index, self.resets))?;
        self.plus = state.clone();
        self.minus = state;
        self.xi.fill(0.0);
        self.steps_done = 0;
        Ok(())
    }
}

pub fn init_particles<U: Unroll>(
    unroll: &U,
    cfg: &MetaConfig,
    n: usize,
) -> Result<Vec<PesParticle<U::State>>> {
    (0..cfg.num_particles())
        .map(|i| PesParticle::new(unroll, cfg, i, n))
        .collect()
}

/// Perturbation `eps ~ N(0, sigma^2 I)` for a particle at a meta-step.
pub fn draw_perturbation(cfg: &MetaConfig, meta_step: u64, particle: usize, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, cfg.sigma).expect("validated sigma");
    let mut r = rng::stream(cfg.seed, &[TAG_EPS, meta_step, particle as u64]);
    (0..n).map(|_| normal.sample(&mut r)).collect()
}

fn shifted(theta: &[f64], eps: &[f64], sign: f64) -> Vec<f64> {
    theta.iter().zip(eps).map(|(t, e)| t + sign * e).collect()
}

fn window_or_penalty<U: Unroll>(
    unroll: &U,
    theta: &[f64],
    state: &mut U::State,
    k: usize,
) -> (f64, bool) {
    match unroll.advance(theta, state, k) {
        Ok(l) if l.is_finite() => (l, false),
        _ => (PENALTY, true),
    }
}

/// Meta-gradient estimate and the mean window loss of the unperturbed pair
/// average.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    /// Mean over particles of `(L+ + L-) / 2`.
    pub mean_loss: f64,
    pub penalties: usize,
}

/// Contributions are summed in particle order, then divided by the count.
fn reduce(contribs: Vec<(Vec<f64>, f64, bool)>, n: usize) -> GradientEstimate {
    let count = contribs.len() as f64;
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    let mut penalties = 0;
    for (c, l, p) in contribs {
        grad.iter_mut().zip(&c).for_each(|(g, v)| *g += v);
        loss += l;
        penalties += p as usize;
    }
    grad.iter_mut().for_each(|g| *g /= count);
    GradientEstimate {
        grad,
        mean_loss: loss / count,
        penalties,
    }
}

/// PES estimate. Advances every particle by one truncation window and
/// restarts those that finished their unroll or diverged.
pub fn pes_meta_gradient<U: Unroll>(
    unroll: &U,
    theta: &[f64],
    particles: &mut [PesParticle<U::State>],
    cfg: &MetaConfig,
    meta_step: u64,
) -> Result<GradientEstimate> {
    let n = theta.len();
    let k = cfg.truncation;
    let two_var = 2.0 * cfg.sigma * cfg.sigma;
    let contribs = particles
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| -> Result<(Vec<f64>, f64, bool)> {
            let eps = draw_perturbation(cfg, meta_step, i, n);
            let (lp, bad_p) = window_or_penalty(unroll, &shifted(theta, &eps, 1.0), &mut p.plus, k);
            let (lm, bad_m) =
                window_or_penalty(unroll, &shifted(theta, &eps, -1.0), &mut p.minus, k);
            p.xi.iter_mut().zip(&eps).for_each(|(x, e)| *x += e);
            let scale = (lp - lm) / two_var;
            let c: Vec<f64> = p.xi.iter().map(|x| x * scale).collect();
            p.steps_done += k;
            let diverged = bad_p || bad_m;
            if diverged || p.steps_done >= cfg.unroll_length {
                p.restart(unroll, cfg, i)?;
            }
            Ok((c, 0.5 * (lp + lm), diverged))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(contribs, n))
}

/// Plain antithetic ES over full unrolls from fresh tasks. With
/// `truncation == unroll_length` this equals the PES estimate bit for bit.
pub fn es_meta_gradient<U: Unroll>(
    unroll: &U,
    theta: &[f64],
    cfg: &MetaConfig,
    meta_step: u64,
) -> Result<GradientEstimate> {
    let n = theta.len();
    let two_var = 2.0 * cfg.sigma * cfg.sigma;
    let contribs = (0..cfg.num_particles())
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, f64, bool)> {
            let start = unroll.reset(task_seed(cfg, i, meta_step))?;
            let eps = draw_perturbation(cfg, meta_step, i, n);
            let mut plus = start.clone();
            let mut minus = start;
            let (lp, bad_p) = window_or_penalty(
                unroll,
                &shifted(theta, &eps, 1.0),
                &mut plus,
                cfg.unroll_length,
            );
            let (lm, bad_m) = window_or_penalty(
                unroll,
                &shifted(theta, &eps, -1.0),
                &mut minus,
                cfg.unroll_length,
            );
            let scale = (lp - lm) / two_var;
            Ok((
                eps.iter().map(|e| e * scale).collect(),
                0.5 * (lp + lm),
                bad_p || bad_m,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(contribs, n))
}

/// Rescales `g` to norm `max_norm` if it is longer; returns the original norm.
pub fn clip_by_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// Adam over the flat weight vector, with gradient clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaAdam {
    pub lr: f64,
    pub clip_norm: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl MetaAdam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            clip_norm,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Clips `grad` in place and applies one Adam step to `theta`.
    pub fn update(&mut self, theta: &mut [f64], grad: &mut [f64]) -> Result<()> {
        if grad.len() != theta.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        clip_by_norm(grad, self.clip_norm);
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
        Ok(())
    }
}

/// Fixed validation battery: seeded tasks and starting points.
pub fn validation_set(cfg: &MetaConfig) -> Result<Vec<(ObjectiveInstance, Vec<f64>)>> {
    (0..cfg.val_tasks as u64)
        .map(|i| {
            let seed = rng::derive_seed(cfg.seed, &[TAG_VAL, i]);
            let task = sample_task(seed, &cfg.train_functions, cfg.dims())?;
            let x0 = task.sample_point(&mut rng::stream(seed, &[TAG_X0]));
            Ok((task, x0))
        })
        .collect()
}

/// Mean log-regret of the final iterate after `budget` unperturbed steps.
pub fn validate(
    theta: &OptimizerParams,
    kind: LearnedKind,
    tasks: &[(ObjectiveInstance, Vec<f64>)],
    budget: usize,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Argument("empty validation set".into()));
    }
    let stop = StopConfig::fixed(budget);
    let finals = tasks
        .par_iter()
        .map(|(task, x0)| {
            let t = optimus::run(theta, kind, task, x0, &stop, Default::default())?;
            Ok((t.final_loss() - task.f_star()).max(REGRET_FLOOR).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(finals.iter().sum::<f64>() / finals.len() as f64)
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub meta_step: usize,
    pub wall_seconds: f64,
    /// Mean per-step window loss over the meta-steps since the previous
    /// row; empty for the row at step 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

pub const CURVE_FILE: &str = "curve.csv";
pub const BEST_CHECKPOINT: &str = "ckpt_best";

pub fn checkpoint_name(meta_step: usize) -> String {
    format!("ckpt_{meta_step}")
}

/// Full meta-training state.
#[derive(Clone, Debug)]
pub struct MetaState<S> {
    pub theta: OptimizerParams,
    pub adam: MetaAdam,
    pub particles: Vec<PesParticle<S>>,
    pub meta_step: usize,
    pub wall_seconds: f64,
    pub best_val: f64,
    pub best_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    meta_step: usize,
    wall_seconds: f64,
    best_val: f64,
    best_step: usize,
    adam_t: u64,
    particles: Vec<(usize, u64)>,
    config: MetaConfig,
}

impl<S: Clone> MetaState<S> {
    pub fn fresh<U: Unroll<State = S>>(unroll: &U, cfg: &MetaConfig) -> Result<Self> {
        let theta = init_params(cfg.init_seed, &cfg.arch, cfg.step)?;
        let n = theta.num_params();
        Ok(Self {
            adam: MetaAdam::new(n, cfg.meta_lr, cfg.clip_norm),
            particles: init_particles(unroll, cfg, n)?,
            theta,
            meta_step: 0,
            wall_seconds: 0.0,
            best_val: f64::INFINITY,
            best_step: 0,
        })
    }

    pub fn to_archive<U: Unroll<State = S>>(
        &self,
        unroll: &U,
        cfg: &MetaConfig,
    ) -> Result<Archive> {
        let header = StateHeader {
            meta_step: self.meta_step,
            wall_seconds: self.wall_seconds,
            best_val: self.best_val,
            best_step: self.best_step,
            adam_t: self.adam.t,
            particles: self
                .particles
                .iter()
                .map(|p| (p.steps_done, p.resets))
                .collect(),
            config: cfg.clone(),
        };
        let mut a = params_archive(
            &self.theta,
            cfg.init_seed,
            serde_json::json!({ "meta": serde_json::to_value(header)? }),
        )?;
        a.tensors
            .push(Tensor::vector("meta.adam.m", self.adam.m.clone()));
        a.tensors
            .push(Tensor::vector("meta.adam.v", self.adam.v.clone()));
        for (i, p) in self.particles.iter().enumerate() {
            a.tensors
                .push(Tensor::vector(format!("meta.p{i}.xi"), p.xi.clone()));
            unroll.save_state(&p.plus, &format!("meta.p{i}.plus"), &mut a.tensors)?;
            unroll.save_state(&p.minus, &format!("meta.p{i}.minus"), &mut a.tensors)?;
        }
        Ok(a)
    }

    /// Restores a state written by [`MetaState::to_archive`]. The stored
    /// configuration must equal `cfg` apart from `total_meta_steps`.
    pub fn from_archive<U: Unroll<State = S>>(
        unroll: &U,
        cfg: &MetaConfig,
        a: &Archive,
    ) -> Result<Self> {
        let header: StateHeader = serde_json::from_value(a.header["meta"].clone())
            .map_err(|e| Error::Checkpoint(format!("not a meta-training checkpoint: {e}")))?;
        let mut stored = header.config.clone();
        stored.total_meta_steps = cfg.total_meta_steps;
        if &stored != cfg {
            return Err(Error::Checkpoint(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let (theta, _) = params_from_archive(a)?;
        let adam = MetaAdam {
            lr: cfg.meta_lr,
            clip_norm: cfg.clip_norm,
            m: a.require("meta.adam.m")?.data.clone(),
            v: a.require("meta.adam.v")?.data.clone(),
            t: header.adam_t,
        };
        let particles = header
            .particles
            .iter()
            .enumerate()
            .map(|(i, &(steps_done, resets))| {
                Ok(PesParticle {
                    plus: unroll.load_state(a, &format!("meta.p{i}.plus"))?,
                    minus: unroll.load_state(a, &format!("meta.p{i}.minus"))?,
                    xi: a.require(&format!("meta.p{i}.xi"))?.data.clone(),
                    steps_done,
                    resets,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            theta,
            adam,
            particles,
            meta_step: header.meta_step,
            wall_seconds: header.wall_seconds,
            best_val: header.best_val,
            best_step: header.best_step,
        })
    }

    /// One PES meta-step: estimate, clip, Adam update. Returns the mean
    /// per-inner-step window loss.
    pub fn step<U: Unroll<State = S>>(&mut self, unroll: &U, cfg: &MetaConfig) -> Result<f64> {
        let mut est = pes_meta_gradient(
            unroll,
            self.theta.values(),
            &mut self.particles,
            cfg,
            self.meta_step as u64,
        )?;
        self.adam.update(self.theta.values_mut(), &mut est.grad)?;
        self.meta_step += 1;
        Ok(est.mean_loss / cfg.truncation as f64)
    }
}

/// Where meta-training writes, and whether it resumes.
#[derive(Clone, Debug, Default)]
pub struct MetaTrainIo {
    pub out_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutput {
    pub theta: OptimizerParams,
    /// Weights with the lowest validation loss seen.
    pub best_theta: OptimizerParams,
    pub curve: Vec<CurveRow>,
    pub checkpoints: Vec<PathBuf>,
}

fn write_curve_row(path: &Path, row: &CurveRow) -> Result<()> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    w.serialize(row)
        .map_err(|e| Error::Data(format!("curve: {e}")))?;
    w.flush()?;
    Ok(())
}

fn write_curve_header(path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "meta_step,wall_seconds,train_loss,val_loss")?;
    Ok(())
}

/// Runs PES meta-training of the learned optimizer described by `cfg`.
///
/// With an output directory, writes `ckpt_0`, periodic and final
/// checkpoints, `ckpt_best`, and `curve.csv`. With zero meta-steps only the
/// initial checkpoint and an empty curve are produced.
pub fn meta_train(cfg: &MetaConfig, io: &MetaTrainIo) -> Result<MetaTrainOutput> {
    cfg.validate()?;
    let unroll = OptimizerUnroll::from_config(cfg)?;
    let val_set = validation_set(cfg)?;
    let mut state = match &io.resume_from {
        Some(path) => MetaState::from_archive(&unroll, cfg, &Archive::load(path)?)?,
        None => MetaState::fresh(&unroll, cfg)?,
    };
    let resumed = io.resume_from.is_some();
    let curve_path = io.out_dir.as_ref().map(|d| d.join(CURVE_FILE));
    let mut checkpoints = Vec::new();
    let save = |state: &MetaState<_>, name: &str, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = &io.out_dir {
            let path = dir.join(name);
            state
                .to_archive(&unroll, cfg)?
                .save(&path)
                .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
            if !checkpoints.contains(&path) {
                checkpoints.push(path);
            }
        }
        Ok(())
    };
    if let Some(dir) = &io.out_dir {
        fs::create_dir_all(dir)?;
        if !resumed {
            write_curve_header(curve_path.as_ref().expect("out dir"))?;
        }
    }

    let mut curve = Vec::new();
    let mut best_theta = state.theta.clone();
    if let (true, Some(dir)) = (resumed, &io.out_dir) {
        let best = dir.join(BEST_CHECKPOINT);
        if best.exists() {
            best_theta = params_from_archive(&Archive::load(&best)?)?.0;
        }
    }
    let record =
        |state: &mut MetaState<_>, train: Option<f64>, curve: &mut Vec<CurveRow>| -> Result<bool> {
            let val = validate(&state.theta, cfg.kind, &val_set, cfg.val_budget)?;
            let row = CurveRow {
                meta_step: state.meta_step,
                wall_seconds: state.wall_seconds,
                train_loss: train,
                val_loss: val,
            };
            if let Some(p) = &curve_path {
                write_curve_row(p, &row)?;
            }
            curve.push(row);
            let improved = val < state.best_val;
            if improved {
                state.best_val = val;
                state.best_step = state.meta_step;
            }
            Ok(improved)
        };

    if !resumed {
        save(&state, &checkpoint_name(0), &mut checkpoints)?;
        if cfg.total_meta_steps > 0 && record(&mut state, None, &mut curve)? {
            save(&state, BEST_CHECKPOINT, &mut checkpoints)?;
        }
    }
    let mut train_sum = 0.0;
    let mut train_count = 0usize;
    while state.meta_step < cfg.total_meta_steps {
        let start = Instant::now();
        train_sum += state.step(&unroll, cfg)?;
        train_count += 1;
        state.wall_seconds += start.elapsed().as_secs_f64();
        let done = state.meta_step == cfg.total_meta_steps;
        if state.meta_step % cfg.val_every == 0 || done {
            let train = (train_count > 0).then(|| train_sum / train_count as f64);
            (train_sum, train_count) = (0.0, 0);
            if record(&mut state, train, &mut curve)? {
                best_theta = state.theta.clone();
                save(&state, BEST_CHECKPOINT, &mut checkpoints)?;
            }
        }
        let periodic = cfg.checkpoint_every > 0 && state.meta_step % cfg.checkpoint_every == 0;
        if periodic || done {
            save(&state, &checkpoint_name(state.meta_step), &mut checkpoints)?;
        }
    }
    Ok(MetaTrainOutput {
        theta: state.theta,
        best_theta,
        curve,
        checkpoints,
    })
}
