//! `evaluate`: runs every solver on a seeded battery of problems and writes
//! one trajectory file per (solver, function, dimension, seed).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use optlab::archive::load_params;
use optlab::baselines::{
    basin_hopping, default_perturb_scale, Adam, Bfgs, BfgsConfig, MomentumGd, TunedKind,
};
use optlab::nnet::OptimizerParams;
use optlab::optimus::{self, LearnedKind};
use optlab::rng;
use optlab::trajectory::{self, FirstOrder, RecordOptions, StopConfig, Trajectory};
use optlab::{FunctionId, ObjectiveInstance};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config;
use crate::manifest::Manifest;
use crate::tune::tune_one;
use crate::{CliError, CliResult, ConfigArgs};

pub const TRAJECTORY_DIR: &str = "trajectories";

const TAG_OFFSET: u64 = 11;
const TAG_X0: u64 = 12;
const TAG_HOPS: u64 = 13;

/// A solver entry in an evaluation config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverSpec {
    Optimus {
        checkpoint: PathBuf,
        #[serde(default)]
        name: Option<String>,
    },
    AdafactorMlp {
        checkpoint: PathBuf,
        #[serde(default)]
        name: Option<String>,
    },
    /// Without `lr` the rate is tuned per (function, dimension).
    Adam {
        #[serde(default)]
        lr: Option<f64>,
        #[serde(default)]
        name: Option<String>,
    },
    Gdm {
        #[serde(default)]
        lr: Option<f64>,
        #[serde(default)]
        name: Option<String>,
    },
    Bfgs {
        #[serde(default)]
        name: Option<String>,
    },
    BasinHopping {
        inner: Box<SolverSpec>,
        hops: usize,
        /// Defaults to 5% of the domain-box width.
        #[serde(default)]
        perturb_scale: Option<f64>,
        #[serde(default)]
        name: Option<String>,
    },
}

impl SolverSpec {
    pub fn name(&self) -> String {
        let (explicit, default) = match self {
            SolverSpec::Optimus { name, .. } => (name, "optimus".to_owned()),
            SolverSpec::AdafactorMlp { name, .. } => (name, "adafactor_mlp".to_owned()),
            SolverSpec::Adam { name, .. } => (name, "adam".to_owned()),
            SolverSpec::Gdm { name, .. } => (name, "gdm".to_owned()),
            SolverSpec::Bfgs { name } => (name, "bfgs".to_owned()),
            SolverSpec::BasinHopping { name, inner, .. } => (name, format!("bh_{}", inner.name())),
        };
        explicit.clone().unwrap_or(default)
    }
}

fn default_seeds() -> usize {
    64
}

fn default_true() -> bool {
    true
}

fn default_functions() -> Vec<FunctionId> {
    FunctionId::ALL.to_vec()
}

fn default_tune_inits() -> usize {
    64
}

fn default_tune_budget() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub out_dir: PathBuf,
    #[serde(default = "default_functions")]
    pub functions: Vec<FunctionId>,
    pub dims: Vec<usize>,
    /// Initial points (and offsets) per (function, dimension).
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Translate every instance by a seeded random offset.
    #[serde(default = "default_true")]
    pub offsets: bool,
    pub solvers: Vec<SolverSpec>,
    #[serde(default)]
    pub stop: StopConfig,
    /// Keep every iterate and step (needed for direction analysis).
    #[serde(default)]
    pub record_steps: bool,
    #[serde(default = "default_tune_inits")]
    pub tune_inits: usize,
    #[serde(default = "default_tune_budget")]
    pub tune_budget: usize,
}

impl EvalConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.functions.is_empty() || self.dims.is_empty() || self.solvers.is_empty() {
            return Err(CliError::usage(
                "functions, dims and solvers must be non-empty",
            ));
        }
        if self.dims.iter().any(|d| *d < 2) {
            return Err(CliError::usage("dimensions must be >= 2"));
        }
        if self.seeds == 0 {
            return Err(CliError::usage("seeds must be >= 1"));
        }
        self.stop.validate()?;
        let mut names: Vec<String> = self.solvers.iter().map(SolverSpec::name).collect();
        for n in &names {
            if n.is_empty()
                || !n
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(CliError::usage(format!(
                    "solver name `{n}` must be [A-Za-z0-9_-]+"
                )));
            }
        }
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::usage(format!(
                "solver name `{}` is used twice",
                w[0]
            )));
        }
        Ok(())
    }
}

/// One trajectory with the identity of its run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub solver: String,
    pub function: FunctionId,
    pub dim: usize,
    pub requested_dim: usize,
    pub seed: u64,
    pub seed_index: usize,
    pub config_hash: String,
    pub f_star: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub offset: Vec<f64>,
    pub x0: Vec<f64>,
    pub best_loss: f64,
    pub final_loss: f64,
    #[serde(flatten)]
    pub trajectory: Trajectory,
}

impl TrajectoryFile {
    pub fn problem_label(&self) -> String {
        format!("{}_{}", self.function, self.requested_dim)
    }

    pub fn instance(&self) -> CliResult<ObjectiveInstance> {
        Ok(ObjectiveInstance::new(
            self.function,
            self.requested_dim,
            self.offset.clone(),
        )?)
    }
}

pub fn trajectory_file_name(solver: &str, id: FunctionId, dim: usize, seed_index: usize) -> String {
    format!("{solver}__{id}_{dim}__s{seed_index:03}.json")
}

fn function_index(id: FunctionId) -> u64 {
    FunctionId::ALL
        .iter()
        .position(|f| *f == id)
        .expect("known id") as u64
}

/// The seeded instance and starting point shared by all solvers.
pub fn battery_problem(
    seed: u64,
    offsets: bool,
    id: FunctionId,
    dim: usize,
    i: usize,
) -> CliResult<(ObjectiveInstance, Vec<f64>)> {
    let path = [function_index(id), dim as u64, i as u64];
    let inst = if offsets {
        ObjectiveInstance::with_random_offset(
            id,
            dim,
            &mut rng::stream(seed, &[TAG_OFFSET, path[0], path[1], path[2]]),
        )?
    } else {
        ObjectiveInstance::centered(id, dim)?
    };
    let x0 = inst.sample_point(&mut rng::stream(seed, &[TAG_X0, path[0], path[1], path[2]]));
    Ok((inst, x0))
}

/// Solver with weights loaded and learning rates resolved.
#[derive(Clone, Debug)]
pub enum Resolved {
    Learned {
        kind: LearnedKind,
        params: Arc<OptimizerParams>,
    },
    Tuned {
        kind: TunedKind,
        lr: Option<f64>,
        key: usize,
    },
    Bfgs,
    Basin {
        inner: Box<Resolved>,
        hops: usize,
        scale: Option<f64>,
    },
}

/// Tuned learning rates keyed by (solver key, function, dimension).
pub type LrTable = HashMap<(usize, FunctionId, usize), f64>;

struct Resolver {
    digests: Vec<String>,
    next_key: usize,
    loaded: HashMap<PathBuf, Arc<OptimizerParams>>,
}

impl Resolver {
    fn load(&mut self, path: &Path) -> CliResult<Arc<OptimizerParams>> {
        if let Some(p) = self.loaded.get(path) {
            return Ok(Arc::clone(p));
        }
        let bytes = fs::read(path).map_err(|e| {
            CliError::checkpoint(format!("reading checkpoint {}: {e}", path.display()))
        })?;
        self.digests.push(hex::encode(Sha256::digest(&bytes)));
        let (params, _) = load_params(path)?;
        let params = Arc::new(params);
        self.loaded.insert(path.to_owned(), Arc::clone(&params));
        Ok(params)
    }

    fn resolve(&mut self, spec: &SolverSpec) -> CliResult<Resolved> {
        Ok(match spec {
            SolverSpec::Optimus { checkpoint, .. } => Resolved::Learned {
                kind: LearnedKind::Optimus,
                params: self.load(checkpoint)?,
            },
            SolverSpec::AdafactorMlp { checkpoint, .. } => Resolved::Learned {
                kind: LearnedKind::AdafactorMlp,
                params: self.load(checkpoint)?,
            },
            SolverSpec::Adam { lr, .. } | SolverSpec::Gdm { lr, .. } => {
                if lr.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                    return Err(CliError::usage("learning rates must be positive"));
                }
                let kind = if matches!(spec, SolverSpec::Adam { .. }) {
                    TunedKind::Adam
                } else {
                    TunedKind::Gdm
                };
                self.next_key += 1;
                Resolved::Tuned {
                    kind,
                    lr: *lr,
                    key: self.next_key,
                }
            }
            SolverSpec::Bfgs { .. } => Resolved::Bfgs,
            SolverSpec::BasinHopping {
                inner,
                hops,
                perturb_scale,
                ..
            } => {
                if matches!(**inner, SolverSpec::BasinHopping { .. }) {
                    return Err(CliError::usage("basin hopping cannot wrap basin hopping"));
                }
                if *hops == 0 {
                    return Err(CliError::usage("basin hopping needs hops >= 1"));
                }
                Resolved::Basin {
                    inner: Box::new(self.resolve(inner)?),
                    hops: *hops,
                    scale: *perturb_scale,
                }
            }
        })
    }
}

fn untuned(r: &Resolved, out: &mut Vec<(usize, TunedKind)>) {
    match r {
        Resolved::Tuned {
            kind,
            lr: None,
            key,
        } => out.push((*key, *kind)),
        Resolved::Basin { inner, .. } => untuned(inner, out),
        _ => {}
    }
}

/// Runs one resolved solver; returns the trajectory and the learning rate
/// used, if any.
pub fn run_resolved(
    solver: &Resolved,
    inst: &ObjectiveInstance,
    x0: &[f64],
    stop: &StopConfig,
    record: RecordOptions,
    lrs: &LrTable,
    hop_seed: u64,
) -> optlab::Result<(Trajectory, Option<f64>)> {
    match solver {
        Resolved::Learned { kind, params } => {
            Ok((optimus::run(params, *kind, inst, x0, stop, record)?, None))
        }
        Resolved::Tuned { kind, lr, key } => {
            let lr = lr
                .or_else(|| lrs.get(&(*key, inst.id, inst.requested_dim)).copied())
                .ok_or_else(|| optlab::Error::Argument("learning rate was not tuned".into()))?;
            let t = match kind {
                TunedKind::Adam => trajectory::run(
                    &mut FirstOrder(Adam::new(lr, inst.dim)),
                    inst,
                    x0,
                    stop,
                    record,
                )?,
                TunedKind::Gdm => trajectory::run(
                    &mut FirstOrder(MomentumGd::new(lr, inst.dim)),
                    inst,
                    x0,
                    stop,
                    record,
                )?,
            };
            Ok((t, Some(lr)))
        }
        Resolved::Bfgs => {
            let mut bfgs = Bfgs::new(inst.dim, BfgsConfig::default());
            Ok((trajectory::run(&mut bfgs, inst, x0, stop, record)?, None))
        }
        Resolved::Basin { inner, hops, scale } => {
            let mut used_lr = None;
            let scale = scale.unwrap_or_else(|| default_perturb_scale(inst));
            let mut r = rng::stream(hop_seed, &[TAG_HOPS]);
            let t = basin_hopping(
                |x| {
                    let (t, lr) = run_resolved(inner, inst, x, stop, record, lrs, hop_seed)?;
                    used_lr = lr;
                    Ok(t)
                },
                x0,
                scale,
                *hops,
                &mut r,
            )?;
            Ok((t, used_lr))
        }
    }
}

/// Hash of the config (output directory excluded) and checkpoint contents.
fn run_hash(cfg: &EvalConfig, digests: &[String]) -> String {
    let mut c = cfg.clone();
    c.out_dir = PathBuf::new();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&c).expect("config serializes"));
    for d in digests {
        h.update(d.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn evaluate(cfg: &EvalConfig) -> CliResult<Manifest> {
    cfg.validate()?;
    let started = Instant::now();
    let mut resolver = Resolver {
        digests: Vec::new(),
        next_key: 0,
        loaded: HashMap::new(),
    };
    let solvers: Vec<(String, Resolved)> = cfg
        .solvers
        .iter()
        .map(|s| Ok((s.name(), resolver.resolve(s)?)))
        .collect::<CliResult<_>>()?;
    let hash = run_hash(cfg, &resolver.digests);

    let mut to_tune = Vec::new();
    for (_, r) in &solvers {
        untuned(r, &mut to_tune);
    }
    let mut lrs = LrTable::new();
    for &(key, kind) in &to_tune {
        for &id in &cfg.functions {
            for &dim in &cfg.dims {
                let t = tune_one(kind, id, dim, cfg.tune_inits, cfg.tune_budget, cfg.seed)?;
                lrs.insert((key, id, dim), t.best_lr);
            }
        }
    }

    let record = if cfg.record_steps {
        RecordOptions {
            iterate_stride: 1,
            steps: true,
        }
    } else {
        RecordOptions::default()
    };
    let mut items = Vec::new();
    for &id in &cfg.functions {
        for &dim in &cfg.dims {
            for i in 0..cfg.seeds {
                for s in 0..solvers.len() {
                    items.push((id, dim, i, s));
                }
            }
        }
    }
    let traj_dir = cfg.out_dir.join(TRAJECTORY_DIR);
    fs::create_dir_all(&traj_dir)?;
    let outputs = items
        .par_iter()
        .map(|&(id, dim, i, s)| -> CliResult<(String, Vec<u8>)> {
            let (name, solver) = &solvers[s];
            let (inst, x0) = battery_problem(cfg.seed, cfg.offsets, id, dim, i)?;
            let hop_seed = rng::derive_seed(cfg.seed, &[function_index(id), dim as u64, i as u64]);
            let (t, lr) = run_resolved(solver, &inst, &x0, &cfg.stop, record, &lrs, hop_seed)?;
            let file = TrajectoryFile {
                solver: name.clone(),
                function: id,
                dim: inst.dim,
                requested_dim: dim,
                seed: cfg.seed,
                seed_index: i,
                config_hash: hash.clone(),
                f_star: inst.f_star(),
                lr,
                offset: inst.offset.clone(),
                x0,
                best_loss: t.best_loss(),
                final_loss: t.final_loss(),
                trajectory: t,
            };
            let mut bytes = serde_json::to_vec_pretty(&file)?;
            bytes.push(b'\n');
            Ok((trajectory_file_name(name, id, dim, i), bytes))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut manifest = Manifest::new("evaluate", cfg, hash, cfg.seed)?;
    for (name, bytes) in outputs {
        let path = traj_dir.join(name);
        fs::write(&path, bytes)?;
        manifest.add(&cfg.out_dir, &path);
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    Ok(manifest)
}

pub fn cmd_evaluate(args: &ConfigArgs) -> CliResult<()> {
    let cfg: EvalConfig = config::load(args.config.as_deref(), &args.overrides)?;
    let manifest = evaluate(&cfg)?;
    let count = manifest.files.len();
    manifest.write(&cfg.out_dir)?;
    eprintln!(
        "evaluate: wrote {count} trajectories to {}",
        cfg.out_dir.display()
    );
    Ok(())
}
