//! The Optimus update: a per-parameter step from the MLP branch, multiplied
//! by a learned preconditioner that the encoder stack refreshes with `L`
//! rank-one terms per iteration, followed by Frobenius normalization.
//!
//! The Adafactor-MLP optimizer is the same pipeline without the
//! preconditioner, so both share [`LearnedOptimizer`].

use nalgebra::{DMatrix, DVectorView, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{compute_features, FeatureState};
use crate::nnet::{encoder_stack_forward_tokens, mlp_forward_tokens, OptimizerParams};
use crate::testfuncs::ObjectiveInstance;
use crate::trajectory::{self, IterInfo, Point, RecordOptions, Solver, StopConfig, Trajectory};

/// Constants of the per-parameter step `lambda_a * exp(lambda_b * alpha) * d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            lambda_a: 0.1,
            lambda_b: 0.1,
        }
    }
}

/// Symmetric PSD preconditioner with unit Frobenius norm after every update.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecondState {
    pub b: DMatrix<f64>,
}

/// Invariant measurements of a preconditioner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecondAudit {
    pub max_asymmetry: f64,
    pub min_eigenvalue: f64,
    pub frobenius: f64,
}

impl PrecondState {
    pub fn identity(n: usize) -> Self {
        Self {
            b: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    /// `B <- (B + sum_l u_l u_l^T) / ||B + sum_l u_l u_l^T||_F`. Inputs are
    /// checked before `B` is touched, so on error it is left unchanged.
    pub fn update(&mut self, u_list: &[Vec<f64>]) -> Result<()> {
        let n = self.dim();
        let mut mass = 0.0;
        for u in u_list {
            if u.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: u.len(),
                });
            }
            mass += u.iter().map(|v| v * v).sum::<f64>();
        }
        if !mass.is_finite() {
            return Err(Error::Numeric(format!(
                "rank-one terms of squared norm {mass} cannot be normalized"
            )));
        }
        // the result is normalized, so very large terms are scaled down
        // first to keep the Frobenius norm representable
        let scale = if mass > 1e100 { 1.0 / mass } else { 1.0 };
        if scale != 1.0 {
            self.b *= scale;
        }
        for u in u_list {
            let u = DVectorView::from_slice(u, n);
            self.b.ger(scale, &u, &u, 1.0);
        }
        let norm = self.b.norm();
        debug_assert!(norm.is_finite() && norm > 0.0);
        self.b /= norm;
        Ok(())
    }

    /// Full audit including an eigendecomposition; O(N^3).
    pub fn audit(&self) -> PrecondAudit {
        let n = self.dim();
        let mut asym = 0.0f64;
        for j in 0..n {
            for i in 0..j {
                asym = asym.max((self.b[(i, j)] - self.b[(j, i)]).abs());
            }
        }
        let min_eig = SymmetricEigen::new(self.b.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        PrecondAudit {
            max_asymmetry: asym,
            min_eigenvalue: min_eig,
            frobenius: self.b.norm(),
        }
    }
}

/// Free-function form of [`PrecondState::update`].
pub fn precondition_update(b: &PrecondState, u_list: &[Vec<f64>]) -> Result<PrecondState> {
    let mut next = b.clone();
    next.update(u_list)?;
    Ok(next)
}

/// Per-parameter step from the MLP outputs: `s_n = lambda_a exp(lambda_b alpha_n) d_n`.
pub fn combine_step(cfg: &StepConfig, alpha: &[f64], direction: &[f64]) -> Result<Vec<f64>> {
    let s: Vec<f64> = alpha
        .iter()
        .zip(direction)
        .map(|(a, d)| cfg.lambda_a * (cfg.lambda_b * a).exp() * d)
        .collect();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Step("non-finite MLP step".into()));
    }
    Ok(s)
}

/// MLP branch on a normalized `N x 38` feature matrix.
pub fn direction_branch(theta: &OptimizerParams, z: &DMatrix<f64>) -> Result<Vec<f64>> {
    let out = crate::nnet::mlp_forward(&theta.mlp(), z)?;
    combine_step(
        &theta.step,
        out.column(0).as_slice(),
        out.column(1).as_slice(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnedKind {
    Optimus,
    AdafactorMlp,
}

/// Per-trajectory state of a learned optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerState {
    pub x: Vec<f64>,
    pub features: FeatureState,
    /// Present only for Optimus.
    pub precond: Option<PrecondState>,
}

impl InnerState {
    pub fn new(kind: LearnedKind, x0: &[f64]) -> Self {
        Self {
            x: x0.to_vec(),
            features: FeatureState::new(x0),
            precond: match kind {
                LearnedKind::Optimus => Some(PrecondState::identity(x0.len())),
                LearnedKind::AdafactorMlp => None,
            },
        }
    }

    pub fn kind(&self) -> LearnedKind {
        if self.precond.is_some() {
            LearnedKind::Optimus
        } else {
            LearnedKind::AdafactorMlp
        }
    }
}

/// One learned-optimizer iteration: updates the feature accumulators with
/// `grad`, builds the normalized features, refreshes the preconditioner (for
/// Optimus), and applies `x <- x + B s` (or `x + s`). Returns the step.
pub fn learned_step(
    theta: &OptimizerParams,
    state: &mut InnerState,
    grad: &[f64],
) -> Result<Vec<f64>> {
    let k = state.features.k;
    state.features.update(grad)?;
    let zt = compute_features(&state.features, &state.x, grad, k)?.transpose();
    let out = mlp_forward_tokens(&theta.mlp(), &zt);
    let alpha: Vec<f64> = out.row(0).iter().copied().collect();
    let dir: Vec<f64> = out.row(1).iter().copied().collect();
    let s = combine_step(&theta.step, &alpha, &dir)?;
    let dx = match state.precond.as_mut() {
        Some(precond) => {
            let u_list = encoder_stack_forward_tokens(&theta.encoders(), &zt);
            precond.update(&u_list)?;
            let n = s.len();
            let prod = &precond.b * DVectorView::from_slice(&s, n);
            prod.as_slice().to_vec()
        }
        None => s,
    };
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::Step("non-finite parameter update".into()));
    }
    for (xi, d) in state.x.iter_mut().zip(&dx) {
        *xi += d;
    }
    Ok(dx)
}

/// Optimus iteration; errors if `state` carries no preconditioner.
pub fn optimus_step(
    theta: &OptimizerParams,
    state: &mut InnerState,
    grad: &[f64],
) -> Result<Vec<f64>> {
    if state.precond.is_none() {
        return Err(Error::State("Optimus step needs a preconditioner".into()));
    }
    learned_step(theta, state, grad)
}

/// Adafactor-MLP iteration: the Optimus pipeline with `dx = s`.
pub fn adafactor_mlp_step(
    theta: &OptimizerParams,
    state: &mut InnerState,
    grad: &[f64],
) -> Result<Vec<f64>> {
    if state.precond.is_some() {
        return Err(Error::State(
            "Adafactor-MLP state must not carry a preconditioner".into(),
        ));
    }
    learned_step(theta, state, grad)
}

/// Learned optimizer bound to its weights, usable with [`trajectory::run`].
#[derive(Clone, Debug)]
pub struct LearnedOptimizer<'a> {
    pub theta: &'a OptimizerParams,
    pub state: InnerState,
}

impl<'a> LearnedOptimizer<'a> {
    pub fn new(theta: &'a OptimizerParams, kind: LearnedKind, x0: &[f64]) -> Self {
        Self {
            theta,
            state: InnerState::new(kind, x0),
        }
    }
}

impl Solver for LearnedOptimizer<'_> {
    fn iterate(&mut self, inst: &ObjectiveInstance, point: &mut Point) -> Result<IterInfo> {
        debug_assert_eq!(self.state.x, point.x);
        let step = learned_step(self.theta, &mut self.state, &point.g)?;
        *point = Point::at(inst, self.state.x.clone())?;
        Ok(IterInfo {
            evals: 1,
            step,
            converged: false,
        })
    }
}

/// Runs a learned optimizer from `x0`, with the stopping rule in `stop`.
pub fn run(
    theta: &OptimizerParams,
    kind: LearnedKind,
    inst: &ObjectiveInstance,
    x0: &[f64],
    stop: &StopConfig,
    record: RecordOptions,
) -> Result<Trajectory> {
    let mut opt = LearnedOptimizer::new(theta, kind, x0);
    trajectory::run(&mut opt, inst, x0, stop, record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{init_params, ArchConfig};
    use crate::testfuncs::FunctionId;

    fn step_of(alpha: f64, d: f64) -> f64 {
        combine_step(&StepConfig::default(), &[alpha], &[d]).unwrap()[0]
    }

    #[test]
    fn direction_combination() {
        assert!((step_of(0.0, 1.0) - 0.1).abs() < 1e-15);
        assert_eq!(step_of(0.0, 0.0), 0.0);
        assert!((step_of(10.0, -1.0) + 0.1 * 1f64.exp()).abs() < 1e-15);
        assert!((step_of(10.0, -1.0) + 0.2718).abs() < 1e-4);
        assert!(combine_step(&StepConfig::default(), &[1e5], &[1.0]).is_err());
    }

    #[test]
    fn precond_identity_without_updates() {
        let b = precondition_update(&PrecondState::identity(2), &[vec![0.0, 0.0]]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((&b.b - DMatrix::identity(2, 2) * s).abs().max() < 1e-15);
    }

    #[test]
    fn precond_hand_rank_one() {
        let s = 1.0 / 2f64.sqrt();
        let start = PrecondState {
            b: DMatrix::identity(2, 2) * s,
        };
        let b = precondition_update(&start, &[vec![1.0, 0.0]]).unwrap();
        let raw = DMatrix::from_row_slice(2, 2, &[1.0 + s, 0.0, 0.0, s]);
        let norm = ((1.0 + s).powi(2) + s * s).sqrt();
        assert!((&b.b - raw / norm).abs().max() < 1e-15);
        assert!((b.b.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn precond_rejects_wrong_length() {
        let mut b = PrecondState::identity(3);
        assert!(b.update(&[vec![1.0; 2]]).is_err());
    }

    #[test]
    fn failed_update_leaves_b_unchanged() {
        let mut b = PrecondState::identity(2);
        b.update(&[vec![1.0, 2.0]]).unwrap();
        let before = b.clone();
        assert!(b.update(&[vec![1.0, 0.0], vec![f64::NAN, 1.0]]).is_err());
        assert!(b.update(&[vec![1e200, 0.0]]).is_err());
        assert_eq!(b, before);
        // large but finite terms still normalize
        b.update(&[vec![1e60, 0.0]]).unwrap();
        assert!((b.b[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((b.b.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_theta_does_not_move() {
        let theta = OptimizerParams::zeros(ArchConfig::desk(), StepConfig::default()).unwrap();
        let mut state = InnerState::new(LearnedKind::Optimus, &[1.0, -2.0, 3.0]);
        for _ in 0..3 {
            let dx = optimus_step(&theta, &mut state, &[0.5, 1.0, -1.0]).unwrap();
            assert!(dx.iter().all(|&v| v == 0.0));
        }
        assert_eq!(state.x, vec![1.0, -2.0, 3.0]);
        let b = &state.precond.unwrap().b;
        assert!((b - DMatrix::identity(3, 3) / 3f64.sqrt()).abs().max() < 1e-15);
    }

    #[test]
    fn adafactor_equals_optimus_with_identity_preconditioner() {
        let mut theta = init_params(4, &ArchConfig::desk(), StepConfig::default()).unwrap();
        theta.zero_prefix("proj.");
        let x0 = [0.3, -1.2, 2.0, 0.7];
        let grad = [1.0, -0.5, 0.25, 2.0];
        let mut opt = InnerState::new(LearnedKind::Optimus, &x0);
        let mut ada = InnerState::new(LearnedKind::AdafactorMlp, &x0);
        let a = optimus_step(&theta, &mut opt, &grad).unwrap();
        let b = adafactor_mlp_step(&theta, &mut ada, &grad).unwrap();
        for (o, s) in a.iter().zip(&b) {
            assert!((o - s / 2.0).abs() < 1e-14, "{o} vs {s}");
        }
        assert!(optimus_step(&theta, &mut ada, &grad).is_err());
    }

    #[test]
    fn zero_theta_run_hits_max_iters() {
        let theta = OptimizerParams::zeros(ArchConfig::desk(), StepConfig::default()).unwrap();
        let inst = ObjectiveInstance::centered(FunctionId::Sphere, 3).unwrap();
        let stop = StopConfig {
            max_iters: 12,
            ..StopConfig::default()
        };
        let t = run(
            &theta,
            LearnedKind::Optimus,
            &inst,
            &[1.0, 2.0, 3.0],
            &stop,
            Default::default(),
        )
        .unwrap();
        assert_eq!(t.losses, vec![14.0; 13]);
        assert_eq!(t.terminated_by, trajectory::TerminatedBy::MaxIters);
        assert_eq!(t.func_evals, 13);

        let t0 = run(
            &theta,
            LearnedKind::Optimus,
            &inst,
            &[1.0, 2.0, 3.0],
            &StopConfig {
                max_iters: 0,
                ..stop
            },
            Default::default(),
        )
        .unwrap();
        assert_eq!(t0.losses, vec![14.0]);
    }
}
