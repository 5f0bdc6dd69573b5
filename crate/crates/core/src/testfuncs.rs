//! Classical dimension-parametric test functions with analytic gradients.
//!
//! Formulas and recommended search boxes follow the usual virtual library of
//! simulation experiments catalog. Every instance is the base function
//! translated by an offset: `f(x - offset)`.

use std::f64::consts::{E, PI};
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Perm(0, d, beta) constant.
pub const PERM_BETA: f64 = 10.0;

/// Step for the central finite-difference Hessian of functions without an
/// analytic second derivative.
pub const HESSIAN_FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionId {
    Ackley,
    DixonPrice,
    Griewank,
    Levy,
    Perm0DBeta,
    Powell,
    Rastrigin,
    Rosenbrock,
    RotatedHyperEllipsoid,
    Sphere,
    StyblinskiTang,
    SumOfPowers,
    SumOfSquares,
    Trid,
    Zakharov,
}

impl FunctionId {
    pub const ALL: [FunctionId; 15] = [
        FunctionId::Ackley,
        FunctionId::DixonPrice,
        FunctionId::Griewank,
        FunctionId::Levy,
        FunctionId::Perm0DBeta,
        FunctionId::Powell,
        FunctionId::Rastrigin,
        FunctionId::Rosenbrock,
        FunctionId::RotatedHyperEllipsoid,
        FunctionId::Sphere,
        FunctionId::StyblinskiTang,
        FunctionId::SumOfPowers,
        FunctionId::SumOfSquares,
        FunctionId::Trid,
        FunctionId::Zakharov,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FunctionId::Ackley => "ackley",
            FunctionId::DixonPrice => "dixon_price",
            FunctionId::Griewank => "griewank",
            FunctionId::Levy => "levy",
            FunctionId::Perm0DBeta => "perm0_d_beta",
            FunctionId::Powell => "powell",
            FunctionId::Rastrigin => "rastrigin",
            FunctionId::Rosenbrock => "rosenbrock",
            FunctionId::RotatedHyperEllipsoid => "rotated_hyper_ellipsoid",
            FunctionId::Sphere => "sphere",
            FunctionId::StyblinskiTang => "styblinski_tang",
            FunctionId::SumOfPowers => "sum_of_powers",
            FunctionId::SumOfSquares => "sum_of_squares",
            FunctionId::Trid => "trid",
            FunctionId::Zakharov => "zakharov",
        }
    }

    /// Dimension actually instantiated for a requested one. Powell is only
    /// defined for multiples of four, so it rounds down (minimum 4).
    pub fn effective_dim(self, requested: usize) -> usize {
        match self {
            FunctionId::Powell => (requested / 4 * 4).max(4),
            _ => requested,
        }
    }

    /// Recommended per-coordinate search interval.
    pub fn domain(self, dim: usize) -> (f64, f64) {
        let d = dim as f64;
        match self {
            FunctionId::Ackley => (-32.768, 32.768),
            FunctionId::DixonPrice => (-10.0, 10.0),
            FunctionId::Griewank => (-600.0, 600.0),
            FunctionId::Levy => (-10.0, 10.0),
            FunctionId::Perm0DBeta => (-d, d),
            FunctionId::Powell => (-4.0, 5.0),
            FunctionId::Rastrigin => (-5.12, 5.12),
            FunctionId::Rosenbrock => (-5.0, 10.0),
            FunctionId::RotatedHyperEllipsoid => (-65.536, 65.536),
            FunctionId::Sphere => (-5.12, 5.12),
            FunctionId::StyblinskiTang => (-5.0, 5.0),
            FunctionId::SumOfPowers => (-1.0, 1.0),
            FunctionId::SumOfSquares => (-10.0, 10.0),
            FunctionId::Trid => (-d * d, d * d),
            FunctionId::Zakharov => (-5.0, 10.0),
        }
    }

    pub fn has_analytic_hessian(self) -> bool {
        matches!(
            self,
            FunctionId::Sphere
                | FunctionId::Rosenbrock
                | FunctionId::SumOfSquares
                | FunctionId::RotatedHyperEllipsoid
                | FunctionId::Trid
        )
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FunctionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FunctionId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown function id `{s}`")))
    }
}

/// A benchmark function at a fixed dimension, translated by `offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveInstance {
    pub id: FunctionId,
    /// Effective dimension (see [`FunctionId::effective_dim`]).
    pub dim: usize,
    /// Dimension that was asked for before any rounding.
    pub requested_dim: usize,
    pub offset: Vec<f64>,
}

impl ObjectiveInstance {
    /// Builds an instance; `offset` must have the effective dimension.
    pub fn new(id: FunctionId, requested_dim: usize, offset: Vec<f64>) -> Result<Self> {
        if requested_dim < 2 {
            return Err(Error::Argument(format!(
                "{id} needs dimension >= 2, got {requested_dim}"
            )));
        }
        let dim = id.effective_dim(requested_dim);
        if offset.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: offset.len(),
            });
        }
        if offset.iter().any(|o| !o.is_finite()) {
            return Err(Error::Domain("offset must be finite".into()));
        }
        Ok(Self {
            id,
            dim,
            requested_dim,
            offset,
        })
    }

    /// Instance without translation.
    pub fn centered(id: FunctionId, requested_dim: usize) -> Result<Self> {
        Self::new(
            id,
            requested_dim,
            vec![0.0; id.effective_dim(requested_dim)],
        )
    }

    /// Instance with an offset drawn uniformly from the domain box.
    pub fn with_random_offset<R: Rng + ?Sized>(
        id: FunctionId,
        requested_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = id.effective_dim(requested_dim);
        let (lo, hi) = id.domain(dim);
        let offset = (0..dim).map(|_| rng.random_range(lo..=hi)).collect();
        Self::new(id, requested_dim, offset)
    }

    pub fn domain_box(&self) -> (f64, f64) {
        self.id.domain(self.dim)
    }

    /// Uniform sample from the domain box, used for initial points.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let (lo, hi) = self.domain_box();
        (0..self.dim).map(|_| rng.random_range(lo..=hi)).collect()
    }

    fn shifted(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite input to {}", self.id)));
        }
        Ok(x.iter().zip(&self.offset).map(|(a, o)| a - o).collect())
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let y = self.shifted(x)?;
        Ok(value(self.id, &y))
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.shifted(x)?;
        Ok(gradient(self.id, &y))
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let y = self.shifted(x)?;
        Ok((value(self.id, &y), gradient(self.id, &y)))
    }

    /// Analytic Hessian where available, otherwise a symmetrized central
    /// difference of the analytic gradient.
    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let y = self.shifted(x)?;
        if let Some(h) = analytic_hessian(self.id, &y) {
            return Ok(h);
        }
        let n = y.len();
        let mut h = DMatrix::zeros(n, n);
        let mut probe = y.clone();
        for j in 0..n {
            probe[j] = y[j] + HESSIAN_FD_STEP;
            let gp = gradient(self.id, &probe);
            probe[j] = y[j] - HESSIAN_FD_STEP;
            let gm = gradient(self.id, &probe);
            probe[j] = y[j];
            for i in 0..n {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * HESSIAN_FD_STEP);
            }
        }
        Ok((&h + h.transpose()) * 0.5)
    }

    /// Shifted global minimizer and minimum value.
    pub fn global_minimum(&self) -> (Vec<f64>, f64) {
        let base = base_minimizer(self.id, self.dim);
        let f_star = value(self.id, &base);
        let x_star = base.iter().zip(&self.offset).map(|(b, o)| b + o).collect();
        (x_star, f_star)
    }

    pub fn f_star(&self) -> f64 {
        self.global_minimum().1
    }

    pub fn label(&self) -> String {
        format!("{}_{}", self.id, self.dim)
    }
}

/// Draws a task: function uniform over `fn_set`, dimension uniform over
/// `dims`, offset uniform in the domain box. Deterministic in `seed`.
pub fn sample_task(
    seed: u64,
    fn_set: &[FunctionId],
    dims: RangeInclusive<usize>,
) -> Result<ObjectiveInstance> {
    if fn_set.is_empty() {
        return Err(Error::Argument("empty function set".into()));
    }
    if *dims.start() < 2 || dims.is_empty() {
        return Err(Error::Argument(format!(
            "dimension range {dims:?} must be non-empty and start at >= 2"
        )));
    }
    let mut rng = rng::stream(seed, &[0x7A5C]);
    let id = fn_set[rng.random_range(0..fn_set.len())];
    let dim = rng.random_range(dims);
    ObjectiveInstance::with_random_offset(id, dim, &mut rng)
}

fn value(id: FunctionId, y: &[f64]) -> f64 {
    let d = y.len();
    match id {
        FunctionId::Ackley => {
            let (a, b, c) = (20.0, 0.2, 2.0 * PI);
            let n = d as f64;
            let s1: f64 = y.iter().map(|v| v * v).sum();
            let s2: f64 = y.iter().map(|v| (c * v).cos()).sum();
            -a * (-b * (s1 / n).sqrt()).exp() - (s2 / n).exp() + a + E
        }
        FunctionId::DixonPrice => {
            let mut f = (y[0] - 1.0).powi(2);
            for j in 1..d {
                let t = 2.0 * y[j] * y[j] - y[j - 1];
                f += (j + 1) as f64 * t * t;
            }
            f
        }
        FunctionId::Griewank => {
            let s: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4000.0;
            let p: f64 = y
                .iter()
                .enumerate()
                .map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos())
                .product();
            s - p + 1.0
        }
        FunctionId::Levy => {
            let w: Vec<f64> = y.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
            let mut f = (PI * w[0]).sin().powi(2);
            for &wi in &w[..d - 1] {
                f += (wi - 1.0).powi(2) * (1.0 + 10.0 * (PI * wi + 1.0).sin().powi(2));
            }
            let wd = w[d - 1];
            f + (wd - 1.0).powi(2) * (1.0 + (2.0 * PI * wd).sin().powi(2))
        }
        FunctionId::Perm0DBeta => perm_inner(y).iter().map(|s| s * s).sum(),
        FunctionId::Powell => y
            .chunks_exact(4)
            .map(|q| {
                let (a, b, c, e) = (q[0], q[1], q[2], q[3]);
                (a + 10.0 * b).powi(2)
                    + 5.0 * (c - e).powi(2)
                    + (b - 2.0 * c).powi(4)
                    + 10.0 * (a - e).powi(4)
            })
            .sum(),
        FunctionId::Rastrigin => {
            10.0 * d as f64
                + y.iter()
                    .map(|v| v * v - 10.0 * (2.0 * PI * v).cos())
                    .sum::<f64>()
        }
        FunctionId::Rosenbrock => y
            .windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum(),
        FunctionId::RotatedHyperEllipsoid => y
            .iter()
            .enumerate()
            .map(|(j, v)| (d - j) as f64 * v * v)
            .sum(),
        FunctionId::Sphere => y.iter().map(|v| v * v).sum(),
        FunctionId::StyblinskiTang => {
            0.5 * y
                .iter()
                .map(|v| v.powi(4) - 16.0 * v * v + 5.0 * v)
                .sum::<f64>()
        }
        FunctionId::SumOfPowers => y
            .iter()
            .enumerate()
            .map(|(j, v)| v.abs().powi(j as i32 + 2))
            .sum(),
        FunctionId::SumOfSquares => y
            .iter()
            .enumerate()
            .map(|(j, v)| (j + 1) as f64 * v * v)
            .sum(),
        FunctionId::Trid => {
            let a: f64 = y.iter().map(|v| (v - 1.0).powi(2)).sum();
            let b: f64 = y.windows(2).map(|w| w[0] * w[1]).sum();
            a - b
        }
        FunctionId::Zakharov => {
            let s1: f64 = y.iter().map(|v| v * v).sum();
            let s2 = zakharov_linear(y);
            s1 + s2 * s2 + s2.powi(4)
        }
    }
}

fn zakharov_linear(y: &[f64]) -> f64 {
    y.iter()
        .enumerate()
        .map(|(j, v)| 0.5 * (j + 1) as f64 * v)
        .sum()
}

/// Inner sums of Perm(0, d, beta): `s_i = sum_j (j + beta)(y_j^i - j^-i)`.
fn perm_inner(y: &[f64]) -> Vec<f64> {
    let d = y.len();
    let mut sums = vec![0.0; d];
    for (j, &v) in y.iter().enumerate() {
        let jj = (j + 1) as f64;
        let w = jj + PERM_BETA;
        let mut yp = 1.0;
        let mut jp = 1.0;
        for s in sums.iter_mut() {
            yp *= v;
            jp /= jj;
            *s += w * (yp - jp);
        }
    }
    sums
}

fn gradient(id: FunctionId, y: &[f64]) -> Vec<f64> {
    let d = y.len();
    let mut g = vec![0.0; d];
    match id {
        FunctionId::Ackley => {
            let (a, b, c) = (20.0, 0.2, 2.0 * PI);
            let n = d as f64;
            let s1: f64 = y.iter().map(|v| v * v).sum();
            let s2: f64 = y.iter().map(|v| (c * v).cos()).sum();
            let r = (s1 / n).sqrt();
            // the radial term has no derivative at r = 0; use the zero subgradient
            let radial = if r > 0.0 {
                a * b * (-b * r).exp() / (n * r)
            } else {
                0.0
            };
            let cosine = (s2 / n).exp() * c / n;
            for (gi, v) in g.iter_mut().zip(y) {
                *gi = radial * v + cosine * (c * v).sin();
            }
        }
        FunctionId::DixonPrice => {
            g[0] = 2.0 * (y[0] - 1.0);
            for j in 1..d {
                let t = 2.0 * y[j] * y[j] - y[j - 1];
                let w = 2.0 * (j + 1) as f64 * t;
                g[j] += w * 4.0 * y[j];
                g[j - 1] -= w;
            }
        }
        FunctionId::Griewank => {
            let cs: Vec<f64> = y
                .iter()
                .enumerate()
                .map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos())
                .collect();
            // products excluding index i, without dividing by a possibly-zero cosine
            let mut prefix = vec![1.0; d + 1];
            for i in 0..d {
                prefix[i + 1] = prefix[i] * cs[i];
            }
            let mut suffix = 1.0;
            for i in (0..d).rev() {
                let sq = ((i + 1) as f64).sqrt();
                let others = prefix[i] * suffix;
                g[i] = y[i] / 2000.0 + (y[i] / sq).sin() / sq * others;
                suffix *= cs[i];
            }
        }
        FunctionId::Levy => {
            let w: Vec<f64> = y.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
            g[0] += PI * (2.0 * PI * w[0]).sin();
            for i in 0..d - 1 {
                let wi = w[i];
                let arg = PI * wi + 1.0;
                g[i] += 2.0 * (wi - 1.0) * (1.0 + 10.0 * arg.sin().powi(2))
                    + (wi - 1.0).powi(2) * 10.0 * PI * (2.0 * arg).sin();
            }
            let wd = w[d - 1];
            g[d - 1] += 2.0 * (wd - 1.0) * (1.0 + (2.0 * PI * wd).sin().powi(2))
                + (wd - 1.0).powi(2) * 2.0 * PI * (4.0 * PI * wd).sin();
            for gi in &mut g {
                *gi *= 0.25;
            }
        }
        FunctionId::Perm0DBeta => {
            let sums = perm_inner(y);
            for (j, &v) in y.iter().enumerate() {
                let w = (j + 1) as f64 + PERM_BETA;
                // d/dy_j of y_j^i is i y_j^(i-1)
                let mut yp = 1.0;
                let mut acc = 0.0;
                for (i, s) in sums.iter().enumerate() {
                    acc += 2.0 * s * w * (i + 1) as f64 * yp;
                    yp *= v;
                }
                g[j] = acc;
            }
        }
        FunctionId::Powell => {
            for (q, gq) in y.chunks_exact(4).zip(g.chunks_exact_mut(4)) {
                let (a, b, c, e) = (q[0], q[1], q[2], q[3]);
                let t1 = a + 10.0 * b;
                let t2 = c - e;
                let t3 = (b - 2.0 * c).powi(3);
                let t4 = (a - e).powi(3);
                gq[0] = 2.0 * t1 + 40.0 * t4;
                gq[1] = 20.0 * t1 + 4.0 * t3;
                gq[2] = 10.0 * t2 - 8.0 * t3;
                gq[3] = -10.0 * t2 - 40.0 * t4;
            }
        }
        FunctionId::Rastrigin => {
            for (gi, v) in g.iter_mut().zip(y) {
                *gi = 2.0 * v + 20.0 * PI * (2.0 * PI * v).sin();
            }
        }
        FunctionId::Rosenbrock => {
            for i in 0..d - 1 {
                let t = y[i + 1] - y[i] * y[i];
                g[i] += -400.0 * y[i] * t - 2.0 * (1.0 - y[i]);
                g[i + 1] += 200.0 * t;
            }
        }
        FunctionId::RotatedHyperEllipsoid => {
            for (j, (gi, v)) in g.iter_mut().zip(y).enumerate() {
                *gi = 2.0 * (d - j) as f64 * v;
            }
        }
        FunctionId::Sphere => {
            for (gi, v) in g.iter_mut().zip(y) {
                *gi = 2.0 * v;
            }
        }
        FunctionId::StyblinskiTang => {
            for (gi, v) in g.iter_mut().zip(y) {
                *gi = 2.0 * v.powi(3) - 16.0 * v + 2.5;
            }
        }
        FunctionId::SumOfPowers => {
            for (j, (gi, v)) in g.iter_mut().zip(y).enumerate() {
                let p = j as i32 + 2;
                *gi = p as f64 * v.abs().powi(p - 1) * v.signum();
                if *v == 0.0 {
                    *gi = 0.0;
                }
            }
        }
        FunctionId::SumOfSquares => {
            for (j, (gi, v)) in g.iter_mut().zip(y).enumerate() {
                *gi = 2.0 * (j + 1) as f64 * v;
            }
        }
        FunctionId::Trid => {
            for i in 0..d {
                g[i] = 2.0 * (y[i] - 1.0);
                if i > 0 {
                    g[i] -= y[i - 1];
                }
                if i + 1 < d {
                    g[i] -= y[i + 1];
                }
            }
        }
        FunctionId::Zakharov => {
            let s2 = zakharov_linear(y);
            let outer = 2.0 * s2 + 4.0 * s2.powi(3);
            for (j, (gi, v)) in g.iter_mut().zip(y).enumerate() {
                *gi = 2.0 * v + outer * 0.5 * (j + 1) as f64;
            }
        }
    }
    g
}

fn analytic_hessian(id: FunctionId, y: &[f64]) -> Option<DMatrix<f64>> {
    let d = y.len();
    let mut h = DMatrix::zeros(d, d);
    match id {
        FunctionId::Sphere => h.fill_diagonal(2.0),
        FunctionId::SumOfSquares => {
            for j in 0..d {
                h[(j, j)] = 2.0 * (j + 1) as f64;
            }
        }
        FunctionId::RotatedHyperEllipsoid => {
            for j in 0..d {
                h[(j, j)] = 2.0 * (d - j) as f64;
            }
        }
        FunctionId::Trid => {
            for i in 0..d {
                h[(i, i)] = 2.0;
                if i + 1 < d {
                    h[(i, i + 1)] = -1.0;
                    h[(i + 1, i)] = -1.0;
                }
            }
        }
        FunctionId::Rosenbrock => {
            for i in 0..d - 1 {
                h[(i, i)] += 1200.0 * y[i] * y[i] - 400.0 * y[i + 1] + 2.0;
                h[(i, i + 1)] -= 400.0 * y[i];
                h[(i + 1, i)] -= 400.0 * y[i];
                h[(i + 1, i + 1)] += 200.0;
            }
        }
        _ => return None,
    }
    Some(h)
}

/// Minimizer of the untranslated function.
fn base_minimizer(id: FunctionId, d: usize) -> Vec<f64> {
    match id {
        FunctionId::DixonPrice => (1..=d)
            .map(|i| {
                let p = 2f64.powi(i as i32);
                2f64.powf(-(p - 2.0) / p)
            })
            .collect(),
        FunctionId::Levy | FunctionId::Rosenbrock => vec![1.0; d],
        FunctionId::Perm0DBeta => (1..=d).map(|j| 1.0 / j as f64).collect(),
        FunctionId::StyblinskiTang => vec![styblinski_tang_root(); d],
        FunctionId::Trid => (1..=d).map(|i| (i * (d + 1 - i)) as f64).collect(),
        _ => vec![0.0; d],
    }
}

/// Negative root of `2y^3 - 16y + 2.5`, refined by Newton's method.
fn styblinski_tang_root() -> f64 {
    let mut y: f64 = -2.9;
    for _ in 0..50 {
        let f = 2.0 * y.powi(3) - 16.0 * y + 2.5;
        let df = 6.0 * y * y - 16.0;
        let next = y - f / df;
        if next == y {
            break;
        }
        y = next;
    }
    y
}
