//! Per-parameter input features shared by the Adafactor-MLP and Optimus
//! optimizers, together with the running accumulators that produce them.
//!
//! Column layout of the `N x 38` feature matrix:
//!
//! | cols    | feature                                                  |
//! |---------|----------------------------------------------------------|
//! | 0       | parameter value                                          |
//! | 1..4    | momenta at decays 0.9, 0.99, 0.999                       |
//! | 4       | second moment (decay 0.999)                              |
//! | 5..8    | `-m / sqrt(v + eps)` for each momentum                   |
//! | 8       | `1 / sqrt(v + eps)`                                      |
//! | 9..12   | gradient normalized by each factored second moment       |
//! | 12..15  | factored row accumulators                                |
//! | 15..18  | factored column accumulators (scalars, tiled)            |
//! | 18..24  | `1 / sqrt(acc + eps)` of the six accumulators above      |
//! | 24..27  | momenta normalized by the matching factored moment       |
//! | 27..38  | `tanh(k / s)` for the eleven time scales in [`TIME_SCALES`] |
//!
//! A flat parameter vector is treated as an `N x 1` matrix, so row
//! accumulators are per-parameter and the column accumulator is a scalar.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const NUM_FEATURES: usize = 38;
pub const MOMENTUM_DECAYS: [f64; 3] = [0.9, 0.99, 0.999];
pub const SECOND_MOMENT_DECAY: f64 = 0.999;
pub const ADAFACTOR_DECAYS: [f64; 3] = [0.9, 0.99, 0.999];
pub const EPS: f64 = 1e-8;
pub const TIME_SCALES: [f64; 11] = [1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1e3, 3e3, 1e4, 3e4, 1e5];

pub mod col {
    pub const PARAM: usize = 0;
    pub const MOMENTUM: usize = 1;
    pub const SECOND_MOMENT: usize = 4;
    pub const NORMALIZED_MOMENTUM: usize = 5;
    pub const RSQRT_SECOND_MOMENT: usize = 8;
    pub const FACTORED_GRAD: usize = 9;
    pub const ROW: usize = 12;
    pub const COLUMN: usize = 15;
    pub const RSQRT_FACTORED: usize = 18;
    pub const FACTORED_MOMENTUM: usize = 24;
    pub const TIME: usize = 27;
}

/// Running statistics for one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureState {
    pub m: [Vec<f64>; 3],
    pub v: Vec<f64>,
    pub row_acc: [Vec<f64>; 3],
    pub col_acc: [f64; 3],
    pub k: u64,
}

impl FeatureState {
    pub fn new(x0: &[f64]) -> Self {
        let n = x0.len();
        Self {
            m: std::array::from_fn(|_| vec![0.0; n]),
            v: vec![0.0; n],
            row_acc: std::array::from_fn(|_| vec![0.0; n]),
            col_acc: [0.0; 3],
            k: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Folds one gradient into every accumulator and advances `k`.
    pub fn update(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::State("non-finite gradient".into()));
        }
        for (m, beta) in self.m.iter_mut().zip(MOMENTUM_DECAYS) {
            for (mi, g) in m.iter_mut().zip(grad) {
                *mi = beta * *mi + (1.0 - beta) * g;
            }
        }
        let b2 = SECOND_MOMENT_DECAY;
        for (vi, g) in self.v.iter_mut().zip(grad) {
            *vi = b2 * *vi + (1.0 - b2) * g * g;
        }
        // N x 1 matrix: the row mean of g^2 is g_i^2, the column mean is mean(g^2)
        let col_mean = grad.iter().map(|g| g * g).sum::<f64>() / grad.len().max(1) as f64;
        for ((row, c), beta) in self
            .row_acc
            .iter_mut()
            .zip(self.col_acc.iter_mut())
            .zip(ADAFACTOR_DECAYS)
        {
            for (r, g) in row.iter_mut().zip(grad) {
                *r = beta * *r + (1.0 - beta) * g * g;
            }
            *c = beta * *c + (1.0 - beta) * col_mean;
        }
        self.k += 1;
        Ok(())
    }

    /// Factored second-moment estimate `row_i * col / mean(row)`.
    fn factored(&self, j: usize) -> Vec<f64> {
        let row = &self.row_acc[j];
        let mean = row.iter().sum::<f64>() / row.len().max(1) as f64;
        if mean > 0.0 {
            row.iter().map(|r| r * self.col_acc[j] / mean).collect()
        } else {
            vec![0.0; row.len()]
        }
    }
}

fn rsqrt(v: f64) -> f64 {
    1.0 / (v + EPS).sqrt()
}

/// Raw (unnormalized) feature matrix, `N x 38`.
pub fn raw_features(s: &FeatureState, x: &[f64], grad: &[f64], k: u64) -> Result<DMatrix<f64>> {
    let n = s.len();
    for len in [x.len(), grad.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: len,
            });
        }
    }
    let mut z = DMatrix::zeros(n, NUM_FEATURES);
    let mut fill = |c: usize, f: &dyn Fn(usize) -> f64| {
        for (i, v) in z.column_mut(c).iter_mut().enumerate() {
            *v = f(i);
        }
    };
    fill(col::PARAM, &|i| x[i]);
    for j in 0..3 {
        fill(col::MOMENTUM + j, &|i| s.m[j][i]);
        fill(col::NORMALIZED_MOMENTUM + j, &|i| {
            -s.m[j][i] * rsqrt(s.v[i])
        });
    }
    fill(col::SECOND_MOMENT, &|i| s.v[i]);
    fill(col::RSQRT_SECOND_MOMENT, &|i| rsqrt(s.v[i]));
    for j in 0..3 {
        let fac = s.factored(j);
        fill(col::FACTORED_GRAD + j, &|i| grad[i] * rsqrt(fac[i]));
        fill(col::ROW + j, &|i| s.row_acc[j][i]);
        fill(col::COLUMN + j, &|_| s.col_acc[j]);
        fill(col::RSQRT_FACTORED + j, &|i| rsqrt(s.row_acc[j][i]));
        fill(col::RSQRT_FACTORED + 3 + j, &|_| rsqrt(s.col_acc[j]));
        fill(col::FACTORED_MOMENTUM + j, &|i| s.m[j][i] * rsqrt(fac[i]));
    }
    for (t, scale) in TIME_SCALES.iter().enumerate() {
        let value = (k as f64 / scale).tanh();
        fill(col::TIME + t, &|_| value);
    }
    Ok(z)
}

/// Scales every column to unit root-mean-square across the rows. Columns
/// that are identically zero stay zero.
pub fn normalize_columns(z: &mut DMatrix<f64>) {
    let n = z.nrows() as f64;
    for mut c in z.column_iter_mut() {
        let peak = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if peak == 0.0 || !peak.is_finite() {
            continue;
        }
        let ms = c.iter().map(|v| (v / peak).powi(2)).sum::<f64>() / n;
        let rms = peak * ms.sqrt();
        c.iter_mut().for_each(|v| *v /= rms);
    }
}

/// Normalized feature matrix fed to both network branches.
pub fn compute_features(s: &FeatureState, x: &[f64], grad: &[f64], k: u64) -> Result<DMatrix<f64>> {
    let mut z = raw_features(s, x, grad, k)?;
    normalize_columns(&mut z);
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_zero() {
        let s = FeatureState::new(&[1.0; 5]);
        assert_eq!(s.len(), 5);
        assert!(s.m.iter().flatten().chain(&s.v).all(|&v| v == 0.0));
        assert_eq!(s.k, 0);
        assert_eq!(s, FeatureState::new(&[1.0; 5]));
    }

    #[test]
    fn first_update() {
        let mut s = FeatureState::new(&[0.0; 2]);
        s.update(&[1.0, -2.0]).unwrap();
        assert!((s.m[0][0] - 0.1).abs() < 1e-15);
        assert!((s.m[0][1] + 0.2).abs() < 1e-15);
        assert_eq!(s.k, 1);
        assert!(matches!(s.update(&[f64::NAN, 0.0]), Err(Error::State(_))));
    }

    #[test]
    fn zero_gradients_keep_state_zero() {
        let mut s = FeatureState::new(&[0.0; 3]);
        for _ in 0..20 {
            s.update(&[0.0; 3]).unwrap();
        }
        assert!(s.m.iter().flatten().chain(&s.v).all(|&v| v == 0.0));
        assert!(s.row_acc.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(s.col_acc, [0.0; 3]);
    }

    #[test]
    fn momenta_converge_to_constant_gradient() {
        // m_k = g (1 - beta^k): the gap after k steps is beta^k g, about
        // e^-10 g at k = 10 / (1 - beta) and below 1e-6 g at k = 14 / (1 - beta)
        let g = 3.0;
        for (j, beta) in MOMENTUM_DECAYS.iter().enumerate() {
            let mut s = FeatureState::new(&[0.0]);
            let steps = (10.0 / (1.0 - beta)).round() as i32;
            for _ in 0..steps {
                s.update(&[g]).unwrap();
            }
            let gap = (g - s.m[j][0]).abs();
            let closed_form = beta.powi(steps) * g;
            assert!((gap - closed_form).abs() < 1e-9, "{gap} vs {closed_form}");
            assert!(gap < 5e-5 * g);
            for _ in steps..(14.0 / (1.0 - beta)).round() as i32 {
                s.update(&[g]).unwrap();
            }
            assert!((g - s.m[j][0]).abs() < 1e-6 * g);
        }
    }

    #[test]
    fn single_parameter_normalized_momentum() {
        let mut s = FeatureState::new(&[0.0]);
        s.update(&[1.0]).unwrap();
        let z = raw_features(&s, &[0.0], &[1.0], 1).unwrap();
        let expected = -0.1 / (0.001f64 + 1e-8).sqrt();
        assert!((z[(0, col::NORMALIZED_MOMENTUM)] - expected).abs() < 1e-12);
        assert!((expected + 3.162).abs() < 1e-3);
    }

    #[test]
    fn time_features_at_step_zero() {
        let s = FeatureState::new(&[0.0; 4]);
        let z = compute_features(&s, &[1.0, 2.0, 3.0, 4.0], &[0.0; 4], 0).unwrap();
        for c in col::TIME..NUM_FEATURES {
            assert!(z.column(c).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_column_normalizes_to_one() {
        let mut z = DMatrix::from_element(4, 2, 2.0);
        z.column_mut(1).fill(0.0);
        normalize_columns(&mut z);
        assert!(z.column(0).iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(z.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layout_has_38_columns() {
        let mut s = FeatureState::new(&[0.5, -1.5]);
        s.update(&[2.0, -4.0]).unwrap();
        let z = raw_features(&s, &[0.5, -1.5], &[2.0, -4.0], 1).unwrap();
        assert_eq!(z.ncols(), NUM_FEATURES);
        // tiled column accumulator is the mean of g^2 scaled by (1 - 0.9)
        assert!((z[(0, col::COLUMN)] - 1.0).abs() < 1e-12);
        assert_eq!(z[(0, col::COLUMN)], z[(1, col::COLUMN)]);
        assert!((z[(1, col::ROW)] - 1.6).abs() < 1e-12);
        assert!((z[(0, col::TIME)] - 1f64.tanh()).abs() < 1e-15);
    }
}
