//! Hessian accumulation `H = XXᵀ` from calibration activations.
//!
//! Activations arrive as `n × d_in` row batches (one sample per row), so the
//! accumulated quantity is `BᵀB` per batch. The raw sum is kept separately
//! from the dampening term: reconstruction solves against the dampened
//! matrix, error reporting uses the raw one.

use crate::error::{Error, Result};
use crate::tensor::{spd_inverse, Matrix};

/// Default dampening, as a fraction of the mean Hessian diagonal.
pub const DEFAULT_DAMP_PERCENT: f64 = 0.01;

/// Smallest retry dampening suggested after a failed inversion.
pub const MIN_RETRY_DAMP_PERCENT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct HessianState {
    raw: Matrix,
    n_samples: usize,
    col_sq_norms: Vec<f64>,
    damp_percent: f64,
    damp_lambda: f64,
}

impl HessianState {
    pub fn new(d_in: usize) -> Self {
        Self {
            raw: Matrix::zeros(d_in, d_in),
            n_samples: 0,
            col_sq_norms: vec![0.0; d_in],
            damp_percent: 0.0,
            damp_lambda: 0.0,
        }
    }

    /// Convenience: a fresh state with one batch folded in.
    pub fn from_samples(samples: &Matrix) -> Result<Self> {
        Self::new(samples.cols()).accumulate(samples)
    }

    pub fn dim(&self) -> usize {
        self.raw.rows()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn damp_percent(&self) -> f64 {
        self.damp_percent
    }

    pub fn damp_lambda(&self) -> f64 {
        self.damp_lambda
    }

    /// Undampened `XXᵀ`.
    pub fn raw_hessian(&self) -> &Matrix {
        &self.raw
    }

    /// `XXᵀ + λI` with the recorded dampening.
    pub fn hessian(&self) -> Matrix {
        let mut h = self.raw.clone();
        if self.damp_lambda != 0.0 {
            for i in 0..h.rows() {
                h.set(i, i, h.get(i, i) + self.damp_lambda);
            }
        }
        h
    }

    /// Per-input-feature ℓ₂ norm over all accumulated samples.
    pub fn column_norms(&self) -> Vec<f64> {
        self.col_sq_norms.iter().map(|v| v.sqrt()).collect()
    }

    /// Folds a batch of samples into the Hessian.
    pub fn accumulate(mut self, batch: &Matrix) -> Result<Self> {
        let d = self.dim();
        if batch.cols() != d {
            return Err(Error::Shape(format!(
                "batch has {} features, hessian expects {d}",
                batch.cols()
            )));
        }
        for s in 0..batch.rows() {
            let x = batch.row(s);
            for i in 0..d {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                self.col_sq_norms[i] += xi * xi;
                // lower triangle, mirrored below
                for j in 0..=i {
                    let v = self.raw.get(i, j) + xi * x[j];
                    self.raw.set(i, j, v);
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                let v = self.raw.get(i, j);
                self.raw.set(j, i, v);
            }
        }
        self.n_samples += batch.rows();
        Ok(self)
    }

    /// Sets dampening to `percent × mean(diag(H))`, replacing any earlier value.
    pub fn dampen(mut self, percent: f64) -> Result<Self> {
        if !(percent >= 0.0) || !percent.is_finite() {
            return Err(Error::Config(format!(
                "dampening percent must be a finite value >= 0, got {percent}"
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config(
                "cannot dampen a hessian with no accumulated samples".into(),
            ));
        }
        let d = self.dim();
        let mean_diag = if d == 0 {
            0.0
        } else {
            (0..d).map(|i| self.raw.get(i, i)).sum::<f64>() / d as f64
        };
        self.damp_percent = percent;
        self.damp_lambda = percent * mean_diag;
        Ok(self)
    }

    /// `H⁻¹` of the dampened Hessian. On failure the error suggests a larger
    /// dampening to retry with.
    pub fn invert(&self) -> Result<Matrix> {
        spd_inverse(&self.hessian()).map_err(|e| match e {
            Error::NotPositiveDefinite { .. } => Error::NeedsDampening {
                current_percent: self.damp_percent,
                suggested_percent: (10.0 * self.damp_percent).max(MIN_RETRY_DAMP_PERCENT),
            },
            other => other,
        })
    }
}

/// Free-function form of [`HessianState::invert`].
pub fn invert_hessian(state: &HessianState) -> Result<Matrix> {
    state.invert()
}
