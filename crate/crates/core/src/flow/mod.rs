//! Invertible maps from the latent space to data space.
//!
//! [`FlowModel`] is the trainable stack of affine coupling layers.
//! [`AffineFlow`] is a closed-form linear map used as an analytic reference.
//! Samplers and metrics only need the [`Flow`] trait.

mod affine;
mod checkpoint;
mod coupling;
mod mlp;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::autograd::AutogradError;
use crate::points::PointSet;

pub use affine::AffineFlow;
pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use coupling::{CouplingLayer, FlowModel, ModelShape, SCALE_CLAMP};
pub use mlp::{Dense, Mlp};

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("expected a point of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value after coupling layer {layer} ({direction})")]
    NonFinite { layer: usize, direction: &'static str },
    #[error("invalid flow: {0}")]
    Invalid(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Log-density of the standard normal in `z.len()` dimensions.
pub fn std_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - z.len() as f64 * HALF_LN_2PI
}

/// Bijection `f` from the latent space to data space with tractable Jacobian.
pub trait Flow: Sync {
    fn dim(&self) -> usize;

    /// `(f(z), log|J_f(z)|)`.
    fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)>;

    /// `(f⁻¹(x), log|J_{f⁻¹}(x)|)`.
    fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)>;

    /// Dense Jacobian of `f` at `z`.
    fn jacobian(&self, z: &[f64]) -> Result<JacobianMatrix>;

    /// `∇ₓ log q_X(x)` at `x = f(z)`.
    fn latent_score(&self, z: &[f64]) -> Result<Vec<f64>>;

    /// `log q̃_Z(z) = log q_Z(z) - log|J_f(z)|`.
    fn pullback_log_density(&self, z: &[f64]) -> Result<f64> {
        let (_, log_det) = self.forward(z)?;
        Ok(std_normal_log_density(z) - log_det)
    }

    /// `log q_X(x) = log q_Z(f⁻¹(x)) + log|J_{f⁻¹}(x)|`.
    fn log_density(&self, x: &[f64]) -> Result<f64> {
        let (z, log_det_inv) = self.inverse(x)?;
        Ok(std_normal_log_density(&z) + log_det_inv)
    }

    fn check_dim(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(FlowError::Dimension {
                expected: self.dim(),
                got: p.len(),
            });
        }
        Ok(())
    }

    fn forward_all(&self, zs: &PointSet) -> Result<PointSet> {
        let mut out = PointSet::with_capacity(self.dim(), zs.len());
        for z in zs {
            out.push(&self.forward(z)?.0);
        }
        Ok(out)
    }

    fn inverse_all(&self, xs: &PointSet) -> Result<PointSet> {
        let mut out = PointSet::with_capacity(self.dim(), xs.len());
        for x in xs {
            out.push(&self.inverse(x)?.0);
        }
        Ok(out)
    }
}

/// Jacobian of a flow at a latent point.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub point: Vec<f64>,
    pub matrix: DMatrix<f64>,
}

impl JacobianMatrix {
    pub fn identity(point: &[f64]) -> Self {
        Self {
            point: point.to_vec(),
            matrix: DMatrix::identity(point.len(), point.len()),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn determinant(&self) -> f64 {
        self.matrix.determinant()
    }

    /// `ln det J`; NaN when the determinant is not positive.
    pub fn log_det(&self) -> f64 {
        self.determinant().ln()
    }

    /// Largest singular value.
    pub fn op_norm(&self) -> f64 {
        self.matrix
            .clone()
            .svd(false, false)
            .singular_values
            .max()
    }

    /// `J v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(v)).as_slice().to_vec()
    }

    /// `J⁻¹ v`, or `None` when `J` is singular.
    pub fn solve(&self, v: &[f64]) -> Option<Vec<f64>> {
        self.matrix
            .clone()
            .lu()
            .solve(&DVector::from_column_slice(v))
            .map(|s| s.as_slice().to_vec())
    }

    /// `J⁻ᵀ v`, or `None` when `J` is singular.
    pub fn solve_transpose(&self, v: &[f64]) -> Option<Vec<f64>> {
        self.matrix
            .transpose()
            .lu()
            .solve(&DVector::from_column_slice(v))
            .map(|s| s.as_slice().to_vec())
    }

    pub fn inverse(&self) -> Option<DMatrix<f64>> {
        self.matrix.clone().try_inverse()
    }

    /// True when every entry above the diagonal is exactly zero.
    pub fn is_lower_triangular(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (i + 1..n).all(|j| self.matrix[(i, j)] == 0.0))
    }

    pub fn has_positive_diagonal(&self) -> bool {
        self.matrix.diagonal().iter().all(|&v| v > 0.0)
    }
}
