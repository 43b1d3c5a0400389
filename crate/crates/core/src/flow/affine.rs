use nalgebra::{DMatrix, DVector};

use super::{Flow, FlowError, JacobianMatrix, Result};

/// `f(z) = L z + b` with `L` lower triangular and a positive diagonal.
///
/// Every quantity is closed-form: `q_X = N(b, L Lᵀ)` and the latent score is
/// `-L⁻ᵀ z`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFlow {
    linear: DMatrix<f64>,
    offset: DVector<f64>,
}

impl AffineFlow {
    pub fn new(linear: DMatrix<f64>, offset: Vec<f64>) -> Result<Self> {
        let n = linear.nrows();
        if n == 0 || linear.ncols() != n || offset.len() != n {
            return Err(FlowError::Invalid("affine flow needs a square matrix and matching offset".into()));
        }
        for i in 0..n {
            if !(linear[(i, i)] > 0.0) {
                return Err(FlowError::Invalid("diagonal must be strictly positive".into()));
            }
            if (i + 1..n).any(|j| linear[(i, j)] != 0.0) {
                return Err(FlowError::Invalid("matrix must be lower triangular".into()));
            }
        }
        Ok(Self {
            linear,
            offset: DVector::from_vec(offset),
        })
    }

    /// `f(z) = factor · z` in `dim` dimensions.
    pub fn scaling(dim: usize, factor: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * factor, vec![0.0; dim])
    }

    fn log_det(&self) -> f64 {
        self.linear.diagonal().iter().map(|v| v.ln()).sum()
    }
}

impl Flow for AffineFlow {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(z)?;
        let x = &self.linear * DVector::from_column_slice(z) + &self.offset;
        Ok((x.as_slice().to_vec(), self.log_det()))
    }

    fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let rhs = DVector::from_column_slice(x) - &self.offset;
        let z = self
            .linear
            .solve_lower_triangular(&rhs)
            .ok_or_else(|| FlowError::Invalid("singular linear map".into()))?;
        Ok((z.as_slice().to_vec(), -self.log_det()))
    }

    fn jacobian(&self, z: &[f64]) -> Result<JacobianMatrix> {
        self.check_dim(z)?;
        Ok(JacobianMatrix {
            point: z.to_vec(),
            matrix: self.linear.clone(),
        })
    }

    fn latent_score(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let y = self
            .linear
            .transpose()
            .solve_upper_triangular(&DVector::from_column_slice(z))
            .ok_or_else(|| FlowError::Invalid("singular linear map".into()))?;
        Ok(y.iter().map(|v| -v).collect())
    }
}
