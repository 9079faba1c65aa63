//! Linear measurement operators and the shifted normal-equation solves the
//! ADMM x-update needs.
//!
//! Both operators are short and wide (`M < N`), so `(AᵀA + ρI)⁻¹` is applied
//! through the Woodbury identity
//! `(AᵀA + ρI)⁻¹ r = (r − Aᵀ (ρI + AAᵀ)⁻¹ A r) / ρ`, which only needs an
//! `M x M` factorization. For block averaging `AAᵀ = I/c²` and `AᵀA` is a
//! scaled projection, so the inverse is applied in closed form.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scene::ForwardModel;

pub trait LinearOperator: Send + Sync {
    /// Output (measurement) dimension.
    fn rows(&self) -> usize;
    /// Input (sub-pixel grid) dimension.
    fn cols(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, y: &[f64]) -> Vec<f64>;
    /// Prepares `r ↦ (AᵀA + ρI)⁻¹ r` for a fixed `ρ > 0`.
    fn shifted_solver(&self, rho: f64) -> Result<Box<dyn ShiftedSolve + '_>>;

    /// Largest eigenvalue of `AᵀA`, by power iteration.
    fn spectral_norm_sq(&self) -> f64 {
        let n = self.cols();
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = self.adjoint(&self.apply(&v));
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm;
            v = w.into_iter().map(|a| a / norm).collect();
            if (next - lambda).abs() <= 1e-12 * next {
                return next;
            }
            lambda = next;
        }
        lambda
    }
}

pub trait ShiftedSolve {
    fn solve(&self, rhs: &[f64]) -> Vec<f64>;
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "penalty rho must be positive, got {rho}"
        )))
    }
}

/// `Φ`: mean over each `ratio x ratio` block of a row-major sub-pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockAverage {
    pub hr_rows: usize,
    pub hr_cols: usize,
    pub ratio: usize,
}

impl BlockAverage {
    pub fn new(hr_rows: usize, hr_cols: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !hr_rows.is_multiple_of(ratio) || !hr_cols.is_multiple_of(ratio) {
            return Err(Error::DimensionMismatch(format!(
                "{hr_rows}x{hr_cols} grid is not a multiple of ratio {ratio}"
            )));
        }
        Ok(BlockAverage {
            hr_rows,
            hr_cols,
            ratio,
        })
    }

    fn lr_cols(&self) -> usize {
        self.hr_cols / self.ratio
    }
}

impl LinearOperator for BlockAverage {
    fn rows(&self) -> usize {
        (self.hr_rows / self.ratio) * self.lr_cols()
    }

    fn cols(&self) -> usize {
        self.hr_rows * self.hr_cols
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let c = self.ratio;
        let m2 = self.lr_cols();
        let mut out = vec![0.0; self.rows()];
        for r in 0..self.hr_rows {
            let row = &x[r * self.hr_cols..][..self.hr_cols];
            let orow = &mut out[(r / c) * m2..][..m2];
            for (o, block) in orow.iter_mut().zip(row.chunks_exact(c)) {
                *o += block.iter().sum::<f64>();
            }
        }
        let inv = 1.0 / (c * c) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let c = self.ratio;
        let m2 = self.lr_cols();
        let inv = 1.0 / (c * c) as f64;
        let mut out = vec![0.0; self.cols()];
        for r in 0..self.hr_rows {
            let yrow = &y[(r / c) * m2..][..m2];
            let orow = &mut out[r * self.hr_cols..][..self.hr_cols];
            for (col, o) in orow.iter_mut().enumerate() {
                *o = yrow[col / c] * inv;
            }
        }
        out
    }

    fn shifted_solver(&self, rho: f64) -> Result<Box<dyn ShiftedSolve + '_>> {
        check_rho(rho)?;
        let c2 = (self.ratio * self.ratio) as f64;
        Ok(Box::new(BlockAverageSolve {
            op: *self,
            rho,
            inner: 1.0 / (rho + 1.0 / c2),
        }))
    }

    fn spectral_norm_sq(&self) -> f64 {
        1.0 / (self.ratio * self.ratio) as f64
    }
}

struct BlockAverageSolve {
    op: BlockAverage,
    rho: f64,
    inner: f64,
}

impl ShiftedSolve for BlockAverageSolve {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        // AᵀA = P/c² with P the block-mean projection, so the inverse splits
        // into P/(ρ + 1/c²) + (I − P)/ρ without cancellation.
        let c2 = (self.op.ratio * self.op.ratio) as f64;
        let proj: Vec<f64> = self
            .op
            .adjoint(&self.op.apply(rhs))
            .into_iter()
            .map(|v| v * c2)
            .collect();
        rhs.iter()
            .zip(&proj)
            .map(|(r, p)| p * self.inner + (r - p) / self.rho)
            .collect()
    }
}

/// An explicit `M x N` matrix, typically `Φ∘H` materialized column by
/// column from the forward model.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        DenseOperator { matrix }
    }

    /// Builds `Φ∘H` by pushing every unit impulse through the forward model.
    pub fn materialize(model: &ForwardModel) -> Result<Self> {
        let (n1, n2) = model.config().high_res_dims();
        let m = model.config().rows * model.config().cols;
        let mut matrix = DMatrix::zeros(m, n1 * n2);
        let mut impulse = crate::grid::Grid::zeros(n1, n2);
        for j in 0..n1 * n2 {
            impulse.as_mut_slice()[j] = 1.0;
            let col = model.apply(&impulse)?;
            impulse.as_mut_slice()[j] = 0.0;
            matrix.set_column(j, &DVector::from_column_slice(col.as_slice()));
        }
        Ok(DenseOperator { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x))
            .as_slice()
            .to_vec()
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.matrix
            .tr_mul(&DVector::from_column_slice(y))
            .as_slice()
            .to_vec()
    }

    fn shifted_solver(&self, rho: f64) -> Result<Box<dyn ShiftedSolve + '_>> {
        check_rho(rho)?;
        let mut gram = &self.matrix * self.matrix.transpose();
        for i in 0..gram.nrows() {
            gram[(i, i)] += rho;
        }
        let chol = gram.cholesky().ok_or_else(|| {
            Error::InvalidParameter("shifted Gram matrix is not positive definite".into())
        })?;
        Ok(Box::new(DenseSolve {
            op: self,
            rho,
            chol,
        }))
    }
}

struct DenseSolve<'a> {
    op: &'a DenseOperator,
    rho: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl ShiftedSolve for DenseSolve<'_> {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let r = DVector::from_column_slice(rhs);
        let inner = self.chol.solve(&(&self.op.matrix * &r));
        let back = self.op.matrix.tr_mul(&inner);
        ((r - back) / self.rho).as_slice().to_vec()
    }
}
