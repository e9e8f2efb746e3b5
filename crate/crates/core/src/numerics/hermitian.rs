pub use nalgebra::Complex;
use nalgebra::{DMatrix, DVector};

use super::NumericsError;

pub type C64 = Complex<f64>;

/// Hermitian matrix wrapper. Construction symmetrizes and rejects non-finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix {
    data: DMatrix<C64>,
}

/// Eigenvalues in ascending order with matching orthonormal eigenvector columns.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<C64>,
}

impl HermitianMatrix {
    /// Accepts a square matrix whose deviation from Hermitian is at most 1e-9 of its norm.
    pub fn new(m: DMatrix<C64>) -> Result<Self, NumericsError> {
        if m.nrows() != m.ncols() {
            return Err(NumericsError::InvalidInput(format!("matrix is {}x{}, not square", m.nrows(), m.ncols())));
        }
        if m.nrows() == 0 {
            return Err(NumericsError::InvalidInput("empty matrix".into()));
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(NumericsError::InvalidInput("non-finite entry".into()));
        }
        let skew = (&m - m.adjoint()).norm();
        if skew > 1e-9 * (1.0 + m.norm()) {
            return Err(NumericsError::InvalidInput(format!("matrix is not Hermitian (skew {skew:e})")));
        }
        Ok(Self::from_unchecked(m))
    }

    /// Symmetrizes without validation; callers guarantee finiteness.
    pub(crate) fn from_unchecked(m: DMatrix<C64>) -> Self {
        let data = (&m + m.adjoint()).scale(0.5);
        Self { data }
    }

    pub fn identity(dim: usize) -> Self {
        Self { data: DMatrix::identity(dim, dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: DMatrix::zeros(dim, dim) }
    }

    /// `scale * v v^H`
    pub fn outer(v: &DVector<C64>, scale: f64) -> Self {
        Self { data: (v * v.adjoint()).scale(scale) }
    }

    pub fn from_real_diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut data = DMatrix::zeros(n, n);
        for (i, &x) in d.iter().enumerate() {
            data[(i, i)] = C64::new(x, 0.0);
        }
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<C64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.diagonal().iter().map(|z| z.re).sum()
    }

    /// `Re tr(self * other)`, exact for Hermitian pairs.
    pub fn inner(&self, other: &HermitianMatrix) -> f64 {
        self.data.iter().zip(other.data.transpose().iter()).map(|(a, b)| a.re * b.re - a.im * b.im).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { data: self.data.scale(s) }
    }

    pub fn add(&self, other: &HermitianMatrix) -> Self {
        Self { data: &self.data + &other.data }
    }

    pub fn sub(&self, other: &HermitianMatrix) -> Self {
        Self { data: &self.data - &other.data }
    }

    /// `v^H A v`, real for Hermitian `A`.
    pub fn quadratic_form(&self, v: &DVector<C64>) -> f64 {
        v.dotc(&(&self.data * v)).re
    }

    pub fn min_eigenvalue(&self) -> Result<f64, NumericsError> {
        Ok(eig_hermitian(self)?.values[0])
    }
}

/// Eigendecomposition `A = Q diag(values) Q^H`.
pub fn eig_hermitian(a: &HermitianMatrix) -> Result<HermitianEigen, NumericsError> {
    if a.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(NumericsError::InvalidInput("non-finite entry".into()));
    }
    let n = a.dim();
    if n == 1 {
        return Ok(HermitianEigen { values: vec![a.data[(0, 0)].re], vectors: DMatrix::identity(1, 1) });
    }
    let eig = a.data.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(HermitianEigen { values, vectors })
}

impl HermitianEigen {
    pub fn reconstruct(&self) -> HermitianMatrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for c in 0..n {
            let s = self.values[c];
            scaled.column_mut(c).scale_mut(s);
        }
        HermitianMatrix::from_unchecked(scaled * self.vectors.adjoint())
    }
}
