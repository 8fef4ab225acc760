//! Minimal dense linear algebra shared by every other module.
//!
//! Everything here is dense and double precision: the largest explicit object
//! in the crate is 120×31, so there is no reason to be clever about storage.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Dense row-major real matrix used for score bases, loss matrices and
/// projectors throughout the crate.
pub type DenseMatrix = DMatrix<f64>;

/// Dense real vector.
pub type DenseVector = DVector<f64>;

/// Orthogonal projector onto the column span of a basis matrix, stored as the
/// basis `F` together with the pseudo-inverse of its Gram matrix so that
/// `P x = F (FᵀF)⁺ Fᵀ x` never materializes the k×k projector unless asked.
#[derive(Debug, Clone)]
pub struct Projector {
    pub basis: DenseMatrix,
    pub gram_pinv: DenseMatrix,
}

/// Moore–Penrose pseudo-inverse of `AᵀA`, computed from a symmetric
/// eigendecomposition of the Gram matrix.  Eigenvalues below `1e-12` times
/// the largest one are treated as exact zeros, so rank-deficient bases (for
/// example redundant score columns) are handled without blow-up.
pub fn gram_pseudoinverse(a: &DenseMatrix) -> DenseMatrix {
    let gram = a.transpose() * a;
    symmetric_pseudoinverse(&gram)
}

/// Pseudo-inverse of a symmetric PSD matrix with relative cutoff `1e-12`.
pub fn symmetric_pseudoinverse(s: &DenseMatrix) -> DenseMatrix {
    let n = s.nrows();
    let eig = s.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let cutoff = 1e-12 * max_ev;
    let mut inv_vals = DVector::zeros(n);
    for i in 0..n {
        let v = eig.eigenvalues[i];
        inv_vals[i] = if v.abs() > cutoff && v > 0.0 { 1.0 / v } else { 0.0 };
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
}

impl Projector {
    /// Build the projector onto `span(basis)`.
    pub fn from_basis(basis: DenseMatrix) -> Self {
        let gram_pinv = gram_pseudoinverse(&basis);
        Projector { basis, gram_pinv }
    }

    /// Number of ambient dimensions (rows of the basis).
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Apply the projector: returns `P x = F (FᵀF)⁺ Fᵀ x`.
    pub fn apply(&self, x: &DenseVector) -> Result<DenseVector> {
        if x.len() != self.basis.nrows() {
            return Err(Error::Dimension(format!(
                "projector expects length {}, got {}",
                self.basis.nrows(),
                x.len()
            )));
        }
        let coords = &self.gram_pinv * (self.basis.transpose() * x);
        Ok(&self.basis * coords)
    }

    /// Apply the projector to every column of a matrix.
    pub fn apply_matrix(&self, m: &DenseMatrix) -> Result<DenseMatrix> {
        if m.nrows() != self.basis.nrows() {
            return Err(Error::Dimension(format!(
                "projector expects {} rows, got {}",
                self.basis.nrows(),
                m.nrows()
            )));
        }
        let coords = &self.gram_pinv * (self.basis.transpose() * m);
        Ok(&self.basis * coords)
    }

    /// Materialize the k×k projector matrix (test and diagnostic use).
    pub fn to_matrix(&self) -> DenseMatrix {
        &self.basis * &self.gram_pinv * self.basis.transpose()
    }
}

/// Apply a projector stored as (basis, gram_pinv) to a vector.
pub fn project(p: &Projector, x: &DenseVector) -> Result<DenseVector> {
    p.apply(x)
}
