//! Dense symmetric-matrix primitives.
//!
//! Everything here works on small dense matrices (a handful of regression
//! coefficients), so the Sylvester solve uses the explicit Kronecker-sum
//! system rather than a Schur-based method.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Numerical tolerances shared by the linear-algebra routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Maximum relative asymmetry accepted by [`SymMatrix::new`].
    pub symmetry: f64,
    /// Eigenvalues in `[-psd_clamp * ||M||, 0)` are clamped to zero.
    pub psd_clamp: f64,
    /// LU pivots below this magnitude mark a matrix as singular.
    pub singular_pivot: f64,
    /// Smallest eigenvalue of a square root (relative to the largest) for
    /// which the Sylvester system is still considered invertible.
    pub sylvester_min_eig: f64,
}

pub const TOLERANCES: Tolerances = Tolerances {
    symmetry: 1e-12,
    psd_clamp: 1e-10,
    singular_pivot: 1e-300,
    sylvester_min_eig: 1e-13,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is indefinite (eigenvalue {0:e} below the clamp band)")]
    IndefiniteMatrix(f64),
    #[error("Sylvester system is singular: square root has a zero eigenvalue")]
    SingularSylvester,
    #[error("matrix is singular")]
    SingularMatrix,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// A dense symmetric matrix. Construction symmetrizes exactly, so the
/// stored entries satisfy `a[(i, j)] == a[(j, i)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax() / scale;
        if asym > TOLERANCES.symmetry {
            return Err(LinalgError::NotSymmetric(asym));
        }
        Ok(Self::symmetrized(m))
    }

    /// Wraps `(m + mᵀ) / 2` without checking the asymmetry.
    pub fn symmetrized(m: Matrix) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn identity(p: usize) -> Self {
        SymMatrix(Matrix::identity(p, p))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(Matrix::from_diagonal(&Vector::from_column_slice(d)))
    }

    pub fn zeros(p: usize) -> Self {
        SymMatrix(Matrix::zeros(p, p))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Principal sub-block at `idx` (rows and columns).
    pub fn submatrix(&self, idx: &[usize]) -> SymMatrix {
        let r = idx.len();
        SymMatrix(Matrix::from_fn(r, r, |i, j| self.0[(idx[i], idx[j])]))
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }

    pub fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        SymmetricEigen::new(self.0.clone())
    }

    /// Inverse via Cholesky; fails when the matrix is not positive definite.
    pub fn inverse_spd(&self) -> Result<SymMatrix, LinalgError> {
        let chol = self.0.clone().cholesky().ok_or(LinalgError::SingularMatrix)?;
        Ok(SymMatrix::symmetrized(chol.inverse()))
    }

    /// Lower Cholesky factor.
    pub fn cholesky_lower(&self) -> Result<Matrix, LinalgError> {
        self.0
            .clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or(LinalgError::SingularMatrix)
    }
}

/// Spectral square root together with the eigendecomposition it came from.
#[derive(Debug, Clone)]
pub struct SpdRoot {
    pub sqrt: SymMatrix,
    pub eigenvalues: Vector,
    pub eigenvectors: Matrix,
}

impl SpdRoot {
    pub fn compute(m: &SymMatrix) -> Result<Self, LinalgError> {
        let eig = m.eigen();
        let norm = eig.eigenvalues.amax();
        let band = TOLERANCES.psd_clamp * norm;
        let mut lambda = eig.eigenvalues.clone();
        for l in lambda.iter_mut() {
            if *l < -band {
                return Err(LinalgError::IndefiniteMatrix(*l));
            }
            if *l < 0.0 {
                *l = 0.0;
            }
        }
        let q = eig.eigenvectors;
        let roots = lambda.map(f64::sqrt);
        let s = &q * Matrix::from_diagonal(&roots) * q.transpose();
        Ok(SpdRoot {
            sqrt: SymMatrix::symmetrized(s),
            eigenvalues: lambda,
            eigenvectors: q,
        })
    }

    /// `M^{-1/2}`; fails if any eigenvalue is zero.
    pub fn inv_sqrt(&self) -> Result<SymMatrix, LinalgError> {
        let max = self.eigenvalues.amax();
        if self.eigenvalues.min() <= TOLERANCES.sylvester_min_eig * max {
            return Err(LinalgError::SingularMatrix);
        }
        let inv = self.eigenvalues.map(|l| 1.0 / l.sqrt());
        let q = &self.eigenvectors;
        Ok(SymMatrix::symmetrized(
            q * Matrix::from_diagonal(&inv) * q.transpose(),
        ))
    }
}

/// Symmetric PSD square root by spectral decomposition.
pub fn spd_sqrt(m: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    SpdRoot::compute(m).map(|r| r.sqrt)
}

/// Factorized Kronecker-sum system `(S ⊗ I + I ⊗ S)` for repeated
/// derivative-of-square-root solves against the same root `S`.
pub struct SylvesterSolver {
    p: usize,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl SylvesterSolver {
    pub fn new(s: &SymMatrix) -> Result<Self, LinalgError> {
        let eig = nalgebra::SymmetricEigen::new(s.as_matrix().clone()).eigenvalues;
        Self::with_eigenvalues(s, &eig)
    }

    /// Solver for the root held by `root`, reusing its spectrum.
    pub fn from_root(root: &SpdRoot) -> Result<Self, LinalgError> {
        Self::with_eigenvalues(&root.sqrt, &root.eigenvalues.map(f64::sqrt))
    }

    fn with_eigenvalues(s: &SymMatrix, eig: &Vector) -> Result<Self, LinalgError> {
        let p = s.dim();
        let max = eig.amax();
        if max == 0.0 || eig.min() <= TOLERANCES.sylvester_min_eig * max {
            return Err(LinalgError::SingularSylvester);
        }
        let id = Matrix::identity(p, p);
        let k = s.as_matrix().kronecker(&id) + id.kronecker(s.as_matrix());
        Ok(SylvesterSolver { p, lu: k.lu() })
    }

    /// Solves `S·dS + dS·S = dM` for `dS`.
    pub fn solve(&self, dm: &SymMatrix) -> Result<SymMatrix, LinalgError> {
        if dm.dim() != self.p {
            return Err(LinalgError::DimensionMismatch(format!(
                "derivative is {0}x{0}, root is {1}x{1}",
                dm.dim(),
                self.p
            )));
        }
        // nalgebra storage is column-major, which is exactly vec(·).
        let rhs = Vector::from_column_slice(dm.as_matrix().as_slice());
        let sol = self.lu.solve(&rhs).ok_or(LinalgError::SingularSylvester)?;
        let ds = Matrix::from_column_slice(self.p, self.p, sol.as_slice());
        Ok(SymMatrix::symmetrized(ds))
    }
}

/// Directional derivative of the square root: solves
/// `vec(dS) = (S ⊗ I + I ⊗ S)⁻¹ vec(dM)`.
pub fn sqrt_derivative(s: &SymMatrix, dm: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    SylvesterSolver::new(s)?.solve(dm)
}

/// `log |det M|` by partial-pivoting LU.
pub fn logdet_abs(m: &Matrix) -> Result<f64, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "determinant of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)].abs();
        if !(d >= TOLERANCES.singular_pivot) {
            return Err(LinalgError::SingularMatrix);
        }
        acc += d.ln();
    }
    Ok(acc)
}
