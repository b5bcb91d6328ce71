//! Dense kernels for small symmetric and positive-definite matrices.
//!
//! Every matrix that enters the invariant chain is at most 3×3, so all
//! routines work on dynamically sized `nalgebra` matrices and lean on the
//! symmetric eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Real square matrix. Symmetric unless noted at the call site.
pub type SymMatrix = DMatrix<f64>;
/// Complex square matrix (the `A` operator of the invariant chain).
pub type ComplexMatrix = DMatrix<Complex64>;

/// Eigenvalues at or below this fraction of the spectral norm count as singular.
pub const EIGEN_FLOOR: f64 = 1e-12;

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    Ok(())
}

fn check_same_dim(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Returns `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric positive-definite matrix.
///
/// Fails with `NonPositiveMatrix` when the smallest eigenvalue does not clear
/// `EIGEN_FLOOR` relative to the spectral norm.
#[derive(Debug, Clone)]
pub struct SpdEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl SpdEigen {
    pub fn new(m: &SymMatrix) -> Result<Self> {
        check_square(m)?;
        let eig = SymmetricEigen::new(symmetrize(m));
        let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let norm = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if !(min > EIGEN_FLOOR * norm.max(f64::MIN_POSITIVE)) || !min.is_finite() {
            return Err(Error::NonPositiveMatrix { min_eigenvalue: min });
        }
        Ok(Self {
            values,
            vectors: eig.eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U f(Λ) Uᵀ`
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let u = &self.vectors;
        let mut scaled = u.clone();
        for (j, &lam) in self.values.iter().enumerate() {
            let s = f(lam);
            scaled.column_mut(j).scale_mut(s);
        }
        symmetrize(&(scaled * u.transpose()))
    }

    pub fn pow(&self, p: f64) -> SymMatrix {
        self.map(|l| l.powf(p))
    }

    /// Solves `f(A) X + X f(A) = B` in the eigenbasis of `A`.
    pub fn sylvester_with(&self, f: impl Fn(f64) -> f64, b: &DMatrix<f64>) -> DMatrix<f64> {
        let u = &self.vectors;
        let mut bt = u.transpose() * b * u;
        let mu: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        for i in 0..bt.nrows() {
            for j in 0..bt.ncols() {
                bt[(i, j)] /= mu[i] + mu[j];
            }
        }
        u * bt * u.transpose()
    }
}

/// Solves `A X + X A = B` for symmetric positive-definite `A`.
///
/// `B` may be any square matrix; a symmetric (antisymmetric) `B` yields a
/// symmetric (antisymmetric) `X`.
pub fn sylvester_spd_solve(a: &SymMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(b)?;
    check_same_dim(a.nrows(), b.nrows())?;
    let eig = SpdEigen::new(a)?;
    Ok(eig.sylvester_with(|l| l, b))
}

/// `M^{-1/4}` for symmetric positive-definite `M`.
pub fn inv_quartic_root(m: &SymMatrix) -> Result<SymMatrix> {
    Ok(SpdEigen::new(m)?.pow(-0.25))
}

/// `M^p` for symmetric positive-definite `M`.
pub fn spd_power(m: &SymMatrix, p: f64) -> Result<SymMatrix> {
    Ok(SpdEigen::new(m)?.pow(p))
}

/// Generalized commutator `[X, Y]_Z = X Z Y − Y Z X`.
pub fn gen_commutator(x: &SymMatrix, y: &SymMatrix, z: &ComplexMatrix) -> Result<ComplexMatrix> {
    check_same_dim(x.nrows(), y.nrows())?;
    check_same_dim(x.nrows(), z.nrows())?;
    check_same_dim(z.nrows(), z.ncols())?;
    let xc = to_complex(x);
    let yc = to_complex(y);
    Ok(&xc * z * &yc - &yc * z * &xc)
}

/// Smallest eigenvalue of a symmetric matrix; positive means positive-definite.
pub fn positivity_margin(m: &SymMatrix) -> f64 {
    match m.nrows() {
        0 => f64::INFINITY,
        1 => m[(0, 0)],
        _ => SymmetricEigen::new(symmetrize(m))
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min),
    }
}

pub fn to_complex(m: &DMatrix<f64>) -> ComplexMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

pub fn commutator(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    x * y - y * x
}

pub fn anticommutator(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    x * y + y * x
}

pub fn is_diagonal(m: &DMatrix<f64>, tol: f64) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)].abs() <= tol))
}
