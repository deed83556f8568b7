//! Dense complex linear algebra used by the Gaussian-state code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
pub const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Largest condition number accepted for Σ_Q before solves are refused.
pub const MAX_CONDITION: f64 = 1e12;

#[inline]
pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[inline]
pub fn cis(theta: f64) -> Complex64 {
    Complex64::from_polar(1.0, theta)
}

/// Block swap `[[0, I], [I, 0]]` of size `2d`.
pub fn swap_matrix(d: usize) -> CMatrix {
    let mut x = CMatrix::zeros(2 * d, 2 * d);
    for j in 0..d {
        x[(j, j + d)] = ONE;
        x[(j + d, j)] = ONE;
    }
    x
}

/// Left-multiplies by the block swap without forming it.
pub fn swap_rows(m: &CMatrix) -> CMatrix {
    let n = m.nrows();
    let d = n / 2;
    CMatrix::from_fn(n, m.ncols(), |i, j| {
        let src = if i < d { i + d } else { i - d };
        m[(src, j)]
    })
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// Largest entrywise deviation from Hermiticity.
pub fn hermitian_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Largest entrywise deviation from symmetry.
pub fn symmetric_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).norm());
        }
    }
    worst
}

/// Averages `m` with its adjoint.
pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = hermitian_part(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, col| eig.eigenvectors[(r, order[col])]);
    (values, vectors)
}

pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    hermitian_eigen(m).0
}

/// Principal square root of a Hermitian positive semi-definite matrix.
/// Eigenvalues within round-off of zero are clamped.
pub fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let (values, vectors) = hermitian_eigen(m);
    let n = values.len();
    let root = CMatrix::from_fn(n, n, |i, j| {
        if i == j {
            c(values[i].max(0.0).sqrt(), 0.0)
        } else {
            ZERO
        }
    });
    &vectors * root * vectors.adjoint()
}

/// Largest singular value.
pub fn spectral_norm(m: &CMatrix) -> f64 {
    let gram = if m.nrows() <= m.ncols() {
        m * m.adjoint()
    } else {
        m.adjoint() * m
    };
    hermitian_eigenvalues(&gram)
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(0.0)
        .sqrt()
}

/// General inverse via LU, refusing numerically singular input.
pub fn inverse(m: &CMatrix, what: &str) -> Result<CMatrix> {
    let n = m.nrows();
    if n == 0 {
        return Ok(CMatrix::zeros(0, 0));
    }
    let inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned {
            message: format!("{what} is singular"),
            condition: f64::INFINITY,
        })?;
    let cond = max_abs(m) * max_abs(&inv) * n as f64;
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::IllConditioned {
            message: format!("{what} is too ill-conditioned to invert"),
            condition: cond,
        });
    }
    Ok(inv)
}

/// Cholesky factorisation of a Hermitian positive-definite matrix together
/// with its spectral condition number.
#[derive(Clone)]
pub struct HermitianFactor {
    chol: Cholesky<Complex64, Dyn>,
    min_eigenvalue: f64,
    condition: f64,
}

impl std::fmt::Debug for HermitianFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HermitianFactor")
            .field("min_eigenvalue", &self.min_eigenvalue)
            .field("condition", &self.condition)
            .finish()
    }
}

impl HermitianFactor {
    /// Factorises `m`, which must be Hermitian to `tol` (entrywise) and
    /// positive definite with condition number at most [`MAX_CONDITION`].
    pub fn new(m: &CMatrix, what: &str, tol: f64) -> Result<Self> {
        let defect = hermitian_defect(m);
        if defect > tol {
            return Err(Error::unphysical(format!(
                "{what} is not Hermitian (defect {defect:.3e})"
            )));
        }
        let h = hermitian_part(m);
        let values = hermitian_eigenvalues(&h);
        let (lo, hi) = match (values.first(), values.last()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => (1.0, 1.0),
        };
        if lo <= 0.0 {
            return Err(Error::unphysical(format!(
                "{what} is not positive definite (smallest eigenvalue {lo:.3e})"
            )));
        }
        let condition = hi / lo;
        if condition > MAX_CONDITION {
            return Err(Error::IllConditioned {
                message: format!("{what} is too ill-conditioned"),
                condition,
            });
        }
        let chol = Cholesky::new(h).ok_or_else(|| {
            Error::unphysical(format!("{what} failed Cholesky factorisation"))
        })?;
        Ok(Self {
            chol,
            min_eigenvalue: lo,
            condition,
        })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn inverse(&self) -> CMatrix {
        hermitian_part(&self.chol.inverse())
    }

    /// Natural log of the (real, positive) determinant.
    pub fn ln_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        (0..l.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum()
    }

    pub fn solve(&self, b: &CVector) -> CVector {
        self.chol.solve(b)
    }
}
