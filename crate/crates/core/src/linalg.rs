//! Small Hermitian matrices (F×F) and the large complex products used by AMP.
//!
//! Everything F×F is stored either as a real diagonal (the matched cell-free
//! model, where every covariance is `diag(g_b) ⊗ I_M`) or as a dense complex
//! matrix. The dense path goes through nalgebra's Cholesky and Hermitian
//! eigendecomposition.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Hermitian positive semi-definite F×F matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Hermitian {
    Diagonal(Vec<f64>),
    Dense(Array2<C64>),
}

impl Hermitian {
    pub fn scaled_identity(dim: usize, value: f64) -> Self {
        Hermitian::Diagonal(vec![value; dim])
    }

    pub fn zeros(dim: usize) -> Self {
        Hermitian::Diagonal(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        match self {
            Hermitian::Diagonal(d) => d.len(),
            Hermitian::Dense(m) => m.nrows(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, Hermitian::Diagonal(_))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Hermitian::Diagonal(d) => d.clone(),
            Hermitian::Dense(m) => m.diag().iter().map(|v| v.re).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn to_dense(&self) -> Array2<C64> {
        match self {
            Hermitian::Diagonal(d) => {
                let mut m = Array2::zeros((d.len(), d.len()));
                for (i, &v) in d.iter().enumerate() {
                    m[[i, i]] = C64::new(v, 0.0);
                }
                m
            }
            Hermitian::Dense(m) => m.clone(),
        }
    }

    pub fn to_dense_hermitian(&self) -> Hermitian {
        Hermitian::Dense(self.to_dense())
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        match self {
            Hermitian::Diagonal(d) if i == j => C64::new(d[i], 0.0),
            Hermitian::Diagonal(_) => C64::new(0.0, 0.0),
            Hermitian::Dense(m) => m[[i, j]],
        }
    }

    pub fn add(&self, other: &Hermitian) -> Hermitian {
        match (self, other) {
            (Hermitian::Diagonal(a), Hermitian::Diagonal(b)) => {
                Hermitian::Diagonal(a.iter().zip(b).map(|(x, y)| x + y).collect())
            }
            _ => Hermitian::Dense(self.to_dense() + other.to_dense()),
        }
    }

    pub fn scale(&self, k: f64) -> Hermitian {
        match self {
            Hermitian::Diagonal(d) => Hermitian::Diagonal(d.iter().map(|v| v * k).collect()),
            Hermitian::Dense(m) => Hermitian::Dense(m.mapv(|v| v * k)),
        }
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Hermitian) -> f64 {
        let a = self.to_dense();
        let b = other.to_dense();
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        match self {
            Hermitian::Diagonal(d) => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Hermitian::Dense(m) => m.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt(),
        }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        match self {
            Hermitian::Diagonal(d) => d.clone(),
            Hermitian::Dense(m) => {
                let eig = SymmetricEigen::new(to_nalgebra(&m.view()));
                eig.eigenvalues.iter().copied().collect()
            }
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Largest deviation from Hermitian symmetry.
    pub fn hermitian_defect(&self) -> f64 {
        match self {
            Hermitian::Diagonal(_) => 0.0,
            Hermitian::Dense(m) => {
                let n = m.nrows();
                let mut worst = 0.0f64;
                for i in 0..n {
                    for j in 0..n {
                        worst = worst.max((m[[i, j]] - m[[j, i]].conj()).norm());
                    }
                }
                worst
            }
        }
    }

    /// Positive-definite factorization; fails when the matrix is singular.
    pub fn factor(&self) -> Result<HermitianFactor> {
        match self {
            Hermitian::Diagonal(d) => {
                if let Some(bad) = d.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                    return Err(Error::Conditioning(format!(
                        "diagonal matrix has non-positive entry {bad}"
                    )));
                }
                Ok(HermitianFactor::Diagonal(d.clone()))
            }
            Hermitian::Dense(m) => {
                let chol = Cholesky::new(to_nalgebra(&m.view())).ok_or_else(|| {
                    Error::Conditioning("matrix is not positive definite".into())
                })?;
                Ok(HermitianFactor::Dense(chol))
            }
        }
    }

    /// Principal square root of a PSD matrix.
    pub fn sqrt(&self) -> Hermitian {
        match self {
            Hermitian::Diagonal(d) => Hermitian::Diagonal(d.iter().map(|v| v.max(0.0).sqrt()).collect()),
            Hermitian::Dense(m) => {
                let eig = SymmetricEigen::new(to_nalgebra(&m.view()));
                let roots = eig.eigenvalues.map(|v| C64::new(v.max(0.0).sqrt(), 0.0));
                let v = &eig.eigenvectors;
                let s = v * DMatrix::from_diagonal(&roots) * v.adjoint();
                Hermitian::Dense(from_nalgebra(&s))
            }
        }
    }

    /// Projects onto `diag(τ_1, …, τ_B) ⊗ I_block` by averaging each diagonal block.
    pub fn block_average(&self, block: usize) -> Hermitian {
        let d = self.diagonal();
        assert!(block > 0 && d.len() % block == 0, "block size must divide dimension");
        let mut out = vec![0.0; d.len()];
        for (chunk_in, chunk_out) in d.chunks(block).zip(out.chunks_mut(block)) {
            let mean = chunk_in.iter().sum::<f64>() / block as f64;
            chunk_out.iter_mut().for_each(|v| *v = mean);
        }
        Hermitian::Diagonal(out)
    }

    /// Row vector times matrix: `r M`.
    pub fn row_mul(&self, r: &[C64]) -> Vec<C64> {
        match self {
            Hermitian::Diagonal(d) => r.iter().zip(d).map(|(x, s)| x * s).collect(),
            Hermitian::Dense(m) => row_mul_dense(r, &m.view()),
        }
    }
}

pub(crate) fn row_mul_dense(r: &[C64], m: &ArrayView2<C64>) -> Vec<C64> {
    let n = m.ncols();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for (i, ri) in r.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += ri * m[[i, j]];
        }
    }
    out
}

/// Positive-definite factor of a [`Hermitian`] matrix.
#[derive(Debug, Clone)]
pub enum HermitianFactor {
    Diagonal(Vec<f64>),
    Dense(Cholesky<C64, nalgebra::Dyn>),
}

impl HermitianFactor {
    pub fn log_det(&self) -> f64 {
        match self {
            HermitianFactor::Diagonal(d) => d.iter().map(|v| v.ln()).sum(),
            HermitianFactor::Dense(c) => 2.0 * c.l_dirty().diagonal().iter().map(|v| v.re.ln()).sum::<f64>(),
        }
    }

    pub fn inverse(&self) -> Hermitian {
        match self {
            HermitianFactor::Diagonal(d) => Hermitian::Diagonal(d.iter().map(|v| 1.0 / v).collect()),
            HermitianFactor::Dense(c) => Hermitian::Dense(from_nalgebra(&c.inverse())),
        }
    }

    /// Solves `X M = B` for `X` where `M` is the factored matrix (right division).
    pub fn solve_right(&self, b: &Array2<C64>) -> Array2<C64> {
        match self {
            HermitianFactor::Diagonal(d) => {
                let mut x = b.clone();
                for mut row in x.axis_iter_mut(Axis(0)) {
                    for (v, s) in row.iter_mut().zip(d) {
                        *v /= s;
                    }
                }
                x
            }
            HermitianFactor::Dense(c) => {
                // X M = B  <=>  M X^H = B^H (M Hermitian)
                let bh = to_nalgebra(&b.view()).adjoint();
                let xh = c.solve(&bh);
                from_nalgebra(&xh.adjoint())
            }
        }
    }
}

pub fn to_nalgebra(m: &ArrayView2<C64>) -> DMatrix<C64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub fn from_nalgebra(m: &DMatrix<C64>) -> Array2<C64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// `S^H Z` for a tall-and-wide `S` (L×N) and thin `Z` (L×F).
pub fn adjoint_mul(s: &ArrayView2<C64>, z: &ArrayView2<C64>) -> Array2<C64> {
    // (Z^H S)^H: keeps the long dimension of S contiguous in the product
    let zh = z.t().mapv(|v| v.conj());
    let prod = zh.dot(s);
    prod.t().mapv(|v| v.conj())
}

/// `(1/n) A^H A` for an n×F matrix.
pub fn gram_mean(a: &ArrayView2<C64>) -> Array2<C64> {
    let n = a.nrows().max(1) as f64;
    let ah = a.t().mapv(|v| v.conj());
    ah.dot(a).mapv(|v| v / n)
}
