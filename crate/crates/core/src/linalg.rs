//! Symmetric tridiagonal storage and factorizations.

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};

/// Symmetric tridiagonal matrix stored by its diagonal and first
/// off-diagonal, so symmetry holds structurally.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiag {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl SymTridiag {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Result<Self> {
        if diag.is_empty() || off.len() + 1 != diag.len() {
            return Err(Error::InvalidArgument(format!(
                "tridiagonal shape mismatch: diag {} off {}",
                diag.len(),
                off.len()
            )));
        }
        Ok(Self { diag, off })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn off(&self) -> &[f64] {
        &self.off
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, s: f64, other: &SymTridiag) -> Result<SymTridiag> {
        check_dim("tridiagonal sum", other.dim(), self.dim())?;
        SymTridiag::new(
            self.diag
                .iter()
                .zip(&other.diag)
                .map(|(a, b)| a + s * b)
                .collect(),
            self.off
                .iter()
                .zip(&other.off)
                .map(|(a, b)| a + s * b)
                .collect(),
        )
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        let n = self.diag.len();
        debug_assert_eq!(x.len(), n);
        debug_assert_eq!(y.len(), n);
        for i in 0..n {
            let mut s = self.diag[i] * x[i];
            if i > 0 {
                s += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                s += self.off[i] * x[i + 1];
            }
            y[i] = s;
        }
    }

    /// `xᵀ T y` without allocating.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let n = self.diag.len();
        let mut s = 0.0;
        for i in 0..n {
            s += self.diag[i] * x[i] * y[i];
        }
        for i in 0..n - 1 {
            s += self.off[i] * (x[i] * y[i + 1] + x[i + 1] * y[i]);
        }
        s
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n {
                m[(i, i + 1)] = self.off[i];
                m[(i + 1, i)] = self.off[i];
            }
        }
        m
    }

    /// LDLᵀ factorization; fails unless the matrix is positive definite.
    pub fn factor(&self) -> Result<TridiagFactor> {
        let n = self.dim();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        d[0] = self.diag[0];
        for i in 0..n - 1 {
            if !(d[i] > 0.0) {
                return Err(Error::NumericFailure(format!(
                    "non-positive pivot {} at row {i}",
                    d[i]
                )));
            }
            l[i] = self.off[i] / d[i];
            d[i + 1] = self.diag[i + 1] - l[i] * self.off[i];
        }
        if !(d[n - 1] > 0.0) {
            return Err(Error::NumericFailure(format!(
                "non-positive pivot {} at row {}",
                d[n - 1],
                n - 1
            )));
        }
        Ok(TridiagFactor { d, l })
    }

    /// Cholesky factor `L` (lower bidiagonal) with `T = L Lᵀ`.
    pub fn cholesky_bidiagonal(&self) -> Result<Bidiagonal> {
        let f = self.factor()?;
        let diag: Vec<f64> = f.d.iter().map(|d| d.sqrt()).collect();
        let sub: Vec<f64> = f.l.iter().zip(&diag).map(|(l, s)| l * s).collect();
        Ok(Bidiagonal { diag, sub })
    }
}

/// `T = L D Lᵀ` with unit lower bidiagonal `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagFactor {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl TridiagFactor {
    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.d.len();
        debug_assert_eq!(b.len(), n);
        for i in 1..n {
            b[i] -= self.l[i - 1] * b[i - 1];
        }
        for i in 0..n {
            b[i] /= self.d[i];
        }
        for i in (0..n - 1).rev() {
            b[i] -= self.l[i] * b[i + 1];
        }
    }
}

/// Lower bidiagonal Cholesky factor.
#[derive(Debug, Clone)]
pub struct Bidiagonal {
    diag: Vec<f64>,
    sub: Vec<f64>,
}

impl Bidiagonal {
    /// Solves `L x = b` in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        for i in 0..b.len() {
            if i > 0 {
                b[i] -= self.sub[i - 1] * b[i - 1];
            }
            b[i] /= self.diag[i];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper(&self, b: &mut [f64]) {
        let n = b.len();
        for i in (0..n).rev() {
            if i + 1 < n {
                b[i] -= self.sub[i] * b[i + 1];
            }
            b[i] /= self.diag[i];
        }
    }
}
