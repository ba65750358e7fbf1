//! Piecewise-linear finite elements on the unit interval with homogeneous
//! Dirichlet conditions.
//!
//! Degrees of freedom are the nodal values at the interior nodes
//! `x_i = i h`, `i = 1..n_cells-1`. The mass matrix `M` and stiffness matrix
//! `A` are symmetric tridiagonal; the discrete Laplacian is the map
//! `u -> w` with `M w = -A u`.

use std::ops::{Deref, DerefMut};
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{SymTridiag, TridiagFactor};
use crate::quadrature::gauss_legendre;

/// Default number of Gauss points per cell for load vectors.
pub const DEFAULT_QUADRATURE: usize = 4;

/// Uniform mesh of (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1D {
    n_cells: usize,
    h: f64,
}

impl Mesh1D {
    pub fn new(n_cells: usize) -> Result<Self> {
        if n_cells < 2 {
            return invalid(format!("mesh needs at least 2 cells, got {n_cells}"));
        }
        Ok(Self {
            n_cells,
            h: 1.0 / n_cells as f64,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Number of interior nodes, i.e. the dimension of V_h.
    pub fn dim(&self) -> usize {
        self.n_cells - 1
    }

    /// Coordinate of interior node `i` (0-based over interior nodes).
    pub fn node(&self, i: usize) -> f64 {
        (i + 1) as f64 / self.n_cells as f64
    }

    pub fn interior_nodes(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.node(i)).collect()
    }
}

/// Shorthand for [`Mesh1D::new`].
pub fn build_mesh(n_cells: usize) -> Result<Mesh1D> {
    Mesh1D::new(n_cells)
}

/// Element of V_h stored by its interior nodal values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridFunction(pub Vec<f64>);

impl GridFunction {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for GridFunction {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for GridFunction {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for GridFunction {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Generalized eigenpairs of the pencil (A, M).
///
/// Eigenvectors are M-orthonormal and stored row-wise: `vector(k)` is the
/// k-th mode. `mass_vectors` caches `M v_k` so modal coefficients of `u`
/// are plain dot products.
#[derive(Debug, Clone)]
pub struct SpectralDecomp {
    n: usize,
    eigenvalues: Vec<f64>,
    vectors: Vec<f64>,
    mass_vectors: Vec<f64>,
    max_residual: f64,
    max_orthogonality_defect: f64,
}

impl SpectralDecomp {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.n..(k + 1) * self.n]
    }

    pub fn mass_vector(&self, k: usize) -> &[f64] {
        &self.mass_vectors[k * self.n..(k + 1) * self.n]
    }

    /// Largest `‖A v_k − λ_k M v_k‖_∞ / λ_k` seen during construction.
    pub fn max_relative_residual(&self) -> f64 {
        self.max_residual
    }

    /// Largest `|v_iᵀ M v_j − δ_ij|` seen during construction.
    pub fn max_orthogonality_defect(&self) -> f64 {
        self.max_orthogonality_defect
    }

    /// Modal coefficients `c_k = v_kᵀ M u`.
    pub fn to_modal(&self, u: &[f64], out: &mut [f64]) {
        for (k, c) in out.iter_mut().enumerate() {
            *c = dot(self.mass_vector(k), u);
        }
    }

    /// Synthesis `Σ_k c_k v_k`.
    pub fn from_modal(&self, coeffs: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (k, &c) in coeffs.iter().enumerate() {
            if c != 0.0 {
                axpy(c, self.vector(k), out);
            }
        }
    }
}

/// Assembled P1 system on a uniform mesh.
#[derive(Debug)]
pub struct FemSystem {
    mesh: Mesh1D,
    mass: SymTridiag,
    stiffness: SymTridiag,
    mass_factor: TridiagFactor,
    spectral: OnceLock<std::result::Result<SpectralDecomp, Error>>,
}

impl Clone for FemSystem {
    fn clone(&self) -> Self {
        Self {
            mesh: self.mesh.clone(),
            mass: self.mass.clone(),
            stiffness: self.stiffness.clone(),
            mass_factor: self.mass_factor.clone(),
            spectral: OnceLock::new(),
        }
    }
}

impl FemSystem {
    /// Assembles mass and stiffness matrices from hat-function integrals.
    pub fn assemble(mesh: &Mesh1D) -> Result<Self> {
        let n = mesh.dim();
        let h = mesh.h();
        let mass = SymTridiag::new(vec![4.0 * h / 6.0; n], vec![h / 6.0; n.saturating_sub(1)])?;
        let stiffness = SymTridiag::new(vec![2.0 / h; n], vec![-1.0 / h; n.saturating_sub(1)])?;
        let mass_factor = mass.factor()?;
        Ok(Self {
            mesh: mesh.clone(),
            mass,
            stiffness,
            mass_factor,
            spectral: OnceLock::new(),
        })
    }

    /// Convenience: mesh with `n_cells` cells, assembled.
    pub fn uniform(n_cells: usize) -> Result<Self> {
        Self::assemble(&Mesh1D::new(n_cells)?)
    }

    pub fn mesh(&self) -> &Mesh1D {
        &self.mesh
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn mass(&self) -> &SymTridiag {
        &self.mass
    }

    pub fn stiffness(&self) -> &SymTridiag {
        &self.stiffness
    }

    pub fn mass_factor(&self) -> &TridiagFactor {
        &self.mass_factor
    }

    /// Factorization of `M + τ A`, SPD for every `τ > 0`.
    pub fn implicit_factor(&self, tau: f64) -> Result<TridiagFactor> {
        if !(tau > 0.0 && tau.is_finite()) {
            return invalid(format!("time step must be positive, got {tau}"));
        }
        self.mass.add_scaled(tau, &self.stiffness)?.factor()
    }

    /// `uᵀ M w`.
    pub fn mass_inner(&self, u: &[f64], w: &[f64]) -> f64 {
        self.mass.bilinear(u, w)
    }

    /// `uᵀ A w`.
    pub fn stiffness_inner(&self, u: &[f64], w: &[f64]) -> f64 {
        self.stiffness.bilinear(u, w)
    }

    /// Load vector `b_i = ∫ g φ_i` by composite Gauss quadrature.
    pub fn load_vector<F: Fn(f64) -> f64>(
        &self,
        g: F,
        quadrature_order: usize,
    ) -> Result<Vec<f64>> {
        if quadrature_order < 1 {
            return invalid("quadrature order must be at least 1");
        }
        let (pts, wts) = gauss_legendre(quadrature_order);
        let n = self.dim();
        let h = self.mesh.h();
        let mut b = vec![0.0; n];
        for c in 0..self.mesh.n_cells() {
            let x0 = c as f64 * h;
            let mut left = 0.0;
            let mut right = 0.0;
            for (&s, &w) in pts.iter().zip(&wts) {
                // s in (-1, 1) mapped to (x0, x0 + h); endpoints never hit.
                let t = 0.5 * (s + 1.0);
                let gx = g(x0 + t * h) * w * 0.5 * h;
                left += gx * (1.0 - t);
                right += gx * t;
            }
            if c >= 1 {
                b[c - 1] += left;
            }
            if c + 1 <= n {
                b[c] += right;
            }
        }
        Ok(b)
    }

    /// L2 projection `Q_h g`: solves `M c = b`.
    pub fn l2_project<F: Fn(f64) -> f64>(
        &self,
        g: F,
        quadrature_order: usize,
    ) -> Result<GridFunction> {
        let mut b = self.load_vector(g, quadrature_order)?;
        self.mass_factor.solve_in_place(&mut b);
        Ok(GridFunction(b))
    }

    /// Nodal interpolant of `g` at the interior nodes.
    pub fn interpolate<F: Fn(f64) -> f64>(&self, g: F) -> GridFunction {
        GridFunction((0..self.dim()).map(|i| g(self.mesh.node(i))).collect())
    }

    /// `Δ_h u`, i.e. the `w` with `M w = −A u`.
    pub fn apply_discrete_laplacian(&self, u: &[f64]) -> Result<GridFunction> {
        check_dim("discrete laplacian input", u.len(), self.dim())?;
        let mut w = vec![0.0; u.len()];
        self.stiffness.mul_vec(u, &mut w);
        w.iter_mut().for_each(|x| *x = -*x);
        self.mass_factor.solve_in_place(&mut w);
        Ok(GridFunction(w))
    }

    /// Generalized eigendecomposition of (A, M), computed once and cached.
    pub fn spectral(&self) -> Result<&SpectralDecomp> {
        self.spectral
            .get_or_init(|| compute_spectral(self))
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Discrete fractional norm `‖(−Δ_h)^{γ/2} u‖_H` for γ ∈ {−2, −1, 0, 1, 2}.
    pub fn norm(&self, u: &[f64], gamma: i32) -> Result<f64> {
        check_dim("norm input", u.len(), self.dim())?;
        match gamma {
            0 => Ok(self.mass_inner(u, u).max(0.0).sqrt()),
            1 => Ok(self.stiffness_inner(u, u).max(0.0).sqrt()),
            -2 | -1 | 2 => {
                let sp = self.spectral()?;
                let g = gamma as f64;
                let s: f64 = (0..sp.dim())
                    .map(|k| {
                        let c = dot(sp.mass_vector(k), u);
                        sp.eigenvalues()[k].powf(g) * c * c
                    })
                    .sum();
                Ok(s.sqrt())
            }
            _ => invalid(format!("unsupported norm exponent {gamma}")),
        }
    }
}

/// Closed-form generalized eigenvalues of the uniform P1 pencil.
pub fn closed_form_eigenvalue(h: f64, k: usize) -> f64 {
    let c = (k as f64 * std::f64::consts::PI * h).cos();
    6.0 / (h * h) * (1.0 - c) / (2.0 + c)
}

fn compute_spectral(fem: &FemSystem) -> Result<SpectralDecomp> {
    let n = fem.dim();
    // Cholesky M = L Lᵀ, L lower bidiagonal.
    let chol = fem.mass.cholesky_bidiagonal()?;
    let a = fem.stiffness.to_dense();
    // C = L⁻¹ A L⁻ᵀ, built column by column with bidiagonal solves.
    let mut linv_a = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut col: Vec<f64> = (0..n).map(|i| a[(i, j)]).collect();
        chol.solve_lower(&mut col);
        for i in 0..n {
            linv_a[(i, j)] = col[i];
        }
    }
    let mut c = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).map(|j| linv_a[(i, j)]).collect();
        chol.solve_lower(&mut row);
        for j in 0..n {
            c[(i, j)] = row[j];
        }
    }
    let c = 0.5 * (&c + c.transpose());
    let eig = SymmetricEigen::try_new(c, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::NumericFailure("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut eigenvalues = Vec::with_capacity(n);
    let mut vectors = vec![0.0; n * n];
    let mut mass_vectors = vec![0.0; n * n];
    for (k, &idx) in order.iter().enumerate() {
        let mut v: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, idx)]).collect();
        chol.solve_upper(&mut v);
        // Fix sign so the first nonzero entry is positive.
        if let Some(&first) = v.iter().find(|x| x.abs() > 1e-14) {
            if first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        let nrm = fem.mass.bilinear(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= nrm);
        let mut mv = vec![0.0; n];
        fem.mass.mul_vec(&v, &mut mv);
        vectors[k * n..(k + 1) * n].copy_from_slice(&v);
        mass_vectors[k * n..(k + 1) * n].copy_from_slice(&mv);
        eigenvalues.push(eig.eigenvalues[idx]);
    }

    let mut max_residual: f64 = 0.0;
    let mut av = vec![0.0; n];
    for k in 0..n {
        let lam = eigenvalues[k];
        if lam <= 0.0 {
            return Err(Error::NumericFailure(format!(
                "non-positive eigenvalue {lam} at index {k}"
            )));
        }
        fem.stiffness.mul_vec(&vectors[k * n..(k + 1) * n], &mut av);
        let r = av
            .iter()
            .zip(&mass_vectors[k * n..(k + 1) * n])
            .map(|(a, m)| (a - lam * m).abs())
            .fold(0.0, f64::max);
        max_residual = max_residual.max(r / lam);
    }
    let mut max_defect: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let ip = dot(
                &vectors[i * n..(i + 1) * n],
                &mass_vectors[j * n..(j + 1) * n],
            );
            let target = if i == j { 1.0 } else { 0.0 };
            max_defect = max_defect.max((ip - target).abs());
        }
    }
    if max_residual > 1e-10 || max_defect > 1e-12 {
        return Err(Error::NumericFailure(format!(
            "eigendecomposition inaccurate: relative residual {max_residual:e}, orthonormality defect {max_defect:e}"
        )));
    }
    Ok(SpectralDecomp {
        n,
        eigenvalues,
        vectors,
        mass_vectors,
        max_residual,
        max_orthogonality_defect: max_defect,
    })
}

/// Prolongates a P1 function from `coarse` to the nested mesh `fine` by
/// evaluating it at the fine nodes.
pub fn prolongate(coarse: &Mesh1D, fine: &Mesh1D, u: &[f64]) -> Result<Vec<f64>> {
    check_dim("prolongation input", u.len(), coarse.dim())?;
    if fine.n_cells() % coarse.n_cells() != 0 {
        return invalid(format!(
            "mesh with {} cells is not a refinement of {} cells",
            fine.n_cells(),
            coarse.n_cells()
        ));
    }
    let ratio = fine.n_cells() / coarse.n_cells();
    let nodal = |i: usize| -> f64 {
        // coarse global node index i in 0..=n_cells, boundary values zero
        if i == 0 || i == coarse.n_cells() {
            0.0
        } else {
            u[i - 1]
        }
    };
    Ok((1..fine.n_cells())
        .map(|g| {
            let c = g / ratio;
            let r = g % ratio;
            if r == 0 {
                nodal(c)
            } else {
                let t = r as f64 / ratio as f64;
                (1.0 - t) * nodal(c) + t * nodal(c + 1)
            }
        })
        .collect())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
