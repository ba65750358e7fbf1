//! Exact discrete heat semigroup `e^{tΔ_h}` and the discrete mild-solution
//! maps used as test processes.
//!
//! Time integrals are left-endpoint sums on the grid:
//!
//! * `s0h(σ)(t_j) = Σ_{i<j} e^{(t_j−t_i)Δ_h} σ_i δW_i`
//! * `s1h(g)(t_j) = Σ_{i<j} τ e^{(t_j−t_i)Δ_h} g_i`
//! * `s2h(g)(t_j) = Σ_{j<i≤J−1} τ e^{(t_i−t_j)Δ_h} g_i`
//!
//! Inputs are V_h-valued, so `Q_h` acts as the identity on them.

use rayon::prelude::*;

use crate::error::{check_dim, invalid, Result};
use crate::fem::{FemSystem, GridFunction, SpectralDecomp};
use crate::field::PathField;
use crate::rand_paths::{BrownianBatch, TimeGrid};
use crate::stats::mean_se;

/// Spectral evaluator of `e^{tΔ_h}` on a fixed FE system.
#[derive(Debug, Clone)]
pub struct SemigroupEvaluator {
    fem: FemSystem,
    spectral: SpectralDecomp,
}

/// Dense matrix of `e^{tΔ_h}` for one fixed `t`.
#[derive(Debug, Clone)]
pub struct Propagator {
    n: usize,
    mat: Vec<f64>,
}

impl Propagator {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate() {
            let row = &self.mat[a * self.n..(a + 1) * self.n];
            *o = row.iter().zip(u).map(|(m, x)| m * x).sum();
        }
    }

    pub fn apply_in_place(&self, u: &mut [f64], scratch: &mut [f64]) {
        self.apply(u, scratch);
        u.copy_from_slice(scratch);
    }
}

/// Result of the discrete energy identity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyCheck {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
}

impl EnergyCheck {
    /// `|lhs − rhs| / rhs`, zero when both sides vanish.
    pub fn relative_gap(&self) -> f64 {
        if self.rhs == 0.0 && self.lhs == 0.0 {
            0.0
        } else {
            (self.lhs - self.rhs).abs() / self.rhs.abs()
        }
    }
}

impl SemigroupEvaluator {
    pub fn new(fem: &FemSystem) -> Result<Self> {
        let spectral = fem.spectral()?.clone();
        Ok(Self {
            fem: fem.clone(),
            spectral,
        })
    }

    pub fn fem(&self) -> &FemSystem {
        &self.fem
    }

    pub fn spectral(&self) -> &SpectralDecomp {
        &self.spectral
    }

    pub fn dim(&self) -> usize {
        self.spectral.dim()
    }

    /// `e^{tΔ_h} u`.
    pub fn exp_apply(&self, t: f64, u: &[f64]) -> Result<GridFunction> {
        if !(t >= 0.0) {
            return invalid(format!("semigroup time must be nonnegative, got {t}"));
        }
        check_dim("semigroup input", u.len(), self.dim())?;
        let n = self.dim();
        let mut c = vec![0.0; n];
        self.spectral.to_modal(u, &mut c);
        for (ck, lam) in c.iter_mut().zip(self.spectral.eigenvalues()) {
            *ck *= (-lam * t).exp();
        }
        let mut out = vec![0.0; n];
        self.spectral.from_modal(&c, &mut out);
        Ok(GridFunction(out))
    }

    /// Dense form of `e^{tΔ_h}` for repeated application.
    pub fn propagator(&self, t: f64) -> Result<Propagator> {
        if !(t >= 0.0) {
            return invalid(format!("semigroup time must be nonnegative, got {t}"));
        }
        let n = self.dim();
        let mut mat = vec![0.0; n * n];
        for k in 0..n {
            let e = (-self.spectral.eigenvalues()[k] * t).exp();
            let v = self.spectral.vector(k);
            let mv = self.spectral.mass_vector(k);
            for a in 0..n {
                let s = e * v[a];
                for b in 0..n {
                    mat[a * n + b] += s * mv[b];
                }
            }
        }
        Ok(Propagator { n, mat })
    }

    fn check_field(&self, what: &str, field: &PathField, min_steps: usize) -> Result<()> {
        check_dim(what, field.dim(), self.dim())?;
        if field.n_steps() < min_steps {
            return invalid(format!(
                "{what}: field has {} steps, need at least {min_steps}",
                field.n_steps()
            ));
        }
        Ok(())
    }

    /// Weighted sum `Σ_i w_i e^{(t_j − t_i)Δ_h} f_i` over `i in range`, per path,
    /// evaluated in modal coordinates.
    fn modal_sum<W>(
        &self,
        grid: &TimeGrid,
        f: &PathField,
        j: usize,
        range: std::ops::Range<usize>,
        sign: f64,
        weight: W,
    ) -> Vec<GridFunction>
    where
        W: Fn(usize, usize) -> f64 + Sync,
    {
        let n = self.dim();
        let lam = self.spectral.eigenvalues();
        (0..f.n_paths())
            .into_par_iter()
            .map(|p| {
                let mut acc = vec![0.0; n];
                let mut c = vec![0.0; n];
                for i in range.clone() {
                    let w = weight(p, i);
                    if w == 0.0 {
                        continue;
                    }
                    self.spectral.to_modal(f.get(p, i), &mut c);
                    let dt = sign * (grid.t(j) - grid.t(i));
                    for k in 0..n {
                        acc[k] += w * (-lam[k] * dt).exp() * c[k];
                    }
                }
                let mut out = vec![0.0; n];
                self.spectral.from_modal(&acc, &mut out);
                GridFunction(out)
            })
            .collect()
    }

    /// Discrete stochastic convolution at `t_j`, by direct summation.
    pub fn s0h(
        &self,
        grid: &TimeGrid,
        sigma: &PathField,
        batch: &BrownianBatch,
        j: usize,
    ) -> Result<Vec<GridFunction>> {
        if j > grid.steps() {
            return invalid(format!("step index {j} out of range 0..={}", grid.steps()));
        }
        self.check_field("s0h integrand", sigma, j)?;
        check_dim("s0h paths", sigma.n_paths(), batch.n_paths())?;
        Ok(self.modal_sum(grid, sigma, j, 0..j, 1.0, |p, i| batch.increment(p, i)))
    }

    /// `s0h(σ)(t_j)` for all `j = 0..=J` via `X_{j+1} = e^{τΔ_h}(X_j + σ_j δW_j)`.
    pub fn s0h_trajectory(
        &self,
        grid: &TimeGrid,
        sigma: &PathField,
        batch: &BrownianBatch,
    ) -> Result<PathField> {
        let steps = grid.steps();
        self.check_field("s0h integrand", sigma, steps)?;
        check_dim("s0h paths", sigma.n_paths(), batch.n_paths())?;
        let n = self.dim();
        let prop = self.propagator(grid.tau())?;
        let mut out = PathField::zeros(sigma.n_paths(), steps + 1, n);
        let len = (steps + 1) * n;
        out.as_mut_slice()
            .par_chunks_mut(len)
            .enumerate()
            .for_each(|(p, traj)| {
                let mut x = vec![0.0; n];
                let mut tmp = vec![0.0; n];
                for j in 0..steps {
                    let dw = batch.increment(p, j);
                    for (xi, si) in x.iter_mut().zip(sigma.get(p, j)) {
                        *xi += si * dw;
                    }
                    prop.apply_in_place(&mut x, &mut tmp);
                    traj[(j + 1) * n..(j + 2) * n].copy_from_slice(&x);
                }
            });
        Ok(out)
    }

    /// `s1h(g)(t_j)`, the left-endpoint sum over `[0, t_j)`.
    pub fn s1h(&self, grid: &TimeGrid, g: &PathField, j: usize) -> Result<Vec<GridFunction>> {
        if j > grid.steps() {
            return invalid(format!("step index {j} out of range 0..={}", grid.steps()));
        }
        self.check_field("s1h integrand", g, j)?;
        let tau = grid.tau();
        Ok(self.modal_sum(grid, g, j, 0..j, 1.0, |_, _| tau))
    }

    /// `s2h(g)(t_j)`, the sum over grid points `t_i ∈ (t_j, T)`.
    pub fn s2h(&self, grid: &TimeGrid, g: &PathField, j: usize) -> Result<Vec<GridFunction>> {
        let steps = grid.steps();
        if j > steps {
            return invalid(format!("step index {j} out of range 0..={steps}"));
        }
        self.check_field("s2h integrand", g, steps)?;
        let tau = grid.tau();
        Ok(self.modal_sum(grid, g, j, (j + 1).min(steps)..steps, -1.0, |_, _| tau))
    }

    /// Discrete analog of the energy identity for `X = s0h(g)` with
    /// deterministic `g` (`g[j]` is the value at `t_j`, `j < J`):
    /// `lhs = E‖X_J‖² + 2 Σ_j τ E‖X_j‖²_{Ḣ¹_h}`, `rhs = Σ_j τ ‖g_j‖²`.
    pub fn energy_check(
        &self,
        grid: &TimeGrid,
        g: &[Vec<f64>],
        batch: &BrownianBatch,
    ) -> Result<EnergyCheck> {
        let steps = grid.steps();
        check_dim("energy check steps", g.len(), steps)?;
        for gj in g {
            check_dim("energy check field", gj.len(), self.dim())?;
        }
        let n = self.dim();
        let tau = grid.tau();
        let prop = self.propagator(tau)?;
        let fem = &self.fem;
        let per_path: Vec<f64> = (0..batch.n_paths())
            .into_par_iter()
            .map(|p| {
                let mut x = vec![0.0; n];
                let mut tmp = vec![0.0; n];
                let mut acc = 0.0;
                for (j, gj) in g.iter().enumerate() {
                    acc += 2.0 * tau * fem.stiffness_inner(&x, &x);
                    let dw = batch.increment(p, j);
                    for (xi, gi) in x.iter_mut().zip(gj) {
                        *xi += gi * dw;
                    }
                    prop.apply_in_place(&mut x, &mut tmp);
                }
                acc + fem.mass_inner(&x, &x)
            })
            .collect();
        let (lhs, lhs_se) = mean_se(&per_path);
        let rhs = g.iter().map(|gj| tau * fem.mass_inner(gj, gj)).sum();
        Ok(EnergyCheck {
            lhs,
            lhs_se,
            rhs,
            rhs_se: 0.0,
        })
    }
}
