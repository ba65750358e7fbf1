//! Semi-implicit Euler–Maruyama scheme for the controlled linear state
//! equation
//!
//! `(M + τA) Y_{j+1} = M[Y_j + τ(α0 Y_j + α1 U_j) + (α2 Y_j + α3 U_j) δW_j]`.

use rayon::prelude::*;

use crate::error::{check_dim, invalid, Error, Result};
use crate::fem::FemSystem;
use crate::field::PathField;
use crate::linalg::TridiagFactor;
use crate::rand_paths::{BrownianBatch, TimeGrid};
use crate::stats::mean_se;

/// Coefficients `α0..α3` sampled at the left endpoints `t_0..t_{J−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpdeCoeffs {
    pub alpha0: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub alpha3: Vec<f64>,
}

impl LinearSpdeCoeffs {
    pub fn constant(a0: f64, a1: f64, a2: f64, a3: f64, steps: usize) -> Self {
        Self {
            alpha0: vec![a0; steps],
            alpha1: vec![a1; steps],
            alpha2: vec![a2; steps],
            alpha3: vec![a3; steps],
        }
    }

    /// Samples `f(t) = (α0, α1, α2, α3)` at the grid's left endpoints.
    pub fn from_fn<F: Fn(f64) -> [f64; 4]>(grid: &TimeGrid, f: F) -> Self {
        let mut c = Self::constant(0.0, 0.0, 0.0, 0.0, grid.steps());
        for j in 0..grid.steps() {
            let [a0, a1, a2, a3] = f(grid.t(j));
            c.alpha0[j] = a0;
            c.alpha1[j] = a1;
            c.alpha2[j] = a2;
            c.alpha3[j] = a3;
        }
        c
    }

    pub fn steps(&self) -> usize {
        self.alpha0.len()
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        for (name, a) in [
            ("alpha0", &self.alpha0),
            ("alpha1", &self.alpha1),
            ("alpha2", &self.alpha2),
            ("alpha3", &self.alpha3),
        ] {
            check_dim(name, a.len(), steps)?;
            if let Some(j) = a.iter().position(|x| !x.is_finite()) {
                return invalid(format!("{name} is not finite at step {j}"));
            }
        }
        Ok(())
    }
}

/// State values `Y(t_j)` for `j = 0..=J` on every path.
#[derive(Debug, Clone)]
pub struct StateBatch {
    pub values: PathField,
    pub grid: TimeGrid,
}

impl StateBatch {
    pub fn get(&self, path: usize, step: usize) -> &[f64] {
        self.values.get(path, step)
    }

    pub fn n_paths(&self) -> usize {
        self.values.n_paths()
    }
}

/// One step of the recursion. `y` holds `Y_j` on entry and `Y_{j+1}` on exit.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn state_step(
    fem: &FemSystem,
    factor: &TridiagFactor,
    coeffs: &LinearSpdeCoeffs,
    j: usize,
    tau: f64,
    dw: f64,
    y: &mut [f64],
    u: &[f64],
    scratch: &mut [f64],
) {
    let (a0, a1, a2, a3) = (
        coeffs.alpha0[j],
        coeffs.alpha1[j],
        coeffs.alpha2[j],
        coeffs.alpha3[j],
    );
    for ((s, &yi), &ui) in scratch.iter_mut().zip(y.iter()).zip(u) {
        *s = yi + tau * (a0 * yi + a1 * ui) + (a2 * yi + a3 * ui) * dw;
    }
    fem.mass().mul_vec(scratch, y);
    factor.solve_in_place(y);
}

/// Simulates the state on every path of `batch` under the control `u`
/// (`n_paths × J × dim`).
pub fn solve_state(
    fem: &FemSystem,
    grid: &TimeGrid,
    coeffs: &LinearSpdeCoeffs,
    u: &PathField,
    batch: &BrownianBatch,
    y0: &[f64],
) -> Result<StateBatch> {
    let n = fem.dim();
    let steps = grid.steps();
    coeffs.validate(steps)?;
    check_dim("initial state", y0.len(), n)?;
    check_dim("control dimension", u.dim(), n)?;
    check_dim("control steps", u.n_steps(), steps)?;
    check_dim("control paths", u.n_paths(), batch.n_paths())?;
    check_dim("noise steps", batch.grid().steps(), steps)?;
    let factor = fem.implicit_factor(grid.tau())?;
    let tau = grid.tau();
    let mut values = PathField::zeros(batch.n_paths(), steps + 1, n);
    let len = (steps + 1) * n;
    values
        .as_mut_slice()
        .par_chunks_mut(len)
        .enumerate()
        .try_for_each(|(p, traj)| {
            let mut y = y0.to_vec();
            let mut scratch = vec![0.0; n];
            traj[..n].copy_from_slice(&y);
            for j in 0..steps {
                state_step(
                    fem,
                    &factor,
                    coeffs,
                    j,
                    tau,
                    batch.increment(p, j),
                    &mut y,
                    u.get(p, j),
                    &mut scratch,
                );
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericFailure(format!(
                        "non-finite state on path {p} at step {}",
                        j + 1
                    )));
                }
                traj[(j + 1) * n..(j + 2) * n].copy_from_slice(&y);
            }
            Ok(())
        })?;
    Ok(StateBatch {
        values,
        grid: *grid,
    })
}

/// Monte Carlo estimate of `‖y‖_{L²(0,T;H)} / ‖g‖_{L²(0,T;Ḣ_h^{−2})}` for
/// `dy = (Δ_h y + α0 y + g) dt + α2 y dW`, `y(0) = 0`, with deterministic
/// `g[j]` at `t_j`. Both norms use the left-endpoint values `j = 0..J−1`.
pub fn stability_ratio(
    fem: &FemSystem,
    grid: &TimeGrid,
    coeffs: &LinearSpdeCoeffs,
    g: &[Vec<f64>],
    batch: &BrownianBatch,
) -> Result<(f64, f64)> {
    let steps = grid.steps();
    coeffs.validate(steps)?;
    if coeffs
        .alpha1
        .iter()
        .chain(&coeffs.alpha3)
        .any(|&a| a != 0.0)
    {
        return invalid("stability ratio requires alpha1 = alpha3 = 0");
    }
    check_dim("source steps", g.len(), steps)?;
    let tau = grid.tau();
    let mut denom = 0.0;
    for gj in g {
        check_dim("source dimension", gj.len(), fem.dim())?;
        let nrm = fem.norm(gj, -2)?;
        denom += tau * nrm * nrm;
    }
    if denom == 0.0 {
        return invalid("stability ratio needs a nonzero source");
    }
    // The source enters through the control slot with unit weight.
    let mut src = coeffs.clone();
    src.alpha1 = vec![1.0; steps];
    let u = PathField::deterministic(batch.n_paths(), g)?;
    let state = solve_state(fem, grid, &src, &u, batch, &vec![0.0; fem.dim()])?;
    let per_path: Vec<f64> = (0..batch.n_paths())
        .map(|p| {
            (0..steps)
                .map(|j| tau * fem.mass_inner(state.get(p, j), state.get(p, j)))
                .sum()
        })
        .collect();
    let (num, num_se) = mean_se(&per_path);
    let ratio = (num / denom).sqrt();
    let se = if num > 0.0 {
        ratio * num_se / (2.0 * num)
    } else {
        0.0
    };
    Ok((ratio, se))
}
