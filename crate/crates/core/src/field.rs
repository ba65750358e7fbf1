//! Per-path, per-step V_h-valued fields and adapted test processes.

use crate::error::{check_dim, invalid, Result};
use crate::rand_paths::BrownianBatch;

/// Dense `n_paths × n_steps × dim` array of nodal vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PathField {
    n_paths: usize,
    n_steps: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PathField {
    pub fn zeros(n_paths: usize, n_steps: usize, dim: usize) -> Self {
        Self {
            n_paths,
            n_steps,
            dim,
            data: vec![0.0; n_paths * n_steps * dim],
        }
    }

    pub fn from_vec(n_paths: usize, n_steps: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("path field storage", data.len(), n_paths * n_steps * dim)?;
        Ok(Self {
            n_paths,
            n_steps,
            dim,
            data,
        })
    }

    /// Same deterministic value on every path: `values[j]` is the vector at step `j`.
    pub fn deterministic(n_paths: usize, values: &[Vec<f64>]) -> Result<Self> {
        let dim = values.first().map_or(0, Vec::len);
        let mut f = Self::zeros(n_paths, values.len(), dim);
        for p in 0..n_paths {
            for (j, v) in values.iter().enumerate() {
                check_dim("deterministic field", v.len(), dim)?;
                f.get_mut(p, j).copy_from_slice(v);
            }
        }
        Ok(f)
    }

    /// Samples an adapted field on every path of `batch` at steps `0..n_steps`.
    pub fn sample<F: AdaptedField + ?Sized>(
        field: &F,
        batch: &BrownianBatch,
        n_steps: usize,
    ) -> Self {
        let dim = field.dim();
        let mut f = Self::zeros(batch.n_paths(), n_steps, dim);
        for p in 0..batch.n_paths() {
            for j in 0..n_steps {
                field.eval(j, PathView::of(batch, p), f.get_mut(p, j));
            }
        }
        f
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.n_steps + step) * self.dim;
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn get_mut(&mut self, path: usize, step: usize) -> &mut [f64] {
        let o = (path * self.n_steps + step) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// All steps of one path, contiguous.
    pub fn path(&self, path: usize) -> &[f64] {
        let len = self.n_steps * self.dim;
        &self.data[path * len..(path + 1) * len]
    }

    pub fn path_mut(&mut self, path: usize) -> &mut [f64] {
        let len = self.n_steps * self.dim;
        &mut self.data[path * len..(path + 1) * len]
    }

    /// Elementwise `self + s * other`.
    pub fn add_scaled(&self, s: f64, other: &PathField) -> Result<PathField> {
        if (self.n_paths, self.n_steps, self.dim) != (other.n_paths, other.n_steps, other.dim) {
            return invalid("path field shapes differ");
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + s * b)
            .collect();
        PathField::from_vec(self.n_paths, self.n_steps, self.dim, data)
    }
}

/// One Brownian path: `increments[i] = δW_i` and `cumulative[i] = W(t_i)`.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub increments: &'a [f64],
    pub cumulative: &'a [f64],
}

impl<'a> PathView<'a> {
    pub fn of(batch: &'a BrownianBatch, path: usize) -> Self {
        Self {
            increments: batch.path_increments(path),
            cumulative: batch.path_cumulative(path),
        }
    }
}

/// A V_h-valued process evaluated on a Brownian path.
///
/// The value at step `j` may depend on `δW_0, ..., δW_{j-1}` (equivalently
/// `W(t_0), ..., W(t_j)`) and nothing later.
pub trait AdaptedField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, step: usize, path: PathView<'_>, out: &mut [f64]);
}

/// Field of the form `coeff(t_j, W(t_j)) * shape`.
pub struct BrownianScaled<F> {
    pub shape: Vec<f64>,
    pub tau: f64,
    pub coeff: F,
}

impl<F: Fn(f64, f64) -> f64 + Sync> AdaptedField for BrownianScaled<F> {
    fn dim(&self) -> usize {
        self.shape.len()
    }

    fn eval(&self, step: usize, path: PathView<'_>, out: &mut [f64]) {
        let c = (self.coeff)(step as f64 * self.tau, path.cumulative[step]);
        for (o, s) in out.iter_mut().zip(&self.shape) {
            *o = c * s;
        }
    }
}

/// Field defined by an arbitrary closure of `(step, path, out)`.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(usize, PathView<'_>, &mut [f64]) + Sync> AdaptedField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, step: usize, path: PathView<'_>, out: &mut [f64]) {
        (self.f)(step, path, out)
    }
}

/// Permutation test for adaptedness: the value at `step` must not change
/// when increments `step..` are replaced (reversed and perturbed). Checks
/// the given steps on the first `n_probe` paths.
pub fn check_adapted<F: AdaptedField + ?Sized>(
    name: &str,
    field: &F,
    batch: &BrownianBatch,
    steps: std::ops::RangeInclusive<usize>,
    n_probe: usize,
) -> Result<()> {
    let dim = field.dim();
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    let j_total = batch.grid().steps();
    for p in 0..batch.n_paths().min(n_probe) {
        let view = PathView::of(batch, p);
        for step in *steps.start()..=(*steps.end()).min(j_total) {
            let mut scrambled = view.increments.to_vec();
            scrambled[step..].reverse();
            for (k, x) in scrambled[step..].iter_mut().enumerate() {
                *x = -*x + 0.37 * (k as f64 + 1.0);
            }
            let mut cum = view.cumulative.to_vec();
            for i in step..scrambled.len() {
                cum[i + 1] = cum[i] + scrambled[i];
            }
            let other = PathView {
                increments: &scrambled,
                cumulative: &cum,
            };
            field.eval(step, view, &mut a);
            field.eval(step, other, &mut b);
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return invalid(format!(
                    "{name} is not adapted: value at step {step} depends on future increments"
                ));
            }
        }
    }
    Ok(())
}
