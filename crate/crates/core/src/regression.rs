//! Least-squares conditional expectations on polynomial features of the
//! Brownian value `W(t_j)`.
//!
//! The polynomial space `span{1, w, ..., w^d}` is represented by
//! probabilists' Hermite polynomials of the standardized regressor, which
//! span the same space but are far better conditioned. Non-constant
//! columns are centered and scaled to unit RMS, so the intercept decouples
//! and the ridge only touches the remaining block.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Polynomial regression basis in the regressor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionBasis {
    pub degree: usize,
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 4,
            ridge: 1e-10,
        }
    }
}

/// Largest acceptable condition number of the regularized normal equations.
pub const MAX_CONDITION: f64 = 1e13;

/// Design matrix of one regression, factored once and reused for every
/// column of values.
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    n_paths: usize,
    k: usize,
    x: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    cond: f64,
}

fn hermite_row(w: f64, degree: usize, out: &mut [f64]) {
    // He_0 = 1, He_1 = w, He_{n+1} = w He_n − n He_{n−1}; the constant is dropped.
    let (mut a, mut b) = (1.0, w);
    for n in 1..=degree {
        out[n - 1] = b;
        let next = w * b - n as f64 * a;
        a = b;
        b = next;
    }
}

impl RegressionDesign {
    /// `regressor[p]` is `W(t_j)` on path `p`; `extra`, when given, holds
    /// `extra_dim` additional regressors per path (row-major).
    pub fn new(
        basis: &RegressionBasis,
        regressor: &[f64],
        extra: Option<(&[f64], usize)>,
    ) -> Result<Self> {
        let n = regressor.len();
        let extra_dim = extra.map_or(0, |(_, d)| d);
        let k_max = basis.degree + extra_dim;
        if n <= k_max + 1 {
            return invalid(format!(
                "regression needs more than {} paths, got {n}",
                k_max + 1
            ));
        }
        if !(basis.ridge >= 0.0) {
            return invalid("regression ridge must be nonnegative");
        }
        if let Some((e, d)) = extra {
            if e.len() != n * d {
                return invalid("extra regressor storage does not match path count");
            }
        }

        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k_max);
        let (mean, sd) = moments(regressor);
        if basis.degree > 0 && sd > 1e-12 * (1.0 + mean.abs()) {
            let mut row = vec![0.0; basis.degree];
            let mut poly = vec![vec![0.0; n]; basis.degree];
            for (p, &w) in regressor.iter().enumerate() {
                hermite_row((w - mean) / sd, basis.degree, &mut row);
                for (c, v) in poly.iter_mut().zip(&row) {
                    c[p] = *v;
                }
            }
            cols.extend(poly);
        }
        if let Some((e, d)) = extra {
            for c in 0..d {
                cols.push((0..n).map(|p| e[p * d + c]).collect());
            }
        }
        // Center and scale; drop columns with no spread.
        cols.retain_mut(|c| {
            let (m, s) = moments(c);
            if !(s > 1e-12 * (1.0 + m.abs())) {
                return false;
            }
            c.iter_mut().for_each(|v| *v = (*v - m) / s);
            true
        });
        let k = cols.len();
        let mut x = vec![0.0; n * k];
        for (c, col) in cols.iter().enumerate() {
            for p in 0..n {
                x[p * k + c] = col[p];
            }
        }
        if k == 0 {
            return Ok(Self {
                n_paths: n,
                k,
                x,
                chol: None,
                cond: 1.0,
            });
        }
        let mut g = DMatrix::<f64>::zeros(k, k);
        for p in 0..n {
            let row = &x[p * k..(p + 1) * k];
            for a in 0..k {
                for b in 0..=a {
                    g[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..=a {
                let v = g[(a, b)] / n as f64;
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        let trace: f64 = (0..k).map(|a| g[(a, a)]).sum();
        for a in 0..k {
            g[(a, a)] += basis.ridge * trace / k as f64;
        }
        let eig = SymmetricEigen::new(g.clone()).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| {
            (lo.min(l), hi.max(l))
        });
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(cond <= MAX_CONDITION) {
            return Err(Error::NumericFailure(format!(
                "regression normal equations are singular (condition number {cond:e})"
            )));
        }
        let chol = g.cholesky().ok_or_else(|| {
            Error::NumericFailure(format!(
                "regression Cholesky failed (condition number {cond:e})"
            ))
        })?;
        Ok(Self {
            n_paths: n,
            k,
            x,
            chol: Some(chol),
            cond,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Number of non-constant features kept.
    pub fn n_features(&self) -> usize {
        self.k
    }

    pub fn condition_number(&self) -> f64 {
        self.cond
    }

    /// Fits each of the `m` columns of `values` (`n_paths × m`, row-major)
    /// and writes the fitted values to `out`. Columns that are constant
    /// across paths are reproduced exactly.
    pub fn fit(&self, values: &[f64], m: usize, out: &mut [f64]) {
        let n = self.n_paths;
        let k = self.k;
        debug_assert_eq!(values.len(), n * m);
        debug_assert_eq!(out.len(), n * m);
        let mut mean = vec![0.0; m];
        let mut lo = vec![f64::INFINITY; m];
        let mut hi = vec![f64::NEG_INFINITY; m];
        for p in 0..n {
            for c in 0..m {
                let v = values[p * m + c];
                mean[c] += v;
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        mean.iter_mut().for_each(|s| *s /= n as f64);

        let mut coef = vec![0.0; k * m];
        if let Some(chol) = &self.chol {
            let mut rhs = DMatrix::<f64>::zeros(k, m);
            for p in 0..n {
                let row = &self.x[p * k..(p + 1) * k];
                for c in 0..m {
                    let v = values[p * m + c] - mean[c];
                    if v != 0.0 {
                        for a in 0..k {
                            rhs[(a, c)] += row[a] * v;
                        }
                    }
                }
            }
            rhs /= n as f64;
            let sol = chol.solve(&rhs);
            for a in 0..k {
                for c in 0..m {
                    coef[a * m + c] = sol[(a, c)];
                }
            }
        }
        for p in 0..n {
            let row = &self.x[p * k..(p + 1) * k];
            for c in 0..m {
                out[p * m + c] = if lo[c] == hi[c] {
                    lo[c]
                } else {
                    let mut s = mean[c];
                    for a in 0..k {
                        s += row[a] * coef[a * m + c];
                    }
                    s
                };
            }
        }
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// One-shot conditional expectation of `values` (`n_paths × m`) given the
/// polynomial features of `regressor`.
pub fn cond_expect(
    basis: &RegressionBasis,
    regressor: &[f64],
    values: &[f64],
    m: usize,
) -> Result<Vec<f64>> {
    if m == 0 || values.len() != regressor.len() * m {
        return invalid("regression values do not match the number of paths");
    }
    let design = RegressionDesign::new(basis, regressor, None)?;
    let mut out = vec![0.0; values.len()];
    design.fit(values, m, &mut out);
    Ok(out)
}
