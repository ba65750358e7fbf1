//! Regression-based backward induction for the spatially semi-discrete
//! backward equation `dp = −(Δ_h p + Q_h f(t, p, z)) dt + z dW`, `p(T) = Q_h p_T`.
//!
//! Step `j = J−1, ..., 0`:
//!
//! 1. `q_j = E_j[p_{j+1}]`
//! 2. `z_j = E_j[(p_{j+1} − q_j) δW_j] / τ`
//! 3. Picard on `(M + τA) p_j = M (q_j + τ f(t_j, p_j, z_j))`
//!
//! Conditional expectations are least-squares regressions on `W(t_j)`.
//! Subtracting `q_j` in step 2 leaves the conditional mean unchanged since
//! `E_j δW_j = 0`, and removes most of the variance.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{check_dim, invalid, Error, Result};
use crate::fem::FemSystem;
use crate::field::{check_adapted, AdaptedField, PathField, PathView};
use crate::rand_paths::{BrownianBatch, TimeGrid};
use crate::regression::{RegressionBasis, RegressionDesign};
use crate::semigroup::SemigroupEvaluator;
use crate::stats::{mean_se, sqrt_mean_se};

/// Where the driver is evaluated.
#[derive(Debug, Clone, Copy)]
pub struct DriverContext<'a> {
    pub step: usize,
    pub t: f64,
    pub path_index: usize,
    pub path: PathView<'a>,
}

/// Driver `f(t, p, z)`, returning the nodal vector of `Q_h f`.
pub trait Driver: Sync {
    /// Lipschitz constant in `(p, z)` with respect to the H norm.
    fn lipschitz(&self) -> f64;

    /// True when `f ≡ 0`; lets the solver skip the Picard loop.
    fn is_zero(&self) -> bool {
        false
    }

    fn eval(&self, ctx: &DriverContext<'_>, p: &[f64], z: &[f64], out: &mut [f64]);
}

/// Terminal value, returning the nodal vector of `Q_h p_T` on a path.
pub trait Terminal: Sync {
    fn eval(&self, path_index: usize, path: PathView<'_>, out: &mut [f64]);
}

/// Additional per-path regressors used alongside `W(t_j)`.
pub trait ExtraRegressors: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, step: usize, path_index: usize, out: &mut [f64]);
}

/// `f ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn lipschitz(&self) -> f64 {
        0.0
    }

    fn is_zero(&self) -> bool {
        true
    }

    fn eval(&self, _: &DriverContext<'_>, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// `f(t_j, p, z) = k_j p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDriver {
    pub k: Vec<f64>,
    pub lipschitz: f64,
}

impl Driver for LinearDriver {
    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn is_zero(&self) -> bool {
        self.k.iter().all(|&k| k == 0.0)
    }

    fn eval(&self, ctx: &DriverContext<'_>, p: &[f64], _: &[f64], out: &mut [f64]) {
        let k = self.k[ctx.step];
        for (o, v) in out.iter_mut().zip(p) {
            *o = k * v;
        }
    }
}

/// Terminal value `c(W(T)) · shape`.
pub struct BrownianTerminal {
    pub shape: Vec<f64>,
    pub coeff: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl Terminal for BrownianTerminal {
    fn eval(&self, _: usize, path: PathView<'_>, out: &mut [f64]) {
        let w_t = *path.cumulative.last().expect("nonempty path");
        let c = (self.coeff)(w_t);
        for (o, s) in out.iter_mut().zip(&self.shape) {
            *o = c * s;
        }
    }
}

/// Backward problem data on a fixed time grid.
pub struct BspdeProblem<'a> {
    pub driver: Box<dyn Driver + 'a>,
    pub terminal: Box<dyn Terminal + 'a>,
    pub grid: TimeGrid,
    pub extra: Option<Box<dyn ExtraRegressors + 'a>>,
}

/// Stopping rule of the Picard loop: `‖p^{(k+1)} − p^{(k)}‖_H ≤ tol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-12,
        }
    }
}

/// Per-step solver diagnostics, indexed by step `j < J`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BackwardDiagnostics {
    pub picard_iters: Vec<usize>,
    pub condition_numbers: Vec<f64>,
    /// Largest observed ratio of successive Picard increments.
    pub max_contraction: f64,
}

/// Receives the solution one time level at a time, `j = J` first.
/// `z` and `q` are `None` at the terminal level. Arrays are `n_paths × dim`.
pub trait BackwardSink {
    fn accept(
        &mut self,
        step: usize,
        p: &[f64],
        z: Option<&[f64]>,
        q: Option<&[f64]>,
    ) -> Result<()>;
}

/// Full stored solution.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    /// `n_paths × (J+1) × dim`.
    pub p: PathField,
    /// `n_paths × J × dim`.
    pub z: PathField,
    /// `q_j = E_j[p_{j+1}]`, `n_paths × J × dim`.
    pub q: PathField,
    pub diagnostics: BackwardDiagnostics,
}

struct Collector {
    p: PathField,
    z: PathField,
    q: PathField,
}

impl BackwardSink for Collector {
    fn accept(
        &mut self,
        step: usize,
        p: &[f64],
        z: Option<&[f64]>,
        q: Option<&[f64]>,
    ) -> Result<()> {
        let n = self.p.dim();
        for path in 0..self.p.n_paths() {
            let r = path * n..(path + 1) * n;
            self.p.get_mut(path, step).copy_from_slice(&p[r.clone()]);
            if let Some(z) = z {
                self.z.get_mut(path, step).copy_from_slice(&z[r.clone()]);
            }
            if let Some(q) = q {
                self.q.get_mut(path, step).copy_from_slice(&q[r]);
            }
        }
        Ok(())
    }
}

fn check_grid(problem: &BspdeProblem<'_>, batch: &BrownianBatch) -> Result<()> {
    let (a, b) = (problem.grid, *batch.grid());
    if a.steps() != b.steps() || a.tau() != b.tau() {
        return invalid(format!(
            "problem grid (J = {}, tau = {}) does not match the noise grid (J = {}, tau = {})",
            a.steps(),
            a.tau(),
            b.steps(),
            b.tau()
        ));
    }
    Ok(())
}

/// Runs the backward induction and stores `(p, z, q)` on every path.
pub fn solve_backward(
    problem: &BspdeProblem<'_>,
    fem: &FemSystem,
    batch: &BrownianBatch,
    basis: &RegressionBasis,
    picard: &PicardConfig,
) -> Result<BackwardSolution> {
    let (np, steps, n) = (batch.n_paths(), problem.grid.steps(), fem.dim());
    let mut sink = Collector {
        p: PathField::zeros(np, steps + 1, n),
        z: PathField::zeros(np, steps, n),
        q: PathField::zeros(np, steps, n),
    };
    let diagnostics = solve_backward_streaming(problem, fem, batch, basis, picard, &mut sink)?;
    Ok(BackwardSolution {
        p: sink.p,
        z: sink.z,
        q: sink.q,
        diagnostics,
    })
}

/// Backward induction that hands each time level to `sink` and keeps only
/// two levels in memory.
pub fn solve_backward_streaming<S: BackwardSink + ?Sized>(
    problem: &BspdeProblem<'_>,
    fem: &FemSystem,
    batch: &BrownianBatch,
    basis: &RegressionBasis,
    picard: &PicardConfig,
    sink: &mut S,
) -> Result<BackwardDiagnostics> {
    check_grid(problem, batch)?;
    let grid = problem.grid;
    let (np, steps, n, tau) = (batch.n_paths(), grid.steps(), fem.dim(), grid.tau());
    let lip = problem.driver.lipschitz();
    if !(lip >= 0.0 && lip.is_finite()) {
        return invalid(format!(
            "driver Lipschitz constant must be finite and nonnegative, got {lip}"
        ));
    }
    if tau * lip >= 0.5 {
        return invalid(format!(
            "Picard iteration needs tau * M < 1/2, got {tau} * {lip} = {}",
            tau * lip
        ));
    }
    if picard.max_iters == 0 || !(picard.tol >= 0.0) {
        return invalid("Picard settings need max_iters >= 1 and tol >= 0");
    }
    let extra_dim = problem.extra.as_ref().map_or(0, |e| e.dim());
    let factor = fem.implicit_factor(tau)?;
    let driver = problem.driver.as_ref();

    let mut p_next = vec![0.0; np * n];
    p_next
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(path, out)| {
            problem.terminal.eval(path, PathView::of(batch, path), out);
        });
    if let Some(i) = p_next.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericFailure(format!(
            "non-finite terminal value on path {}",
            i / n
        )));
    }
    sink.accept(steps, &p_next, None, None)?;

    let mut diag = BackwardDiagnostics {
        picard_iters: vec![0; steps],
        condition_numbers: vec![0.0; steps],
        max_contraction: 0.0,
    };
    let mut p_cur = vec![0.0; np * n];
    let mut q = vec![0.0; np * n];
    let mut z = vec![0.0; np * n];
    let mut work = vec![0.0; np * n];
    let mut extra = vec![0.0; np * extra_dim];
    for j in (0..steps).rev() {
        let w = batch.w_at(j);
        if let Some(e) = &problem.extra {
            for path in 0..np {
                e.eval(
                    j,
                    path,
                    &mut extra[path * extra_dim..(path + 1) * extra_dim],
                );
            }
        }
        let design = RegressionDesign::new(
            basis,
            &w,
            problem.extra.as_ref().map(|_| (&extra[..], extra_dim)),
        )
        .map_err(|e| match e {
            Error::NumericFailure(m) => Error::NumericFailure(format!("step {j}: {m}")),
            other => other,
        })?;
        diag.condition_numbers[j] = design.condition_number();

        design.fit(&p_next, n, &mut q);
        for path in 0..np {
            let dw = batch.increment(path, j);
            for i in path * n..(path + 1) * n {
                work[i] = (p_next[i] - q[i]) * dw;
            }
        }
        design.fit(&work, n, &mut z);
        z.iter_mut().for_each(|v| *v /= tau);

        let t = grid.t(j);
        let (q_ref, z_ref) = (&q, &z);
        let stats: Vec<(usize, f64)> = p_cur
            .par_chunks_mut(n)
            .enumerate()
            .map(|(path, p)| {
                let r = path * n..(path + 1) * n;
                let (qp, zp) = (&q_ref[r.clone()], &z_ref[r]);
                let mut rhs = vec![0.0; n];
                if driver.is_zero() {
                    fem.mass().mul_vec(qp, p);
                    factor.solve_in_place(p);
                    return (1, 0.0);
                }
                let ctx = DriverContext {
                    step: j,
                    t,
                    path_index: path,
                    path: PathView::of(batch, path),
                };
                let mut f = vec![0.0; n];
                let mut tmp = vec![0.0; n];
                let mut diff = vec![0.0; n];
                p.copy_from_slice(qp);
                let mut prev = f64::NAN;
                let mut worst = 0.0f64;
                let mut iters = 0;
                for k in 1..=picard.max_iters {
                    iters = k;
                    driver.eval(&ctx, p, zp, &mut f);
                    for i in 0..n {
                        tmp[i] = qp[i] + tau * f[i];
                    }
                    fem.mass().mul_vec(&tmp, &mut rhs);
                    factor.solve_in_place(&mut rhs);
                    for i in 0..n {
                        diff[i] = rhs[i] - p[i];
                    }
                    p.copy_from_slice(&rhs);
                    let d = fem.mass_inner(&diff, &diff).max(0.0).sqrt();
                    if prev > 0.0 && d > 0.0 {
                        worst = worst.max(d / prev);
                    }
                    prev = d;
                    if d <= picard.tol {
                        break;
                    }
                }
                (iters, worst)
            })
            .collect();
        for (it, c) in stats {
            diag.picard_iters[j] = diag.picard_iters[j].max(it);
            diag.max_contraction = diag.max_contraction.max(c);
        }
        if let Some(i) = p_cur.iter().chain(&z).position(|v| !v.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "non-finite backward solution on path {} at step {j}",
                (i % (np * n)) / n
            )));
        }
        sink.accept(j, &p_cur, Some(&z), Some(&q))?;
        std::mem::swap(&mut p_next, &mut p_cur);
    }
    Ok(diag)
}

/// Spatial profile `s` of a separable exact solution, with the integrals
/// needed to measure `‖c s − u_h‖` exactly for `u_h ∈ V_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeData {
    /// `(s, φ_i)`.
    pub load: Vec<f64>,
    /// `(s', φ_i')`.
    pub grad_load: Vec<f64>,
    /// `‖s‖²`.
    pub l2_sq: f64,
    /// `‖s'‖²`.
    pub h1_sq: f64,
}

impl ShapeData {
    /// `s(x) = sin(πx)`.
    pub fn sine(fem: &FemSystem) -> Result<Self> {
        use std::f64::consts::PI;
        let s = |x: f64| (PI * x).sin();
        let load = fem.load_vector(s, 8)?;
        let mesh = fem.mesh();
        let h = mesh.h();
        // φ_i' = ±1/h on the two cells of its support.
        let grad_load = (0..fem.dim())
            .map(|i| {
                let x = mesh.node(i);
                (2.0 * s(x) - s(x - h) - s(x + h)) / h
            })
            .collect();
        Ok(Self {
            load,
            grad_load,
            l2_sq: 0.5,
            h1_sq: PI * PI / 2.0,
        })
    }

    /// `‖c s − u‖²_H`.
    pub fn l2_error_sq(&self, fem: &FemSystem, c: f64, u: &[f64]) -> f64 {
        let cross: f64 = self.load.iter().zip(u).map(|(b, x)| b * x).sum();
        (c * c * self.l2_sq - 2.0 * c * cross + fem.mass_inner(u, u)).max(0.0)
    }

    /// `‖∇(c s − u)‖²_H`.
    pub fn h1_error_sq(&self, fem: &FemSystem, c: f64, u: &[f64]) -> f64 {
        let cross: f64 = self.grad_load.iter().zip(u).map(|(b, x)| b * x).sum();
        (c * c * self.h1_sq - 2.0 * c * cross + fem.stiffness_inner(u, u)).max(0.0)
    }
}

/// Exact solution of the form `p = P(t, W(t)) s(x)`, `z = Z(t, W(t)) s(x)`.
#[derive(Clone)]
pub struct SeparableExact {
    pub p_coeff: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub z_coeff: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub shape: ShapeData,
}

/// Monte Carlo error norms with standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorNorms {
    /// `max_j (E‖p(t_j) − p_j‖²)^{1/2}`.
    pub sup_p_l2: f64,
    pub sup_p_l2_se: f64,
    /// `(Σ_{j<J} τ E‖∇(p(t_j) − p_j)‖²)^{1/2}`.
    pub p_h1: f64,
    pub p_h1_se: f64,
    /// `(Σ_{j<J} τ E‖z(t_j) − z_j‖²)^{1/2}`.
    pub z_l2: f64,
    pub z_l2_se: f64,
}

/// Sink accumulating [`ErrorNorms`] against a separable exact solution.
pub struct ErrorAccumulator<'a> {
    fem: &'a FemSystem,
    batch: &'a BrownianBatch,
    exact: &'a SeparableExact,
    h1: Vec<f64>,
    z: Vec<f64>,
    sup: (f64, f64),
    step_err: Vec<f64>,
}

impl<'a> ErrorAccumulator<'a> {
    pub fn new(fem: &'a FemSystem, batch: &'a BrownianBatch, exact: &'a SeparableExact) -> Self {
        let np = batch.n_paths();
        Self {
            fem,
            batch,
            exact,
            h1: vec![0.0; np],
            z: vec![0.0; np],
            sup: (0.0, 0.0),
            step_err: vec![0.0; np],
        }
    }

    pub fn finish(&self) -> ErrorNorms {
        let (p_h1, p_h1_se) = sqrt_mean_se(&self.h1);
        let (z_l2, z_l2_se) = sqrt_mean_se(&self.z);
        ErrorNorms {
            sup_p_l2: self.sup.0,
            sup_p_l2_se: self.sup.1,
            p_h1,
            p_h1_se,
            z_l2,
            z_l2_se,
        }
    }
}

impl BackwardSink for ErrorAccumulator<'_> {
    fn accept(
        &mut self,
        step: usize,
        p: &[f64],
        z: Option<&[f64]>,
        _q: Option<&[f64]>,
    ) -> Result<()> {
        let n = self.fem.dim();
        let grid = self.batch.grid();
        let (t, tau) = (grid.t(step), grid.tau());
        let shape = &self.exact.shape;
        for path in 0..self.batch.n_paths() {
            let w = self.batch.w(path, step);
            let pp = &p[path * n..(path + 1) * n];
            let cp = (self.exact.p_coeff)(t, w);
            self.step_err[path] = shape.l2_error_sq(self.fem, cp, pp);
            if let Some(z) = z {
                self.h1[path] += tau * shape.h1_error_sq(self.fem, cp, pp);
                let cz = (self.exact.z_coeff)(t, w);
                self.z[path] += tau * shape.l2_error_sq(self.fem, cz, &z[path * n..(path + 1) * n]);
            }
        }
        let (e, se) = sqrt_mean_se(&self.step_err);
        if e > self.sup.0 {
            self.sup = (e, se);
        }
        Ok(())
    }
}

/// Error norms of a stored solution against a separable exact solution.
pub fn error_norms(
    sol: &BackwardSolution,
    exact: &SeparableExact,
    fem: &FemSystem,
    batch: &BrownianBatch,
) -> Result<ErrorNorms> {
    let (np, n) = (batch.n_paths(), fem.dim());
    check_dim("solution paths", sol.p.n_paths(), np)?;
    check_dim("solution dimension", sol.p.dim(), n)?;
    check_dim("solution steps", sol.p.n_steps(), batch.grid().steps() + 1)?;
    let steps = batch.grid().steps();
    let mut acc = ErrorAccumulator::new(fem, batch, exact);
    let mut p = vec![0.0; np * n];
    let mut z = vec![0.0; np * n];
    for j in (0..=steps).rev() {
        for path in 0..np {
            p[path * n..(path + 1) * n].copy_from_slice(sol.p.get(path, j));
            if j < steps {
                z[path * n..(path + 1) * n].copy_from_slice(sol.z.get(path, j));
            }
        }
        acc.accept(j, &p, (j < steps).then_some(&z[..]), None)?;
    }
    Ok(acc.finish())
}

/// Manufactured family `p = a(t)(1 + βW(t)) sin(πx)`, `z = a(t) β sin(πx)`,
/// driver `f = (π² − a'/a) p`.
pub fn manufactured_problem(
    a: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    a_prime: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    beta: f64,
    fem: &FemSystem,
    grid: &TimeGrid,
) -> Result<(BspdeProblem<'static>, SeparableExact)> {
    use std::f64::consts::PI;
    let horizon = grid.horizon();
    // a is probed on a fine grid covering [0, T].
    let probes = 4 * grid.steps().max(256);
    let mut a_min = f64::INFINITY;
    let mut lip = 0.0f64;
    for i in 0..=probes {
        let t = horizon * i as f64 / probes as f64;
        let at = a(t);
        a_min = a_min.min(at);
        lip = lip.max((PI * PI - a_prime(t) / at).abs());
    }
    if !(a_min > 1e-12) || !lip.is_finite() {
        return invalid(format!(
            "manufactured amplitude must stay positive, min a = {a_min}"
        ));
    }
    if !beta.is_finite() {
        return invalid("beta must be finite");
    }
    let k = (0..grid.steps())
        .map(|j| {
            let t = grid.t(j);
            PI * PI - a_prime(t) / a(t)
        })
        .collect();
    let shape_proj = fem.l2_project(|x| (PI * x).sin(), 8)?.into_vec();
    let a_t = a(horizon);
    let terminal = BrownianTerminal {
        shape: shape_proj,
        coeff: Arc::new(move |w| a_t * (1.0 + beta * w)),
    };
    let problem = BspdeProblem {
        driver: Box::new(LinearDriver { k, lipschitz: lip }),
        terminal: Box::new(terminal),
        grid: *grid,
        extra: None,
    };
    let (ap, az) = (a.clone(), a);
    let exact = SeparableExact {
        p_coeff: Arc::new(move |t, w| ap(t) * (1.0 + beta * w)),
        z_coeff: Arc::new(move |t, _| az(t) * beta),
        shape: ShapeData::sine(fem)?,
    };
    Ok((problem, exact))
}

/// Both sides of the discrete transposition identity at step `j`:
///
/// `E⟨v, p_j⟩ + Σ_{i≥j} τ E[⟨g_i, p_i⟩ + ⟨σ_i, z_i⟩]`
/// versus
/// `Σ_{i≥j} τ E⟨f_i, y_i⟩ + E⟨y_J, p_J⟩`,
///
/// where `y_j = v` and `y_{i+1} = e^{τΔ_h}(y_i + τ g_i + σ_i δW_i)`, i.e.
/// `y = s0h(σ) + s1h(g) + e^{(·−t_j)Δ_h} v` with `g, σ` vanishing before `t_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranspositionResidual {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs − rhs|`.
    pub residual: f64,
    /// Standard error of `lhs − rhs`.
    pub residual_se: f64,
}

impl TranspositionResidual {
    /// Residual relative to the larger side; zero when both vanish.
    pub fn relative(&self) -> f64 {
        let scale = self.lhs.abs().max(self.rhs.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.residual / scale
        }
    }
}

/// Test processes of the transposition identity.
pub struct TestProcesses<'a> {
    pub g: &'a dyn AdaptedField,
    pub sigma: &'a dyn AdaptedField,
    /// Only its value at step `j` is used.
    pub v: &'a dyn AdaptedField,
}

pub fn transposition_residual(
    problem: &BspdeProblem<'_>,
    sol: &BackwardSolution,
    fem: &FemSystem,
    batch: &BrownianBatch,
    tests: &TestProcesses<'_>,
    j: usize,
) -> Result<TranspositionResidual> {
    check_grid(problem, batch)?;
    let grid = problem.grid;
    let (np, steps, n, tau) = (batch.n_paths(), grid.steps(), fem.dim(), grid.tau());
    if j > steps {
        return invalid(format!("step index {j} out of range 0..={steps}"));
    }
    check_dim("solution paths", sol.p.n_paths(), np)?;
    check_dim("solution dimension", sol.p.dim(), n)?;
    for (name, f) in [("g", tests.g), ("sigma", tests.sigma), ("v", tests.v)] {
        check_dim(name, f.dim(), n)?;
    }
    let probe = 16;
    check_adapted("g", tests.g, batch, j..=steps.saturating_sub(1), probe)?;
    check_adapted(
        "sigma",
        tests.sigma,
        batch,
        j..=steps.saturating_sub(1),
        probe,
    )?;
    check_adapted("v", tests.v, batch, j..=j, probe)?;

    let prop = SemigroupEvaluator::new(fem)?.propagator(tau)?;
    let driver = problem.driver.as_ref();
    let sides: Vec<(f64, f64)> = (0..np)
        .into_par_iter()
        .map(|path| {
            let view = PathView::of(batch, path);
            let mut y = vec![0.0; n];
            let mut g = vec![0.0; n];
            let mut s = vec![0.0; n];
            let mut f = vec![0.0; n];
            let mut tmp = vec![0.0; n];
            tests.v.eval(j, view, &mut y);
            let mut lhs = fem.mass_inner(&y, sol.p.get(path, j));
            let mut rhs = 0.0;
            for i in j..steps {
                tests.g.eval(i, view, &mut g);
                tests.sigma.eval(i, view, &mut s);
                let (pi, zi) = (sol.p.get(path, i), sol.z.get(path, i));
                lhs += tau * (fem.mass_inner(&g, pi) + fem.mass_inner(&s, zi));
                let ctx = DriverContext {
                    step: i,
                    t: grid.t(i),
                    path_index: path,
                    path: view,
                };
                driver.eval(&ctx, pi, zi, &mut f);
                rhs += tau * fem.mass_inner(&f, &y);
                let dw = view.increments[i];
                for k in 0..n {
                    y[k] += tau * g[k] + s[k] * dw;
                }
                prop.apply_in_place(&mut y, &mut tmp);
            }
            rhs += fem.mass_inner(&y, sol.p.get(path, steps));
            (lhs, rhs)
        })
        .collect();
    let lhs: Vec<f64> = sides.iter().map(|s| s.0).collect();
    let rhs: Vec<f64> = sides.iter().map(|s| s.1).collect();
    let diff: Vec<f64> = sides.iter().map(|s| s.0 - s.1).collect();
    let (l, _) = mean_se(&lhs);
    let (r, _) = mean_se(&rhs);
    let (d, se) = mean_se(&diff);
    Ok(TranspositionResidual {
        lhs: l,
        rhs: r,
        residual: d.abs(),
        residual_se: se,
    })
}

/// One mesh of a manufactured-solution convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ManufacturedRow {
    pub n_cells: usize,
    pub h: f64,
    pub norms: ErrorNorms,
    pub max_picard_iters: usize,
    pub seconds: f64,
}

/// Solves the manufactured family with `a(t) = 1 + slope·t` on each mesh,
/// all meshes sharing one noise batch, and streams the error norms.
pub fn manufactured_convergence(
    meshes: &[usize],
    grid: &TimeGrid,
    slope: f64,
    beta: f64,
    basis: &RegressionBasis,
    batch: &BrownianBatch,
) -> Result<Vec<ManufacturedRow>> {
    if meshes.is_empty() {
        return invalid("convergence study needs at least one mesh");
    }
    let mut rows = Vec::with_capacity(meshes.len());
    for &cells in meshes {
        let start = std::time::Instant::now();
        let fem = FemSystem::uniform(cells)?;
        let (problem, exact) = manufactured_problem(
            Arc::new(move |t| 1.0 + slope * t),
            Arc::new(move |_| slope),
            beta,
            &fem,
            grid,
        )?;
        let mut acc = ErrorAccumulator::new(&fem, batch, &exact);
        let diag = solve_backward_streaming(
            &problem,
            &fem,
            batch,
            basis,
            &PicardConfig::default(),
            &mut acc,
        )?;
        rows.push(ManufacturedRow {
            n_cells: cells,
            h: fem.mesh().h(),
            norms: acc.finish(),
            max_picard_iters: diag.picard_iters.iter().copied().max().unwrap_or(0),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}
