//! Stochastic linear-quadratic control with per-step neural policies.
//!
//! The control at `t_j` and interior node `x_i` is
//! `U_j(x_i) = Net_j(x_i, δW_0, ..., δW_{j−1})`, the state follows the
//! semi-implicit recursion of [`crate::forward`], and the loss is
//!
//! `L(U) = E[ ½ Σ_{j<J} τ ‖Y_j − Q_h y_d(t_j)‖² + ν/2 Σ_{j<J} τ ‖U_j‖² ]`.
//!
//! Gradients are exact for the discrete loss: with `B = M + τA`,
//! `a_j = 1 + τα0 + α2 δW_j`, `c_j = τα1 + α3 δW_j`, the reverse sweep
//! `r_{J−1} = 0`, `r_{j−1} = B⁻¹[τ M (Y_j − ŷ_j) + a_j M r_j]` gives
//! `∂L/∂U_j = ντ M U_j + c_j M r_j` per path.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::backward::{
    solve_backward_streaming, BackwardSink, BspdeProblem, Driver, DriverContext, ExtraRegressors,
    PicardConfig, Terminal,
};
use crate::error::{check_dim, invalid, Error, Result};
use crate::fem::{FemSystem, Mesh1D};
use crate::field::{AdaptedField, PathField, PathView};
use crate::forward::{solve_state, state_step, LinearSpdeCoeffs, StateBatch};
use crate::linalg::TridiagFactor;
use crate::mlp::{AdamConfig, AdamState, MlpNet, Precision};
use crate::rand_paths::{
    derive_seed, sample_brownian, sample_brownian_range, BrownianBatch, TimeGrid,
};
use crate::regression::RegressionBasis;
use crate::stats::{mean_se, observed_order, sqrt_mean_se};

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const INIT_STREAM: u64 = 0x696e_6974_0000;

/// Spatial profile of the tracking target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    Zero,
    Constant(f64),
    /// `x^exponent`; integrable on (0,1) for `exponent > −1/2` in L².
    Power(f64),
    /// `sin(πx)`.
    Sine,
}

impl Profile {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Profile::Zero => 0.0,
            Profile::Constant(c) => c,
            Profile::Power(e) => x.powf(e),
            Profile::Sine => (std::f64::consts::PI * x).sin(),
        }
    }
}

/// Time/noise factor of the tracking target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeFactor {
    One,
    /// `1 + W(t)²`.
    OnePlusWSquared,
}

impl TimeFactor {
    pub fn eval(&self, w: f64) -> f64 {
        match self {
            TimeFactor::One => 1.0,
            TimeFactor::OnePlusWSquared => 1.0 + w * w,
        }
    }
}

/// `y_d(t, x) = factor(W(t)) · profile(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSpec {
    pub profile: Profile,
    pub time: TimeFactor,
}

/// How the target enters the discrete loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetRepresentation {
    /// `Q_h y_d`, the L² projection (Gauss quadrature per cell).
    #[default]
    Projection,
    /// Nodal interpolant at interior nodes.
    Interpolation,
}

/// Mesh-independent description of an LQ problem with constant coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqSpec {
    pub horizon: f64,
    pub steps: usize,
    pub nu: f64,
    pub alphas: [f64; 4],
    pub target: TargetSpec,
    /// Gauss points per cell for projecting the target.
    pub quadrature: usize,
    pub representation: TargetRepresentation,
}

impl LqSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return invalid(format!("nu must be positive, got {}", self.nu));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return invalid(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.steps < 2 {
            return invalid(format!("need at least 2 time steps, got {}", self.steps));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return invalid("coefficients must be finite");
        }
        if self.quadrature < 1 {
            return invalid("quadrature order must be at least 1");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn coeffs(&self) -> LinearSpdeCoeffs {
        let [a0, a1, a2, a3] = self.alphas;
        LinearSpdeCoeffs::constant(a0, a1, a2, a3, self.steps)
    }

    /// Noise-free sub-case: `α2 = α3 = 0` and a deterministic target.
    pub fn is_deterministic(&self) -> bool {
        self.alphas[2] == 0.0 && self.alphas[3] == 0.0 && self.target.time == TimeFactor::One
    }
}

/// An [`LqSpec`] discretized on a uniform mesh.
#[derive(Debug, Clone)]
pub struct LqProblem {
    spec: LqSpec,
    fem: FemSystem,
    grid: TimeGrid,
    coeffs: LinearSpdeCoeffs,
    target_shape: Vec<f64>,
    factor: TridiagFactor,
}

impl LqProblem {
    pub fn new(spec: LqSpec, n_cells: usize) -> Result<Self> {
        spec.validate()?;
        let fem = FemSystem::uniform(n_cells)?;
        let grid = spec.grid()?;
        let profile = |x| spec.target.profile.eval(x);
        let target_shape = match spec.representation {
            TargetRepresentation::Projection => {
                fem.l2_project(profile, spec.quadrature)?.into_vec()
            }
            TargetRepresentation::Interpolation => fem.interpolate(profile).into_vec(),
        };
        if target_shape.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure(
                "target is not finite on the mesh".into(),
            ));
        }
        let factor = fem.implicit_factor(grid.tau())?;
        Ok(Self {
            coeffs: spec.coeffs(),
            spec,
            fem,
            grid,
            target_shape,
            factor,
        })
    }

    pub fn spec(&self) -> &LqSpec {
        &self.spec
    }

    pub fn fem(&self) -> &FemSystem {
        &self.fem
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn coeffs(&self) -> &LinearSpdeCoeffs {
        &self.coeffs
    }

    pub fn nu(&self) -> f64 {
        self.spec.nu
    }

    pub fn dim(&self) -> usize {
        self.fem.dim()
    }

    /// Discrete spatial profile of the target.
    pub fn target_shape(&self) -> &[f64] {
        &self.target_shape
    }

    /// `Q_h y_d(t_j)` given `W(t_j)`.
    pub fn target(&self, w: f64, out: &mut [f64]) {
        let c = self.spec.target.time.eval(w);
        for (o, s) in out.iter_mut().zip(&self.target_shape) {
            *o = c * s;
        }
    }

    fn check_batch(&self, batch: &BrownianBatch) -> Result<()> {
        let g = batch.grid();
        if g.steps() != self.grid.steps() || g.tau() != self.grid.tau() {
            return invalid("noise batch grid does not match the problem grid");
        }
        Ok(())
    }
}

/// Per-step policies `Net_j : R^{1+j} → R`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStack {
    nets: Vec<MlpNet>,
}

fn policy_widths(hidden: &[usize], j: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(1 + j);
    w.extend_from_slice(hidden);
    w.push(1);
    w
}

impl PolicyStack {
    /// He-initialized nets with the given hidden widths. The same seed gives
    /// the same initial nets on every mesh.
    pub fn new(hidden: &[usize], steps: usize, seed: u64, precision: Precision) -> Result<Self> {
        let nets = (0..steps)
            .map(|j| {
                MlpNet::init(
                    &policy_widths(hidden, j),
                    derive_seed(seed, INIT_STREAM, j as u64),
                )
                .map(|n| n.with_precision(precision))
            })
            .collect::<Result<_>>()?;
        Ok(Self { nets })
    }

    pub fn zeros(hidden: &[usize], steps: usize) -> Result<Self> {
        let nets = (0..steps)
            .map(|j| MlpNet::zeros(&policy_widths(hidden, j)))
            .collect::<Result<_>>()?;
        Ok(Self { nets })
    }

    pub fn from_nets(nets: Vec<MlpNet>) -> Result<Self> {
        for (j, n) in nets.iter().enumerate() {
            check_dim(&format!("input width of policy {j}"), n.input_dim(), 1 + j)?;
            check_dim(&format!("output width of policy {j}"), n.output_dim(), 1)?;
        }
        Ok(Self { nets })
    }

    pub fn steps(&self) -> usize {
        self.nets.len()
    }

    pub fn nets(&self) -> &[MlpNet] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [MlpNet] {
        &mut self.nets
    }

    pub fn n_params(&self) -> usize {
        self.nets.iter().map(MlpNet::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.nets.iter().flat_map(|n| n.params()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("policy parameters", params.len(), self.n_params())?;
        let mut o = 0;
        for n in &mut self.nets {
            let k = n.n_params();
            n.set_params(&params[o..o + k])?;
            o += k;
        }
        Ok(())
    }

    /// Concatenated net checkpoints after a `u64` net count.
    pub fn save<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.nets.len() as u64).to_le_bytes())?;
        for n in &self.nets {
            n.save(&mut w)?;
        }
        Ok(())
    }

    pub fn load<R: std::io::Read>(mut r: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let count = u64::from_le_bytes(buf);
        if count > 1 << 20 {
            return invalid(format!("policy checkpoint declares {count} nets"));
        }
        let nets = (0..count)
            .map(|_| MlpNet::load(&mut r))
            .collect::<Result<_>>()?;
        Self::from_nets(nets)
    }
}

/// Paths evaluated together in one matrix product.
const PATH_BLOCK: usize = 256;

/// `c ← alpha·a·b + beta·c` where each operand is `(data, row stride,
/// column stride)` and the shapes are `m × k`, `k × n`, `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(
        last(m, n, c.1, c.2) < c.0.len(),
        "gemm output out of bounds"
    );
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c.0[i * c.1 + j * c.2] *= beta;
            }
        }
        return;
    }
    assert!(
        last(m, k, a.1, a.2) < a.0.len() && last(k, n, b.1, b.2) < b.0.len(),
        "gemm input out of bounds"
    );
    // SAFETY: every index touched is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

fn finish_layer(prec: Precision, hidden: bool, h: &mut [f64]) {
    for v in h {
        if prec == Precision::F32 {
            *v = *v as f32 as f64;
        }
        if hidden && *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn bias_columns(b: &[f64], cols: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(b.len() * cols);
    for _ in 0..cols {
        m.extend_from_slice(b);
    }
    m
}

/// `out[r] += Σ_c m[r, c]` for a column-major `m` with `out.len()` rows.
fn add_column_sums(m: &[f64], out: &mut [f64]) {
    for col in m.chunks(out.len()) {
        for (o, v) in out.iter_mut().zip(col) {
            *o += v;
        }
    }
}

/// Increments `δW_0..δW_{j−1}` of a block of paths as a strided `j × paths`
/// operand, read in place from the batch.
struct NoiseBlock<'a> {
    data: &'a [f64],
    stride: usize,
    j: usize,
    paths: usize,
}

impl<'a> NoiseBlock<'a> {
    fn new(batch: &'a BrownianBatch, paths: std::ops::Range<usize>, j: usize) -> Self {
        let stride = batch.grid().steps();
        Self {
            data: &batch.increments()[paths.start * stride..],
            stride,
            j,
            paths: paths.len(),
        }
    }
}

/// Net `j` applied to every (path, node) pair of a block of paths. Matrices
/// are column-major with one column per pair, path-major.
struct BlockForward {
    /// Output of each layer, `n_out × (paths · nodes)`.
    acts: Vec<Vec<f64>>,
}

impl BlockForward {
    fn run(net: &MlpNet, nodes: &[f64], noise: &NoiseBlock<'_>) -> Self {
        let prec = net.precision();
        let layers = net.layers();
        let last = layers.len() - 1;
        let (n, paths) = (nodes.len(), noise.paths);
        let l0 = &layers[0];
        let mut shared = bias_columns(&l0.b, paths);
        gemm(
            l0.n_out,
            noise.j,
            paths,
            1.0,
            (&l0.w[1.min(l0.w.len())..], l0.n_in, 1),
            (noise.data, 1, noise.stride),
            1.0,
            (&mut shared, 1, l0.n_out),
        );
        let mut h = vec![0.0; l0.n_out * paths * n];
        for (cols, base) in h.chunks_mut(l0.n_out * n).zip(shared.chunks(l0.n_out)) {
            for (col, &x) in cols.chunks_mut(l0.n_out).zip(nodes) {
                for (r, o) in col.iter_mut().enumerate() {
                    *o = base[r] + l0.w[r * l0.n_in] * x;
                }
            }
        }
        finish_layer(prec, last > 0, &mut h);
        let mut acts = Vec::with_capacity(layers.len());
        acts.push(h);
        for (li, l) in layers.iter().enumerate().skip(1) {
            let mut h = bias_columns(&l.b, paths * n);
            gemm(
                l.n_out,
                l.n_in,
                paths * n,
                1.0,
                (&l.w, l.n_in, 1),
                (&acts[li - 1], 1, l.n_in),
                1.0,
                (&mut h, 1, l.n_out),
            );
            finish_layer(prec, li < last, &mut h);
            acts.push(h);
        }
        Self { acts }
    }

    fn output(&self) -> &[f64] {
        self.acts.last().expect("net has layers")
    }

    /// Accumulates the parameter gradient of `Σ_cols upstream[col] · out[col]`
    /// into `grad` (layout of [`MlpNet::params`]).
    fn backward(
        &self,
        net: &MlpNet,
        nodes: &[f64],
        noise: &NoiseBlock<'_>,
        upstream: Vec<f64>,
        grad: &mut [f64],
    ) {
        let layers = net.layers();
        let (n, paths) = (nodes.len(), noise.paths);
        let cols = n * paths;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut o = 0;
        for l in layers {
            offsets.push(o);
            o += l.n_params();
        }
        let mut delta = upstream;
        for li in (1..layers.len()).rev() {
            let l = &layers[li];
            let input = &self.acts[li - 1];
            let (gw, gb) = grad[offsets[li]..offsets[li] + l.n_params()].split_at_mut(l.w.len());
            gemm(
                l.n_out,
                cols,
                l.n_in,
                1.0,
                (&delta, 1, l.n_out),
                (input, l.n_in, 1),
                1.0,
                (gw, l.n_in, 1),
            );
            add_column_sums(&delta, gb);
            let mut prev = vec![0.0; l.n_in * cols];
            gemm(
                l.n_in,
                l.n_out,
                cols,
                1.0,
                (&l.w, 1, l.n_in),
                (&delta, 1, l.n_out),
                0.0,
                (&mut prev, 1, l.n_in),
            );
            for (d, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = prev;
        }
        let l0 = &layers[0];
        let mut per_path = vec![0.0; l0.n_out * paths];
        let mut gx = vec![0.0; l0.n_out];
        for (cols, acc) in delta
            .chunks(l0.n_out * n)
            .zip(per_path.chunks_mut(l0.n_out))
        {
            for (col, &x) in cols.chunks(l0.n_out).zip(nodes) {
                for ((a, g), d) in acc.iter_mut().zip(gx.iter_mut()).zip(col) {
                    *a += d;
                    *g += d * x;
                }
            }
        }
        let (gw, gb) = grad[..l0.n_params()].split_at_mut(l0.w.len());
        add_column_sums(&per_path, gb);
        for r in 0..l0.n_out {
            gw[r * l0.n_in] += gx[r];
        }
        gemm(
            l0.n_out,
            paths,
            noise.j,
            1.0,
            (&per_path, 1, l0.n_out),
            (noise.data, noise.stride, 1),
            1.0,
            (&mut gw[1.min(l0.w.len())..], l0.n_in, 1),
        );
    }
}

fn path_blocks(n_paths: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n_paths)
        .step_by(PATH_BLOCK)
        .map(move |s| s..(s + PATH_BLOCK).min(n_paths))
}

/// `U_j(x_i) = Net_j(x_i, δW_0, ..., δW_{j−1})` on every path.
pub fn eval_policy(
    stack: &PolicyStack,
    fem: &FemSystem,
    batch: &BrownianBatch,
) -> Result<PathField> {
    let steps = batch.grid().steps();
    check_dim("policy stack length", stack.steps(), steps)?;
    let nodes = fem.mesh().interior_nodes();
    let n = nodes.len();
    let np = batch.n_paths();
    let per_step: Vec<Vec<f64>> = stack
        .nets
        .par_iter()
        .enumerate()
        .map(|(j, net)| {
            let mut out = Vec::with_capacity(np * n);
            for block in path_blocks(np) {
                let fw = BlockForward::run(net, &nodes, &NoiseBlock::new(batch, block, j));
                out.extend_from_slice(fw.output());
            }
            out
        })
        .collect();
    let mut u = PathField::zeros(np, steps, n);
    for (j, vals) in per_step.iter().enumerate() {
        for p in 0..np {
            u.get_mut(p, j).copy_from_slice(&vals[p * n..(p + 1) * n]);
        }
    }
    Ok(u)
}

/// Loss split into its two terms (Monte Carlo means over the batch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub tracking: f64,
    pub penalty: f64,
}

fn path_loss(
    problem: &LqProblem,
    batch: &BrownianBatch,
    p: usize,
    u: &PathField,
    y: &StateBatch,
) -> (f64, f64) {
    let (tau, n) = (problem.grid.tau(), problem.dim());
    let fem = &problem.fem;
    let mut target = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let (mut track, mut pen) = (0.0, 0.0);
    for j in 0..problem.grid.steps() {
        problem.target(batch.w(p, j), &mut target);
        for ((d, yv), t) in diff.iter_mut().zip(y.get(p, j)).zip(&target) {
            *d = yv - t;
        }
        track += 0.5 * tau * fem.mass_inner(&diff, &diff);
        let uj = u.get(p, j);
        pen += 0.5 * problem.nu() * tau * fem.mass_inner(uj, uj);
    }
    (track, pen)
}

/// Loss of a given control field on `batch`.
pub fn loss(problem: &LqProblem, u: &PathField, batch: &BrownianBatch) -> Result<LossBreakdown> {
    problem.check_batch(batch)?;
    let y = solve_state(
        &problem.fem,
        &problem.grid,
        &problem.coeffs,
        u,
        batch,
        &vec![0.0; problem.dim()],
    )?;
    let parts: Vec<(f64, f64)> = (0..batch.n_paths())
        .map(|p| path_loss(problem, batch, p, u, &y))
        .collect();
    let np = batch.n_paths() as f64;
    let tracking = parts.iter().map(|x| x.0).sum::<f64>() / np;
    let penalty = parts.iter().map(|x| x.1).sum::<f64>() / np;
    Ok(LossBreakdown {
        total: tracking + penalty,
        tracking,
        penalty,
    })
}

/// Loss and its gradient with respect to the nodal control values
/// (`n_paths × J × dim`, already divided by the path count).
pub fn control_gradient(
    problem: &LqProblem,
    u: &PathField,
    batch: &BrownianBatch,
) -> Result<(LossBreakdown, PathField, StateBatch)> {
    problem.check_batch(batch)?;
    let (n, steps, tau) = (problem.dim(), problem.grid.steps(), problem.grid.tau());
    let y = solve_state(
        &problem.fem,
        &problem.grid,
        &problem.coeffs,
        u,
        batch,
        &vec![0.0; n],
    )?;
    let np = batch.n_paths();
    let scale = 1.0 / np as f64;
    let mut grad = PathField::zeros(np, steps, n);
    let fem = &problem.fem;
    let c = &problem.coeffs;
    grad.as_mut_slice()
        .par_chunks_mut(steps * n)
        .enumerate()
        .for_each(|(p, gp)| {
            let mut r = vec![0.0; n];
            let mut mr = vec![0.0; n];
            let mut mu = vec![0.0; n];
            let mut target = vec![0.0; n];
            let mut diff = vec![0.0; n];
            for j in (0..steps).rev() {
                let dw = batch.increment(p, j);
                let a = 1.0 + tau * c.alpha0[j] + c.alpha2[j] * dw;
                let cj = tau * c.alpha1[j] + c.alpha3[j] * dw;
                fem.mass().mul_vec(&r, &mut mr);
                fem.mass().mul_vec(u.get(p, j), &mut mu);
                for i in 0..n {
                    gp[j * n + i] = scale * (problem.nu() * tau * mu[i] + cj * mr[i]);
                }
                problem.target(batch.w(p, j), &mut target);
                for ((d, yv), t) in diff.iter_mut().zip(y.get(p, j)).zip(&target) {
                    *d = yv - t;
                }
                fem.mass().mul_vec(&diff, &mut mu);
                for i in 0..n {
                    r[i] = tau * mu[i] + a * mr[i];
                }
                problem.factor.solve_in_place(&mut r);
            }
        });
    let parts: Vec<(f64, f64)> = (0..np)
        .map(|p| path_loss(problem, batch, p, u, &y))
        .collect();
    let tracking = parts.iter().map(|x| x.0).sum::<f64>() * scale;
    let penalty = parts.iter().map(|x| x.1).sum::<f64>() * scale;
    Ok((
        LossBreakdown {
            total: tracking + penalty,
            tracking,
            penalty,
        },
        grad,
        y,
    ))
}

/// Loss and its gradient with respect to every policy parameter, in the
/// layout of [`PolicyStack::params`].
pub fn loss_and_gradient(
    problem: &LqProblem,
    stack: &PolicyStack,
    batch: &BrownianBatch,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let u = eval_policy(stack, &problem.fem, batch)?;
    let (l, gu, _) = control_gradient(problem, &u, batch)?;
    let nodes = problem.fem.mesh().interior_nodes();
    let n = nodes.len();
    let per_net: Vec<Vec<f64>> = stack
        .nets
        .par_iter()
        .enumerate()
        .map(|(j, net)| {
            let mut g = vec![0.0; net.n_params()];
            for block in path_blocks(batch.n_paths()) {
                let first = block.start;
                let mut up = vec![0.0; block.len() * n];
                for (p, chunk) in up.chunks_mut(n).enumerate() {
                    chunk.copy_from_slice(gu.get(first + p, j));
                }
                let noise = NoiseBlock::new(batch, block, j);
                let fw = BlockForward::run(net, &nodes, &noise);
                fw.backward(net, &nodes, &noise, up, &mut g);
            }
            g
        })
        .collect();
    Ok((l, per_net.concat()))
}

/// Training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate reached at the last iteration by geometric decay.
    pub lr_final: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return invalid("training needs positive iteration and batch counts");
        }
        if !(self.adam.lr > 0.0) || self.lr_final.is_some_and(|l| !(l > 0.0)) {
            return invalid("learning rates must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, it: usize) -> f64 {
        match self.lr_final {
            Some(end) if self.iterations > 1 => {
                let s = it as f64 / (self.iterations - 1) as f64;
                self.adam.lr * (end / self.adam.lr).powf(s)
            }
            _ => self.adam.lr,
        }
    }
}

/// Brownian batch used at training iteration `it`.
pub fn training_batch(grid: &TimeGrid, cfg: &TrainConfig, it: usize) -> Result<BrownianBatch> {
    sample_brownian(
        grid,
        cfg.batch_size,
        derive_seed(cfg.seed, TRAIN_STREAM, it as u64),
        false,
    )
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub stack: PolicyStack,
    pub losses: Vec<f64>,
}

/// Adam on the exact per-batch gradient, a fresh batch per iteration.
pub fn train(problem: &LqProblem, stack: PolicyStack, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    check_dim("policy stack length", stack.steps(), problem.grid.steps())?;
    let mut stack = stack;
    let mut params = stack.params();
    let mut adam = AdamState::new(params.len(), cfg.adam);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = training_batch(&problem.grid, cfg, it)?;
        let (l, g) = loss_and_gradient(problem, &stack, &batch)?;
        if !l.total.is_finite() {
            return Err(Error::NumericFailure(format!(
                "non-finite loss at iteration {it}"
            )));
        }
        losses.push(l.total);
        adam.step_with_lr(&mut params, &g, cfg.lr_at(it))
            .map_err(|e| match e {
                Error::NumericFailure(m) => Error::NumericFailure(format!("iteration {it}: {m}")),
                other => other,
            })?;
        stack.set_params(&params)?;
        params = stack.params();
    }
    Ok(TrainResult { stack, losses })
}

/// A single noise-free path on the problem grid.
pub fn zero_noise_batch(grid: &TimeGrid, n_paths: usize) -> Result<BrownianBatch> {
    BrownianBatch::from_increments(*grid, n_paths, vec![0.0; n_paths * grid.steps()], 0)
}

/// Discrete optimal control of the noise-free sub-case by conjugate
/// gradients on the exact discrete gradient. Returns `J` nodal vectors.
pub fn solve_deterministic(
    problem: &LqProblem,
    rel_tol: f64,
    max_iters: usize,
) -> Result<Vec<Vec<f64>>> {
    if !problem.spec.is_deterministic() {
        return invalid("deterministic solve needs alpha2 = alpha3 = 0 and a deterministic target");
    }
    let (n, steps) = (problem.dim(), problem.grid.steps());
    let batch = zero_noise_batch(&problem.grid, 1)?;
    let grad_at =
        |u: &PathField| -> Result<PathField> { Ok(control_gradient(problem, u, &batch)?.1) };
    let dot = |a: &PathField, b: &PathField| {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| x * y)
            .sum::<f64>()
    };
    let zero = PathField::zeros(1, steps, n);
    let g0 = grad_at(&zero)?;
    let g0n = dot(&g0, &g0).sqrt();
    let mut u = zero.clone();
    let mut g = g0.clone();
    let mut d = zero.add_scaled(-1.0, &g0)?;
    for _ in 0..max_iters {
        if dot(&g, &g).sqrt() <= rel_tol * g0n {
            break;
        }
        // H d = ∇L(d) − ∇L(0) for a quadratic loss
        let hd = grad_at(&d)?.add_scaled(-1.0, &g0)?;
        let dhd = dot(&d, &hd);
        if !(dhd > 0.0) {
            return Err(Error::NumericFailure(format!(
                "loss Hessian not positive along search direction ({dhd})"
            )));
        }
        let gg = dot(&g, &g);
        let alpha = gg / dhd;
        u = u.add_scaled(alpha, &d)?;
        g = g.add_scaled(alpha, &hd)?;
        let beta = dot(&g, &g) / gg;
        d = zero.add_scaled(-1.0, &g)?.add_scaled(beta, &d)?;
    }
    Ok((0..steps).map(|j| u.get(0, j).to_vec()).collect())
}

/// Which adjoint value is paired with the control in the optimality and
/// duality checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdjointPairing {
    /// `q_j = E_j[p_{j+1}]`, which is what the exact discrete gradient uses.
    #[default]
    Conditional,
    /// `p_j` itself.
    Current,
}

/// Driver `f(t_j, p, z) = α0 p + s_j + α2 z` where `s_j` is a per-path source.
struct SourceDriver<'a> {
    alpha0: &'a [f64],
    alpha2: &'a [f64],
    source: &'a (dyn Fn(usize, usize, PathView<'_>, &mut [f64]) + Sync),
}

impl Driver for SourceDriver<'_> {
    fn lipschitz(&self) -> f64 {
        let m0 = self.alpha0.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let m2 = self.alpha2.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        m0 + m2
    }

    fn eval(&self, ctx: &DriverContext<'_>, p: &[f64], z: &[f64], out: &mut [f64]) {
        (self.source)(ctx.step, ctx.path_index, ctx.path, out);
        let (a0, a2) = (self.alpha0[ctx.step], self.alpha2[ctx.step]);
        for i in 0..out.len() {
            out[i] += a0 * p[i] + a2 * z[i];
        }
    }
}

struct ZeroTerminal;

impl Terminal for ZeroTerminal {
    fn eval(&self, _: usize, _: PathView<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }
}

struct StateRegressors<'a>(&'a StateBatch);

impl ExtraRegressors for StateRegressors<'_> {
    fn dim(&self) -> usize {
        self.0.values.dim()
    }

    fn eval(&self, step: usize, path_index: usize, out: &mut [f64]) {
        out.copy_from_slice(self.0.get(path_index, step));
    }
}

/// Collects `Σ_j τ E⟨α1 P_j + α3 Z_j, V_j⟩`-type sums while the backward
/// solver runs, where `P_j` is `q_j` or `p_j` per the pairing.
struct PairingSink<F: FnMut(usize, usize, &[f64], &[f64])> {
    pairing: AdjointPairing,
    n: usize,
    n_paths: usize,
    visit: F,
}

impl<F: FnMut(usize, usize, &[f64], &[f64])> BackwardSink for PairingSink<F> {
    fn accept(
        &mut self,
        step: usize,
        p: &[f64],
        z: Option<&[f64]>,
        q: Option<&[f64]>,
    ) -> Result<()> {
        let (Some(z), Some(q)) = (z, q) else {
            return Ok(());
        };
        let adj = match self.pairing {
            AdjointPairing::Conditional => q,
            AdjointPairing::Current => p,
        };
        let n = self.n;
        for path in 0..self.n_paths {
            let r = path * n..(path + 1) * n;
            (self.visit)(step, path, &adj[r.clone()], &z[r]);
        }
        Ok(())
    }
}

/// `‖U + ν⁻¹(α1 P + α3 Z)‖_{L²(0,T;H)}` and its ratio to `‖U‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalityResidual {
    pub residual: f64,
    pub residual_se: f64,
    pub control_norm: f64,
    /// `residual / control_norm`, or `residual` when the control vanishes.
    pub relative: f64,
}

/// Optimality residual of a control field: the adjoint pair solves the
/// backward equation with driver `α0 p + (Y − Q_h y_d) + α2 z` and zero
/// terminal value, regressing on `W(t_j)` and the state `Y_j`.
pub fn optimality_residual(
    problem: &LqProblem,
    u: &PathField,
    batch: &BrownianBatch,
    basis: &RegressionBasis,
    pairing: AdjointPairing,
) -> Result<OptimalityResidual> {
    problem.check_batch(batch)?;
    let (n, np, tau) = (problem.dim(), batch.n_paths(), problem.grid.tau());
    let state = solve_state(
        &problem.fem,
        &problem.grid,
        &problem.coeffs,
        u,
        batch,
        &vec![0.0; n],
    )?;
    let source = |step: usize, path: usize, view: PathView<'_>, out: &mut [f64]| {
        problem.target(view.cumulative[step], out);
        for (o, y) in out.iter_mut().zip(state.get(path, step)) {
            *o = y - *o;
        }
    };
    let driver = SourceDriver {
        alpha0: &problem.coeffs.alpha0,
        alpha2: &problem.coeffs.alpha2,
        source: &source,
    };
    let bsp = BspdeProblem {
        driver: Box::new(driver),
        terminal: Box::new(ZeroTerminal),
        grid: problem.grid,
        extra: Some(Box::new(StateRegressors(&state))),
    };
    let mut res = vec![0.0; np];
    let mut unorm = vec![0.0; np];
    let fem = &problem.fem;
    let c = &problem.coeffs;
    let nu = problem.nu();
    let mut sink = PairingSink {
        pairing,
        n,
        n_paths: np,
        visit: |j: usize, path: usize, adj: &[f64], z: &[f64]| {
            let uj = u.get(path, j);
            let r: Vec<f64> = (0..n)
                .map(|i| uj[i] + (c.alpha1[j] * adj[i] + c.alpha3[j] * z[i]) / nu)
                .collect();
            res[path] += tau * fem.mass_inner(&r, &r);
            unorm[path] += tau * fem.mass_inner(uj, uj);
        },
    };
    solve_backward_streaming(&bsp, fem, batch, basis, &PicardConfig::default(), &mut sink)?;
    drop(sink);
    let (residual, residual_se) = sqrt_mean_se(&res);
    let (control_norm, _) = sqrt_mean_se(&unorm);
    let relative = if control_norm > 0.0 {
        residual / control_norm
    } else {
        residual
    };
    Ok(OptimalityResidual {
        residual,
        residual_se,
        control_norm,
        relative,
    })
}

/// Both sides of the duality identity
/// `Σ_j τ E⟨α1 P_j + α3 Z_j, v_j⟩ = Σ_j τ E⟨g_j, y_j⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityGap {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs − rhs| / max(|lhs|, |rhs|, floor)`.
    pub gap: f64,
}

/// Floor of the duality-gap denominator.
pub const DUALITY_FLOOR: f64 = 1e-14;

/// Duality check: `(p, z)` solves the backward equation with driver
/// `α0 p + g + α2 z` and zero terminal value; `y` solves the state equation
/// with control `v` and `y(0) = 0`.
#[allow(clippy::too_many_arguments)]
pub fn duality_check(
    fem: &FemSystem,
    grid: &TimeGrid,
    coeffs: &LinearSpdeCoeffs,
    g: &dyn AdaptedField,
    v: &dyn AdaptedField,
    batch: &BrownianBatch,
    basis: &RegressionBasis,
    pairing: AdjointPairing,
) -> Result<DualityGap> {
    let (n, np, steps, tau) = (fem.dim(), batch.n_paths(), grid.steps(), grid.tau());
    check_dim("g dimension", g.dim(), n)?;
    check_dim("v dimension", v.dim(), n)?;
    coeffs.validate(steps)?;
    crate::field::check_adapted("g", g, batch, 0..=steps - 1, 16)?;
    crate::field::check_adapted("v", v, batch, 0..=steps - 1, 16)?;
    let vf = PathField::sample(v, batch, steps);
    let y = solve_state(fem, grid, coeffs, &vf, batch, &vec![0.0; n])?;
    let source =
        |step: usize, _path: usize, view: PathView<'_>, out: &mut [f64]| g.eval(step, view, out);
    let bsp = BspdeProblem {
        driver: Box::new(SourceDriver {
            alpha0: &coeffs.alpha0,
            alpha2: &coeffs.alpha2,
            source: &source,
        }),
        terminal: Box::new(ZeroTerminal),
        grid: *grid,
        extra: None,
    };
    let mut lhs = vec![0.0; np];
    let mut sink = PairingSink {
        pairing,
        n,
        n_paths: np,
        visit: |j: usize, path: usize, adj: &[f64], z: &[f64]| {
            let w: Vec<f64> = (0..n)
                .map(|i| coeffs.alpha1[j] * adj[i] + coeffs.alpha3[j] * z[i])
                .collect();
            lhs[path] += tau * fem.mass_inner(&w, vf.get(path, j));
        },
    };
    solve_backward_streaming(&bsp, fem, batch, basis, &PicardConfig::default(), &mut sink)?;
    drop(sink);
    let mut gj = vec![0.0; n];
    let rhs: Vec<f64> = (0..np)
        .map(|p| {
            let view = PathView::of(batch, p);
            (0..steps)
                .map(|j| {
                    g.eval(j, view, &mut gj);
                    tau * fem.mass_inner(&gj, y.get(p, j))
                })
                .sum()
        })
        .collect();
    let (l, _) = mean_se(&lhs);
    let (r, _) = mean_se(&rhs);
    let gap = (l - r).abs() / l.abs().max(r.abs()).max(DUALITY_FLOOR);
    Ok(DualityGap {
        lhs: l,
        rhs: r,
        gap,
    })
}

/// Linear interpolation table from a coarse to a nested fine mesh.
struct Prolongation {
    /// `(coarse index or usize::MAX for the boundary, weight)` twice per fine node.
    taps: Vec<[(usize, f64); 2]>,
}

impl Prolongation {
    fn new(coarse: &Mesh1D, fine: &Mesh1D) -> Result<Self> {
        if fine.n_cells() % coarse.n_cells() != 0 {
            return invalid("fine mesh is not a refinement of the coarse mesh");
        }
        let r = fine.n_cells() / coarse.n_cells();
        let taps = (0..fine.dim())
            .map(|i| {
                let k = i + 1; // fine node index including boundary
                let c = k / r;
                let frac = (k % r) as f64 / r as f64;
                let idx = |node: usize| {
                    if node == 0 || node == coarse.n_cells() {
                        usize::MAX
                    } else {
                        node - 1
                    }
                };
                [
                    (idx(c), 1.0 - frac),
                    (idx((c + 1).min(coarse.n_cells())), frac),
                ]
            })
            .collect();
        Ok(Self { taps })
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.taps) {
            let mut s = 0.0;
            for &(i, w) in t {
                if i != usize::MAX && w != 0.0 {
                    s += w * u[i];
                }
            }
            *o = s;
        }
    }
}

/// One row of a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n_cells: usize,
    pub h: f64,
    pub u_err: f64,
    pub u_err_se: f64,
    pub y_err: f64,
    pub y_err_se: f64,
    /// `log2(e_{2h}/e_h)` against the previous row.
    pub u_order: Option<f64>,
    pub y_order: Option<f64>,
    /// Mean loss over the last 10% of training iterations.
    pub final_loss: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub reference_n_cells: usize,
    pub reference_final_loss: f64,
    pub eval_paths: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub u_monotone: bool,
    pub y_monotone: bool,
    pub eval_seconds: f64,
}

/// Settings of a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    /// Study meshes as cell counts, coarse to fine.
    pub meshes: Vec<usize>,
    pub reference: usize,
    pub hidden: Vec<usize>,
    pub precision: Precision,
    pub train: TrainConfig,
    pub eval_paths: usize,
    pub eval_seed: u64,
    pub eval_chunk: usize,
}

fn trailing_mean(losses: &[f64]) -> f64 {
    let k = (losses.len() / 10).max(1).min(losses.len());
    losses[losses.len() - k..].iter().sum::<f64>() / k as f64
}

/// Trains one policy stack per mesh (same initialization seed and training
/// batches on every mesh) and measures `‖Ū − U*‖` and `‖Ȳ − Y*‖` in
/// `L²(0,T;H)` on a separate evaluation stream, with `U*` trained on the
/// reference mesh. Coarse functions are compared on the reference mesh.
pub fn convergence_study(spec: &LqSpec, cfg: &StudyConfig) -> Result<ConvergenceReport> {
    spec.validate()?;
    cfg.train.validate()?;
    if cfg.meshes.is_empty() {
        return invalid("convergence study needs at least one mesh");
    }
    if cfg.eval_paths == 0 || cfg.eval_chunk == 0 {
        return invalid("evaluation needs positive path and chunk counts");
    }
    for &m in &cfg.meshes {
        if m >= cfg.reference || cfg.reference % m != 0 {
            return invalid(format!(
                "reference mesh ({} cells) must strictly refine every study mesh ({m} cells)",
                cfg.reference
            ));
        }
    }
    let train_one = |n_cells: usize| -> Result<(LqProblem, PolicyStack, f64, f64)> {
        let t0 = Instant::now();
        let problem = LqProblem::new(*spec, n_cells)?;
        let init = PolicyStack::new(&cfg.hidden, spec.steps, cfg.train.seed, cfg.precision)?;
        let res = train(&problem, init, &cfg.train)?;
        Ok((
            problem,
            res.stack,
            trailing_mean(&res.losses),
            t0.elapsed().as_secs_f64(),
        ))
    };
    let (ref_problem, ref_stack, ref_loss, _) = train_one(cfg.reference)?;
    let mut trained = Vec::with_capacity(cfg.meshes.len());
    for &m in &cfg.meshes {
        trained.push(train_one(m)?);
    }
    let t_eval = Instant::now();
    let (u_sq, y_sq) = evaluate_against_reference(
        &ref_problem,
        &ref_stack,
        &trained.iter().map(|t| (&t.0, &t.1)).collect::<Vec<_>>(),
        cfg.eval_paths,
        cfg.eval_seed,
        cfg.eval_chunk,
    )?;
    let eval_seconds = t_eval.elapsed().as_secs_f64();
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(cfg.meshes.len());
    for (k, (problem, _, final_loss, secs)) in trained.iter().enumerate() {
        let (u_err, u_err_se) = sqrt_mean_se(&u_sq[k]);
        let (y_err, y_err_se) = sqrt_mean_se(&y_sq[k]);
        let (u_order, y_order) = match rows.last() {
            Some(prev) => (
                Some(observed_order(prev.u_err, u_err)),
                Some(observed_order(prev.y_err, y_err)),
            ),
            None => (None, None),
        };
        rows.push(ConvergenceRow {
            n_cells: problem.fem.mesh().n_cells(),
            h: problem.fem.mesh().h(),
            u_err,
            u_err_se,
            y_err,
            y_err_se,
            u_order,
            y_order,
            final_loss: *final_loss,
            train_seconds: *secs,
        });
    }
    let u_monotone = rows.windows(2).all(|w| w[1].u_err < w[0].u_err);
    let y_monotone = rows.windows(2).all(|w| w[1].y_err < w[0].y_err);
    Ok(ConvergenceReport {
        rows,
        reference_n_cells: cfg.reference,
        reference_final_loss: ref_loss,
        eval_paths: cfg.eval_paths,
        train_seed: cfg.train.seed,
        eval_seed: cfg.eval_seed,
        u_monotone,
        y_monotone,
        eval_seconds,
    })
}

/// Per-path `Σ_j τ ‖Ū_j − U*_j‖²` and `Σ_j τ ‖Ȳ_j − Y*_j‖²` on the
/// reference mesh for each study policy, streamed over chunks of paths.
pub fn evaluate_against_reference(
    reference: &LqProblem,
    ref_stack: &PolicyStack,
    studies: &[(&LqProblem, &PolicyStack)],
    eval_paths: usize,
    eval_seed: u64,
    chunk: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let grid = reference.grid;
    let nf = reference.dim();
    let prolong = studies
        .iter()
        .map(|(p, _)| Prolongation::new(p.fem.mesh(), reference.fem.mesh()))
        .collect::<Result<Vec<_>>>()?;
    let mut u_sq = vec![Vec::with_capacity(eval_paths); studies.len()];
    let mut y_sq = vec![Vec::with_capacity(eval_paths); studies.len()];
    let tau = grid.tau();
    let mut first = 0;
    while first < eval_paths {
        let len = chunk.min(eval_paths - first);
        let batch = sample_brownian_range(&grid, first, len, eval_seed, false)?;
        let (u_ref, y_ref) = simulate(reference, ref_stack, &batch)?;
        for (k, (problem, stack)) in studies.iter().enumerate() {
            let (u, y) = simulate(problem, stack, &batch)?;
            let errs: Vec<(f64, f64)> = (0..len)
                .into_par_iter()
                .map(|p| {
                    let mut fine = vec![0.0; nf];
                    let mut diff = vec![0.0; nf];
                    let (mut eu, mut ey) = (0.0, 0.0);
                    for j in 0..grid.steps() {
                        prolong[k].apply(u.get(p, j), &mut fine);
                        for ((d, a), b) in diff.iter_mut().zip(&fine).zip(u_ref.get(p, j)) {
                            *d = a - b;
                        }
                        eu += tau * reference.fem.mass_inner(&diff, &diff);
                        prolong[k].apply(y.get(p, j), &mut fine);
                        for ((d, a), b) in diff.iter_mut().zip(&fine).zip(y_ref.get(p, j)) {
                            *d = a - b;
                        }
                        ey += tau * reference.fem.mass_inner(&diff, &diff);
                    }
                    (eu, ey)
                })
                .collect();
            u_sq[k].extend(errs.iter().map(|e| e.0));
            y_sq[k].extend(errs.iter().map(|e| e.1));
        }
        first += len;
    }
    Ok((u_sq, y_sq))
}

/// Control and state of a policy on a batch.
pub fn simulate(
    problem: &LqProblem,
    stack: &PolicyStack,
    batch: &BrownianBatch,
) -> Result<(PathField, PathField)> {
    let u = eval_policy(stack, &problem.fem, batch)?;
    let y = solve_state(
        &problem.fem,
        &problem.grid,
        &problem.coeffs,
        &u,
        batch,
        &vec![0.0; problem.dim()],
    )?;
    Ok((u, y.values))
}

/// `‖U‖_{L²(0,T;H)}` Monte Carlo estimate with standard error.
pub fn control_norm(problem: &LqProblem, u: &PathField) -> (f64, f64) {
    let tau = problem.grid.tau();
    let per: Vec<f64> = (0..u.n_paths())
        .map(|p| {
            (0..u.n_steps())
                .map(|j| tau * problem.fem.mass_inner(u.get(p, j), u.get(p, j)))
                .sum()
        })
        .collect();
    sqrt_mean_se(&per)
}

/// Replays the state recursion of one path step by step; used to check the
/// bulk solver.
pub fn state_path(
    problem: &LqProblem,
    u: &PathField,
    batch: &BrownianBatch,
    p: usize,
) -> Vec<Vec<f64>> {
    let n = problem.dim();
    let mut y = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut out = vec![y.clone()];
    for j in 0..problem.grid.steps() {
        state_step(
            &problem.fem,
            &problem.factor,
            &problem.coeffs,
            j,
            problem.grid.tau(),
            batch.increment(p, j),
            &mut y,
            u.get(p, j),
            &mut scratch,
        );
        out.push(y.clone());
    }
    out
}

/// Shared handle for passing problems across threads in the harness.
pub type SharedProblem = Arc<LqProblem>;
