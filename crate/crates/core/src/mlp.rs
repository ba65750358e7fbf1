//! Dense feedforward networks with ReLU hidden layers and an identity
//! output layer, reverse-mode gradients, and Adam.
//!
//! Parameters are flattened layer by layer: the weight matrix in row-major
//! order (`out × in`) followed by the bias vector. Checkpoints use the same
//! order after a header of little-endian `u64`s: the number of widths, then
//! the widths. All floats are little-endian `f64`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, invalid, Error, Result};

/// Arithmetic used in forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    /// Activations and parameters rounded to `f32` after every operation.
    F32,
}

impl Precision {
    #[inline]
    fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }
}

/// One affine layer, `y = W x + b` with `W` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    widths: Vec<usize>,
    layers: Vec<Layer>,
    precision: Precision,
}

/// Activations recorded by [`MlpNet::forward_cached`]: `acts[0]` is the
/// input and `acts[l+1]` the output of layer `l` (after ReLU on hidden layers).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache has an input layer")
    }
}

/// Gradients of `upstream · net(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as [`MlpNet::params`].
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return invalid("network needs at least an input and an output width");
    }
    if let Some(i) = widths.iter().position(|&w| w == 0) {
        return invalid(format!("network width {i} is zero"));
    }
    Ok(())
}

impl MlpNet {
    /// All parameters zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        validate_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                n_in: w[0],
                n_out: w[1],
                w: vec![0.0; w[0] * w[1]],
                b: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            precision: Precision::F64,
        })
    }

    /// He-uniform weights in `±(6/fan_in)^{1/2}`, zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let bound = (6.0 / layer.n_in as f64).sqrt();
            for w in &mut layer.w {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        let p = self.params();
        self.set_params(&p).expect("same length");
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("parameter vector", params.len(), self.n_params())?;
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "non-finite parameter at index {i}"
            )));
        }
        let prec = self.precision;
        let mut o = 0;
        for l in &mut self.layers {
            for (dst, src) in l.w.iter_mut().zip(&params[o..]) {
                *dst = prec.round(*src);
            }
            o += l.w.len();
            for (dst, src) in l.b.iter_mut().zip(&params[o..]) {
                *dst = prec.round(*src);
            }
            o += l.b.len();
        }
        Ok(())
    }

    fn layer_apply(&self, li: usize, x: &[f64], out: &mut [f64]) {
        let l = &self.layers[li];
        let hidden = li + 1 < self.layers.len();
        let prec = self.precision;
        for (r, o) in out.iter_mut().enumerate() {
            let row = &l.w[r * l.n_in..(r + 1) * l.n_in];
            let mut s = l.b[r];
            for (w, xi) in row.iter().zip(x) {
                s += w * xi;
            }
            let s = prec.round(s);
            *o = if hidden && s <= 0.0 { 0.0 } else { s };
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.acts.pop().expect("output layer"))
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        check_dim("network input", x.len(), self.input_dim())?;
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(
            x.iter()
                .map(|&v| self.precision.round(v))
                .collect::<Vec<_>>(),
        );
        for li in 0..self.layers.len() {
            let mut out = vec![0.0; self.layers[li].n_out];
            self.layer_apply(li, &acts[li], &mut out);
            acts.push(out);
        }
        Ok(ForwardCache { acts })
    }

    /// Forward pass over `xs` holding consecutive inputs.
    pub fn forward_batch(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if xs.len() % d != 0 {
            return invalid(format!(
                "batch length {} is not a multiple of input width {d}",
                xs.len()
            ));
        }
        let mut out = Vec::with_capacity(xs.len() / d * self.output_dim());
        for x in xs.chunks(d) {
            out.extend(self.forward(x)?);
        }
        Ok(out)
    }

    /// Reverse pass for `upstream · net(x)`, using activations from
    /// [`forward_cached`](Self::forward_cached). A ReLU at exactly zero
    /// passes no gradient.
    pub fn backward(&self, cache: Option<&ForwardCache>, upstream: &[f64]) -> Result<Gradients> {
        let cache = cache
            .ok_or_else(|| Error::InvalidState("backward pass without a forward cache".into()))?;
        if cache.acts.len() != self.widths.len()
            || cache
                .acts
                .iter()
                .zip(&self.widths)
                .any(|(a, &w)| a.len() != w)
        {
            return Err(Error::InvalidState(
                "forward cache does not match the network shape".into(),
            ));
        }
        check_dim("upstream gradient", upstream.len(), self.output_dim())?;
        let mut params = vec![0.0; self.n_params()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut o = 0;
        for l in &self.layers {
            offsets.push(o);
            o += l.n_params();
        }
        let mut delta = upstream.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let x = &cache.acts[li];
            let o = offsets[li];
            let (gw, gb) = params[o..o + l.n_params()].split_at_mut(l.w.len());
            for r in 0..l.n_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                gb[r] = d;
                for (g, xi) in gw[r * l.n_in..(r + 1) * l.n_in].iter_mut().zip(x) {
                    *g = d * xi;
                }
            }
            let mut prev = vec![0.0; l.n_in];
            for r in 0..l.n_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(&l.w[r * l.n_in..(r + 1) * l.n_in]) {
                    *p += d * w;
                }
            }
            if li > 0 {
                // x is a ReLU output of the previous layer
                for (p, a) in prev.iter_mut().zip(x) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(Gradients {
            params,
            input: delta,
        })
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.widths.len() as u64).to_le_bytes())?;
        for &d in &self.widths {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for p in self.params() {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let count = u64::from_le_bytes(buf);
        if !(2..=1024).contains(&count) {
            return invalid(format!("checkpoint declares {count} widths"));
        }
        let mut widths = Vec::with_capacity(count as usize);
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let d = u64::from_le_bytes(buf);
            if d == 0 || d > 1 << 24 {
                return invalid(format!("checkpoint width {d} out of range"));
            }
            widths.push(d as usize);
        }
        let mut net = Self::zeros(&widths)?;
        let mut params = vec![0.0; net.n_params()];
        for p in &mut params {
            r.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        net.set_params(&params)?;
        Ok(net)
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update with the configured learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// Same as [`step`](Self::step) with an explicit learning rate.
    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_dim("Adam parameters", params.len(), self.m.len())?;
        check_dim("Adam gradients", grads.len(), self.m.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "non-finite gradient at index {i}"
            )));
        }
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

/// Central-difference gradient of the first output with respect to all
/// parameters. Used as a test oracle.
pub fn central_differences(net: &MlpNet, x: &[f64], step: f64) -> Vec<f64> {
    let base = net.params();
    let mut probe = net.clone();
    let mut out = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + step;
        probe.set_params(&p).expect("finite");
        let up = probe.forward(x).expect("shape")[0];
        p[i] = base[i] - step;
        probe.set_params(&p).expect("finite");
        let down = probe.forward(x).expect("shape")[0];
        out[i] = (up - down) / (2.0 * step);
    }
    out
}

/// `‖a − b‖_∞ / max(‖b‖_∞, tiny)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1e-300);
    num / den
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}
