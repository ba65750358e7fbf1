//! Reproducible Brownian increments on a uniform time grid.
//!
//! Every path owns a ChaCha8 stream selected by its path index; step `j` of
//! that path is the `j`-th draw of the stream. An increment therefore
//! depends only on `(seed, path, step)`, so growing a batch never changes
//! the paths it already contained. Gaussians come from the inverse normal
//! CDF applied to a 53-bit uniform on the open interval (0, 1).

use std::io::{Read, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};

/// Uniform grid `t_j = j τ`, `j = 0..=J`, on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    tau: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid(format!(
                "horizon must be positive and finite, got {horizon}"
            ));
        }
        if steps < 2 {
            return invalid(format!("time grid needs at least 2 steps, got {steps}"));
        }
        Ok(Self {
            horizon,
            steps,
            tau: horizon / steps as f64,
        })
    }

    /// Grid from its step size; the horizon becomes `τ J`.
    pub fn from_step(tau: f64, steps: usize) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return invalid(format!("time step must be positive, got {tau}"));
        }
        let mut g = Self::new(tau * steps as f64, steps)?;
        g.tau = tau;
        Ok(g)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn t(&self, j: usize) -> f64 {
        j as f64 * self.tau
    }
}

/// Batch of Brownian paths: `increments[p * J + j] = W(t_{j+1}) − W(t_j)`
/// and `cumulative[p * (J + 1) + j] = W(t_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBatch {
    grid: TimeGrid,
    n_paths: usize,
    increments: Vec<f64>,
    cumulative: Vec<f64>,
    seed: u64,
}

impl BrownianBatch {
    /// Wraps explicit increments; cumulative values are summed left to right.
    pub fn from_increments(
        grid: TimeGrid,
        n_paths: usize,
        increments: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if n_paths == 0 {
            return invalid("batch needs at least one path");
        }
        let j = grid.steps();
        if increments.len() != n_paths * j {
            return invalid(format!(
                "expected {} increments for {n_paths} paths x {j} steps, got {}",
                n_paths * j,
                increments.len()
            ));
        }
        let mut cumulative = vec![0.0; n_paths * (j + 1)];
        for p in 0..n_paths {
            let inc = &increments[p * j..(p + 1) * j];
            let cum = &mut cumulative[p * (j + 1)..(p + 1) * (j + 1)];
            let mut w = 0.0;
            for (k, &d) in inc.iter().enumerate() {
                w += d;
                cum[k + 1] = w;
            }
        }
        Ok(Self {
            grid,
            n_paths,
            increments,
            cumulative,
            seed,
        })
    }

    /// The same paths on a grid `factor` times coarser: each coarse
    /// increment is the left-to-right sum of `factor` fine increments.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let j = self.grid.steps();
        if factor == 0 || j % factor != 0 {
            return invalid(format!("cannot coarsen {j} steps by a factor of {factor}"));
        }
        let grid = TimeGrid::new(self.grid.horizon(), j / factor)?;
        let increments = self
            .increments
            .chunks(factor)
            .map(|c| c.iter().sum())
            .collect();
        Self::from_increments(grid, self.n_paths, increments, self.seed)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Increments of one path.
    pub fn path_increments(&self, p: usize) -> &[f64] {
        let j = self.grid.steps();
        &self.increments[p * j..(p + 1) * j]
    }

    /// `W(t_0), ..., W(t_J)` of one path.
    pub fn path_cumulative(&self, p: usize) -> &[f64] {
        let j = self.grid.steps() + 1;
        &self.cumulative[p * j..(p + 1) * j]
    }

    pub fn increment(&self, p: usize, j: usize) -> f64 {
        self.increments[p * self.grid.steps() + j]
    }

    pub fn w(&self, p: usize, j: usize) -> f64 {
        self.cumulative[p * (self.grid.steps() + 1) + j]
    }

    /// `W(t_j)` across all paths.
    pub fn w_at(&self, j: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.w(p, j)).collect()
    }

    /// Writes the replay layout: little-endian `seed: u64`, `J: u64`,
    /// `τ: f64`, `n_paths: u64`, then row-major increments as `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.grid.steps() as u64).to_le_bytes())?;
        w.write_all(&self.grid.tau().to_le_bytes())?;
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        for x in &self.increments {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut buf)?;
            Ok(buf)
        };
        let seed = u64::from_le_bytes(next(&mut r)?);
        let steps = u64::from_le_bytes(next(&mut r)?) as usize;
        let tau = f64::from_le_bytes(next(&mut r)?);
        let n_paths = u64::from_le_bytes(next(&mut r)?) as usize;
        let grid = TimeGrid::from_step(tau, steps)?;
        let total = n_paths
            .checked_mul(steps)
            .ok_or_else(|| Error::InvalidArgument("batch header overflows".into()))?;
        let mut increments = Vec::with_capacity(total);
        for _ in 0..total {
            increments.push(f64::from_le_bytes(next(&mut r)?));
        }
        Self::from_increments(grid, n_paths, increments, seed)
    }
}

fn uniform_open(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draws `(seed, stream, 0..count)`.
fn stream_normals(seed: u64, stream: u64, count: usize, out: &mut [f64]) {
    let normal = Normal::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    for o in out.iter_mut().take(count) {
        *o = normal.inverse_cdf(uniform_open(rng.next_u64()));
    }
}

/// Samples a batch of `n_paths` Brownian paths on `grid`.
///
/// With `antithetic`, paths `2k` and `2k + 1` share stream `k` and the odd
/// path carries the negated increments.
pub fn sample_brownian(
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<BrownianBatch> {
    sample_brownian_range(grid, 0, n_paths, seed, antithetic)
}

/// Paths `first..first + n_paths` of the stream family `seed`; identical to
/// the corresponding rows of a larger [`sample_brownian`] batch.
pub fn sample_brownian_range(
    grid: &TimeGrid,
    first: usize,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<BrownianBatch> {
    if n_paths == 0 {
        return invalid("batch needs at least one path");
    }
    if antithetic && (n_paths % 2 == 1 || first % 2 == 1) {
        return invalid(format!(
            "antithetic sampling needs an even path count and offset, got {n_paths} at {first}"
        ));
    }
    let j = grid.steps();
    let sd = grid.tau().sqrt();
    let mut increments = vec![0.0; n_paths * j];
    increments
        .par_chunks_mut(j)
        .enumerate()
        .for_each(|(k, row)| {
            let p = first + k;
            let (stream, sign) = if antithetic {
                ((p / 2) as u64, if p % 2 == 0 { 1.0 } else { -1.0 })
            } else {
                (p as u64, 1.0)
            };
            stream_normals(seed, stream, j, row);
            row.iter_mut().for_each(|x| *x *= sign * sd);
        });
    BrownianBatch::from_increments(*grid, n_paths, increments, seed)
}

/// Derives a child seed from a base seed and a label/index pair
/// (SplitMix64 finalizer).
pub fn derive_seed(base: u64, label: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(label.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-step sample statistics of the increments.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased sample variance; `None` for a single path.
    pub variance: Option<Vec<f64>>,
}

pub fn batch_moments(batch: &BrownianBatch) -> BatchMoments {
    let j = batch.grid().steps();
    let n = batch.n_paths();
    let mut mean = vec![0.0; j];
    for p in 0..n {
        for (m, d) in mean.iter_mut().zip(batch.path_increments(p)) {
            *m += d;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let variance = (n > 1).then(|| {
        let mut var = vec![0.0; j];
        for p in 0..n {
            for ((v, d), m) in var.iter_mut().zip(batch.path_increments(p)).zip(&mean) {
                *v += (d - m) * (d - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        var
    });
    BatchMoments { mean, variance }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        let g = TimeGrid::new(0.2, 50).unwrap();
        assert!((g.tau() * 50.0 - 0.2).abs() < 1e-16);
        assert_eq!(g.t(0), 0.0);
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
    }

    #[test]
    fn deterministic_and_stream_stable() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let a = sample_brownian(&g, 5, 42, false).unwrap();
        let b = sample_brownian(&g, 5, 42, false).unwrap();
        assert_eq!(a, b);
        let c = sample_brownian(&g, 9, 42, false).unwrap();
        assert_eq!(&c.increments()[..5 * 16], a.increments());
        let d = sample_brownian(&g, 5, 43, false).unwrap();
        assert_ne!(a.increments(), d.increments());
    }

    #[test]
    fn antithetic_pairs_negate() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let a = sample_brownian(&g, 6, 7, true).unwrap();
        for k in 0..3 {
            for (x, y) in a
                .path_increments(2 * k)
                .iter()
                .zip(a.path_increments(2 * k + 1))
            {
                assert_eq!(*x, -*y);
            }
        }
        let m = batch_moments(&a);
        assert!(m.mean.iter().all(|&x| x == 0.0));
        assert!(sample_brownian(&g, 5, 7, true).is_err());
    }

    #[test]
    fn cumulative_is_left_to_right_sum() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let a = sample_brownian(&g, 3, 1, false).unwrap();
        for p in 0..3 {
            let mut s = 0.0;
            assert_eq!(a.w(p, 0), 0.0);
            for j in 0..10 {
                s += a.increment(p, j);
                assert_eq!(a.w(p, j + 1), s);
            }
        }
    }

    #[test]
    fn single_path_has_no_variance() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let a = sample_brownian(&g, 1, 1, false).unwrap();
        assert!(batch_moments(&a).variance.is_none());
    }

    #[test]
    fn binary_layout_round_trips() {
        let g = TimeGrid::new(0.2, 5).unwrap();
        let a = sample_brownian(&g, 3, 99, false).unwrap();
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 32 + 8 * 15);
        assert_eq!(&bytes[..8], &99u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &5u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &g.tau().to_le_bytes());
        let b = BrownianBatch::read_from(&bytes[..]).unwrap();
        assert_eq!(a.increments(), b.increments());
        assert_eq!(b.grid().tau(), g.tau());
        assert!(BrownianBatch::read_from(&bytes[..40]).is_err());
    }

    #[test]
    fn coarsening_keeps_the_path() {
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let b = sample_brownian(&grid, 3, 4, false).unwrap();
        let c = b.coarsen(4).unwrap();
        assert_eq!(c.grid().steps(), 3);
        for p in 0..3 {
            for k in 0..=3 {
                assert!((c.w(p, k) - b.w(p, 4 * k)).abs() < 1e-14);
            }
        }
        assert!(b.coarsen(5).is_err());
    }

    #[test]
    fn range_matches_full_batch() {
        let g = TimeGrid::new(1.0, 7).unwrap();
        let full = sample_brownian(&g, 10, 42, false).unwrap();
        let part = sample_brownian_range(&g, 4, 3, 42, false).unwrap();
        for k in 0..3 {
            assert_eq!(part.path_increments(k), full.path_increments(4 + k));
        }
    }
}
