//! Experiment configuration: JSON schema, defaults and validation.

use std::path::PathBuf;

use bspde_core::lq::{
    LqSpec, Profile, StudyConfig, TargetRepresentation, TargetSpec, TimeFactor, TrainConfig,
};
use bspde_core::mlp::{AdamConfig, Precision};
use bspde_core::rand_paths::derive_seed;
use bspde_core::regression::RegressionBasis;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Stream label for the evaluation seed derived from the run seed.
const EVAL_STREAM: u64 = 0x6576_616c;

/// A complete experiment description, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExperimentConfig {
    FemSelftest(FemSelftest),
    ManufacturedConvergence(Manufactured),
    LqTrain(LqTrain),
    LqConvergence(LqConvergence),
    DualityCheck(Duality),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FemSelftest {
    pub n_cells: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manufactured {
    /// Mesh sizes; each must be `1/n` for an integer `n ≥ 2`.
    pub h: Vec<f64>,
    #[serde(default = "one")]
    pub horizon: f64,
    pub steps: usize,
    /// `a(t) = 1 + a_slope · t`.
    #[serde(default = "half")]
    pub a_slope: f64,
    pub beta: f64,
    #[serde(default = "four")]
    pub degree: usize,
    pub paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Problem data shared by the LQ experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqProblemConfig {
    pub horizon: f64,
    pub steps: usize,
    pub nu: f64,
    /// `[α0, α1, α2, α3]`.
    pub alphas: [f64; 4],
    pub target: TargetConfig,
    #[serde(default = "eight")]
    pub quadrature: usize,
    #[serde(default)]
    pub interpolate_target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetConfig {
    Zero,
    Constant {
        value: f64,
        #[serde(default)]
        brownian: bool,
    },
    Power {
        exponent: f64,
        #[serde(default)]
        brownian: bool,
    },
    Sine {
        #[serde(default)]
        brownian: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub single_precision: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqTrain {
    pub h: f64,
    pub problem: LqProblemConfig,
    pub net: NetConfig,
    pub train: TrainSettings,
    /// Paths for the optimality residual; 0 skips it.
    #[serde(default)]
    pub residual_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqConvergence {
    pub h: Vec<f64>,
    pub reference_h: f64,
    pub problem: LqProblemConfig,
    pub net: NetConfig,
    pub train: TrainSettings,
    pub eval_paths: usize,
    #[serde(default = "eval_chunk")]
    pub eval_chunk: usize,
    pub seed: u64,
    #[serde(default)]
    pub eval_seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Duality {
    pub h: f64,
    pub horizon: f64,
    /// Step counts; each must divide the largest one, whose noise is reused.
    pub steps: Vec<usize>,
    pub alphas: [f64; 4],
    /// Sources depend on `W(t)` when true.
    #[serde(default)]
    pub stochastic_sources: bool,
    pub paths: usize,
    /// Independent batches of `paths` paths whose sides are averaged.
    #[serde(default = "one_chunk")]
    pub chunks: usize,
    /// Pair every path with its reflection.
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default = "four")]
    pub degree: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn four() -> usize {
    4
}
fn eight() -> usize {
    8
}
fn one_chunk() -> usize {
    1
}
fn eval_chunk() -> usize {
    5000
}

fn field_err(field: &str, msg: impl Into<String>) -> CliError {
    CliError::Invalid {
        field: field.to_string(),
        message: msg.into(),
    }
}

/// Tagged enums are buffered by serde, which drops the position of errors
/// such as unknown fields; recover it from the first backquoted name in the
/// message. Returns `(0, 0)` when the key cannot be found.
fn locate_key(text: &str, message: &str) -> (usize, usize) {
    let Some(name) = message.split('`').nth(1) else {
        return (0, 0);
    };
    let needle = format!("\"{name}\"");
    for (i, line) in text.lines().enumerate() {
        if let Some(col) = line.find(&needle) {
            return (i + 1, col + 1);
        }
    }
    (0, 0)
}

/// `1/h` as a cell count.
pub fn cells_of(field: &str, h: f64) -> Result<usize, CliError> {
    if !(h > 0.0 && h <= 0.5) {
        return Err(field_err(
            field,
            format!("mesh size must lie in (0, 1/2], got {h}"),
        ));
    }
    let n = (1.0 / h).round();
    if ((1.0 / h) - n).abs() > 1e-9 * n {
        return Err(field_err(
            field,
            format!("1/h must be an integer, got h = {h}"),
        ));
    }
    Ok(n as usize)
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field_err(field, format!("must be positive, got {v}")))
    }
}

fn nonzero(field: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        Err(field_err(field, "must be positive"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    /// Parses JSON; serde reports line and column of malformed input and
    /// names unknown keys.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let (line, column) = if e.line() > 0 {
                (e.line(), e.column())
            } else {
                locate_key(text, &e.to_string())
            };
            CliError::Parse {
                line,
                column,
                message: e.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentConfig::FemSelftest(_) => "fem-selftest",
            ExperimentConfig::ManufacturedConvergence(_) => "manufactured-convergence",
            ExperimentConfig::LqTrain(_) => "lq-train",
            ExperimentConfig::LqConvergence(_) => "lq-convergence",
            ExperimentConfig::DualityCheck(_) => "duality-check",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentConfig::FemSelftest(c) => c.seed,
            ExperimentConfig::ManufacturedConvergence(c) => c.seed,
            ExperimentConfig::LqTrain(c) => c.seed,
            ExperimentConfig::LqConvergence(c) => c.seed,
            ExperimentConfig::DualityCheck(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::FemSelftest(c) => c.seed = seed,
            ExperimentConfig::ManufacturedConvergence(c) => c.seed = seed,
            ExperimentConfig::LqTrain(c) => c.seed = seed,
            ExperimentConfig::LqConvergence(c) => {
                c.seed = seed;
                c.eval_seed = None;
            }
            ExperimentConfig::DualityCheck(c) => c.seed = seed,
        }
    }

    pub fn output_dir(&self) -> Option<&PathBuf> {
        match self {
            ExperimentConfig::FemSelftest(c) => c.output_dir.as_ref(),
            ExperimentConfig::ManufacturedConvergence(c) => c.output_dir.as_ref(),
            ExperimentConfig::LqTrain(c) => c.output_dir.as_ref(),
            ExperimentConfig::LqConvergence(c) => c.output_dir.as_ref(),
            ExperimentConfig::DualityCheck(c) => c.output_dir.as_ref(),
        }
    }

    /// Checks every numeric field before any computation starts.
    pub fn validate(&self) -> Result<(), CliError> {
        match self {
            ExperimentConfig::FemSelftest(c) => {
                if c.n_cells.is_empty() {
                    return Err(field_err("n_cells", "needs at least one mesh"));
                }
                for &n in &c.n_cells {
                    if n < 2 {
                        return Err(field_err(
                            "n_cells",
                            format!("need at least 2 cells, got {n}"),
                        ));
                    }
                }
            }
            ExperimentConfig::ManufacturedConvergence(c) => {
                if c.h.is_empty() {
                    return Err(field_err("h", "needs at least one mesh"));
                }
                for &h in &c.h {
                    cells_of("h", h)?;
                }
                positive("horizon", c.horizon)?;
                if c.steps < 2 {
                    return Err(field_err("steps", "need at least 2 time steps"));
                }
                if !c.a_slope.is_finite() || !c.beta.is_finite() {
                    return Err(field_err("beta", "coefficients must be finite"));
                }
                nonzero("degree", c.degree)?;
                if c.paths <= c.degree + 2 {
                    return Err(field_err("paths", "too few paths for the regression"));
                }
            }
            ExperimentConfig::LqTrain(c) => {
                cells_of("h", c.h)?;
                c.problem.validate()?;
                c.net.validate()?;
                c.train.validate()?;
            }
            ExperimentConfig::LqConvergence(c) => {
                if c.h.is_empty() {
                    return Err(field_err("h", "needs at least one mesh"));
                }
                let reference = cells_of("reference_h", c.reference_h)?;
                for &h in &c.h {
                    let n = cells_of("h", h)?;
                    if n >= reference || reference % n != 0 {
                        return Err(field_err(
                            "reference_h",
                            format!("must strictly refine h = {h}"),
                        ));
                    }
                }
                c.problem.validate()?;
                c.net.validate()?;
                c.train.validate()?;
                nonzero("eval_paths", c.eval_paths)?;
                nonzero("eval_chunk", c.eval_chunk)?;
            }
            ExperimentConfig::DualityCheck(c) => {
                cells_of("h", c.h)?;
                positive("horizon", c.horizon)?;
                let max = c
                    .steps
                    .iter()
                    .copied()
                    .max()
                    .ok_or_else(|| field_err("steps", "needs at least one value"))?;
                for &j in &c.steps {
                    if j < 2 || max % j != 0 {
                        return Err(field_err(
                            "steps",
                            format!("{j} must be at least 2 and divide {max}"),
                        ));
                    }
                }
                if c.alphas.iter().any(|a| !a.is_finite()) {
                    return Err(field_err("alphas", "must be finite"));
                }
                nonzero("degree", c.degree)?;
                nonzero("chunks", c.chunks)?;
                if c.paths <= c.degree + 2 {
                    return Err(field_err("paths", "too few paths for the regression"));
                }
            }
        }
        Ok(())
    }
}

impl LqProblemConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        positive("problem.nu", self.nu)?;
        positive("problem.horizon", self.horizon)?;
        if self.steps < 2 {
            return Err(field_err("problem.steps", "need at least 2 time steps"));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(field_err("problem.alphas", "must be finite"));
        }
        nonzero("problem.quadrature", self.quadrature)?;
        if let TargetConfig::Power { exponent, .. } = self.target {
            if !(exponent > -0.5) {
                return Err(field_err(
                    "problem.target.exponent",
                    "must exceed -1/2 for a square-integrable target",
                ));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> LqSpec {
        let (profile, brownian) = match self.target {
            TargetConfig::Zero => (Profile::Zero, false),
            TargetConfig::Constant { value, brownian } => (Profile::Constant(value), brownian),
            TargetConfig::Power { exponent, brownian } => (Profile::Power(exponent), brownian),
            TargetConfig::Sine { brownian } => (Profile::Sine, brownian),
        };
        LqSpec {
            horizon: self.horizon,
            steps: self.steps,
            nu: self.nu,
            alphas: self.alphas,
            target: TargetSpec {
                profile,
                time: if brownian {
                    TimeFactor::OnePlusWSquared
                } else {
                    TimeFactor::One
                },
            },
            quadrature: self.quadrature,
            representation: if self.interpolate_target {
                TargetRepresentation::Interpolation
            } else {
                TargetRepresentation::Projection
            },
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.hidden.contains(&0) {
            return Err(field_err("net.hidden", "widths must be positive"));
        }
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        if self.single_precision {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<(), CliError> {
        nonzero("train.iterations", self.iterations)?;
        nonzero("train.batch_size", self.batch_size)?;
        positive("train.lr", self.lr)?;
        if let Some(l) = self.lr_final {
            positive("train.lr_final", l)?;
        }
        Ok(())
    }

    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            lr_final: self.lr_final,
            seed,
        }
    }
}

impl LqConvergence {
    pub fn eval_seed(&self) -> u64 {
        self.eval_seed
            .unwrap_or_else(|| derive_seed(self.seed, EVAL_STREAM, 0))
    }

    pub fn study(&self) -> Result<StudyConfig, CliError> {
        Ok(StudyConfig {
            meshes: self
                .h
                .iter()
                .map(|&h| cells_of("h", h))
                .collect::<Result<_, _>>()?,
            reference: cells_of("reference_h", self.reference_h)?,
            hidden: self.net.hidden.clone(),
            precision: self.net.precision(),
            train: self.train.config(self.seed),
            eval_paths: self.eval_paths,
            eval_seed: self.eval_seed(),
            eval_chunk: self.eval_chunk,
        })
    }
}

pub fn basis(degree: usize) -> RegressionBasis {
    RegressionBasis {
        degree,
        ..RegressionBasis::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FEM: &str = r#"{"kind": "fem-selftest", "n_cells": [8]}"#;

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::from_json(FEM).unwrap();
        assert_eq!(c.kind(), "fem-selftest");
    }

    #[test]
    fn shipped_configs_are_valid() {
        let shipped = [
            include_str!("../../../configs/fem-selftest.json"),
            include_str!("../../../configs/manufactured.json"),
            include_str!("../../../configs/lq-train.json"),
            include_str!("../../../configs/power-target.json"),
            include_str!("../../../configs/power-target-brownian.json"),
            include_str!("../../../configs/duality.json"),
        ];
        for text in shipped {
            ExperimentConfig::from_json(text)
                .and_then(|c| c.validate())
                .unwrap_or_else(|e| panic!("{e}: {text}"));
        }
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err =
            ExperimentConfig::from_json(r#"{"kind": "fem-selftest", "n_cells": [8], "bogus": 1}"#)
                .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn bad_h_is_rejected() {
        assert!(cells_of("h", 0.3).is_err());
        assert_eq!(cells_of("h", 0.125).unwrap(), 8);
    }
}
