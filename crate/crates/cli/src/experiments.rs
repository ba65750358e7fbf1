//! Execution of each experiment kind.

use std::collections::BTreeMap;
use std::time::Instant;

use bspde_core::backward::manufactured_convergence;
use bspde_core::fem::{closed_form_eigenvalue, FemSystem};
use bspde_core::field::BrownianScaled;
use bspde_core::forward::LinearSpdeCoeffs;
use bspde_core::lq::{
    convergence_study, duality_check, optimality_residual, simulate, train, AdjointPairing,
    LqProblem, PolicyStack, DUALITY_FLOOR,
};
use bspde_core::rand_paths::{derive_seed, sample_brownian, sample_brownian_range, TimeGrid};
use serde_json::{json, Value};

use crate::config::{
    basis, cells_of, Duality, ExperimentConfig, FemSelftest, LqConvergence, LqTrain, Manufactured,
};
use crate::error::{CliError, Stage};
use crate::record::{ErrorTable, RunRecord, ARTIFACT_VERSION};

const RESIDUAL_STREAM: u64 = 0x7265_7369;

/// A finished run: its record plus extra files for the output directory.
pub struct Outcome {
    pub record: RunRecord,
    pub artifacts: Vec<(String, Vec<u8>)>,
}

struct Recorder {
    timings: BTreeMap<String, f64>,
    seeds: BTreeMap<String, u64>,
    results: BTreeMap<String, Value>,
    artifacts: Vec<(String, Vec<u8>)>,
}

impl Recorder {
    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings
            .insert(phase.to_string(), start.elapsed().as_secs_f64());
        out
    }

    fn result(&mut self, key: &str, v: impl Into<Value>) {
        self.results.insert(key.to_string(), v.into());
    }
}

/// Executes the experiment; nothing is written to disk here.
pub fn execute(
    config: &ExperimentConfig,
    threads: usize,
    reproducible: bool,
) -> Result<Outcome, CliError> {
    config.validate()?;
    let mut rec = Recorder {
        timings: BTreeMap::new(),
        seeds: BTreeMap::from([("run".to_string(), config.seed())]),
        results: BTreeMap::new(),
        artifacts: Vec::new(),
    };
    let start = Instant::now();
    let table = match config {
        ExperimentConfig::FemSelftest(c) => fem_selftest(c, &mut rec)?,
        ExperimentConfig::ManufacturedConvergence(c) => manufactured(c, &mut rec)?,
        ExperimentConfig::LqTrain(c) => lq_train(c, &mut rec)?,
        ExperimentConfig::LqConvergence(c) => lq_convergence(c, &mut rec)?,
        ExperimentConfig::DualityCheck(c) => duality(c, &mut rec)?,
    };
    rec.timings
        .insert("total".to_string(), start.elapsed().as_secs_f64());
    Ok(Outcome {
        record: RunRecord {
            kind: config.kind().to_string(),
            version: ARTIFACT_VERSION.to_string(),
            config: config.clone(),
            threads,
            reproducible,
            seeds: rec.seeds,
            timings: rec.timings,
            table,
            results: rec.results,
        },
        artifacts: rec.artifacts,
    })
}

fn fem_selftest(c: &FemSelftest, rec: &mut Recorder) -> Result<ErrorTable, CliError> {
    let mut table = ErrorTable::new(
        "h",
        &[
            "eigenvalue closed-form residual",
            "eigenpair residual",
            "orthogonality defect",
        ],
        false,
    );
    let mut worst = 0.0f64;
    for &n in &c.n_cells {
        let row = rec.time(&format!("n_cells={n}"), || -> Result<_, CliError> {
            let fem = FemSystem::uniform(n).stage("fem assembly")?;
            let h = fem.mesh().h();
            let spec = fem.spectral().stage("fem eigensolver")?;
            let closed = spec
                .eigenvalues()
                .iter()
                .enumerate()
                .map(|(k, &l)| {
                    let exact = closed_form_eigenvalue(h, k + 1);
                    (l - exact).abs() / exact
                })
                .fold(0.0f64, f64::max);
            Ok((
                h,
                [
                    closed,
                    spec.max_relative_residual(),
                    spec.max_orthogonality_defect(),
                ],
            ))
        })?;
        worst = worst.max(row.1[0]);
        table.push(row.0, row.1.to_vec(), vec![0.0; 3]);
    }
    rec.result("max_eigenvalue_residual", worst);
    Ok(table.sorted())
}

fn manufactured(c: &Manufactured, rec: &mut Recorder) -> Result<ErrorTable, CliError> {
    let meshes: Vec<usize> =
        c.h.iter()
            .map(|&h| cells_of("h", h))
            .collect::<Result<_, _>>()?;
    let grid = TimeGrid::new(c.horizon, c.steps).stage("time grid")?;
    let batch = rec
        .time("sampling", || {
            sample_brownian(&grid, c.paths, c.seed, false)
        })
        .stage("path sampling")?;
    let rows = rec
        .time("solve", || {
            manufactured_convergence(&meshes, &grid, c.a_slope, c.beta, &basis(c.degree), &batch)
        })
        .stage("backward solver")?;
    let mut table = ErrorTable::new("h", &["sup_t L2(p)", "L2(H1)(p)", "L2(z)"], true);
    let mut picard = Vec::new();
    for r in &rows {
        let n = &r.norms;
        table.push(
            r.h,
            vec![n.sup_p_l2, n.p_h1, n.z_l2],
            vec![n.sup_p_l2_se, n.p_h1_se, n.z_l2_se],
        );
        rec.timings
            .insert(format!("solve n_cells={}", r.n_cells), r.seconds);
        picard.push(r.max_picard_iters);
    }
    rec.result("max_picard_iters", picard);
    Ok(table.sorted())
}

fn lq_train(c: &LqTrain, rec: &mut Recorder) -> Result<ErrorTable, CliError> {
    let spec = c.problem.spec();
    let problem = LqProblem::new(spec, cells_of("h", c.h)?).stage("lq problem")?;
    let stack = PolicyStack::new(&c.net.hidden, spec.steps, c.seed, c.net.precision())
        .stage("policy initialization")?;
    let cfg = c.train.config(c.seed);
    let trained = rec
        .time("train", || train(&problem, stack, &cfg))
        .stage("training")?;
    let losses = &trained.losses;
    let k = (losses.len() / 10).max(1);
    let final_loss = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    rec.result("initial_loss", losses[0]);
    rec.result("final_loss", final_loss);
    rec.result("losses", losses.clone());
    rec.result("n_params", trained.stack.n_params());

    let mut values = vec![final_loss];
    let mut ses = vec![0.0];
    let mut columns = vec!["final loss"];
    if c.residual_paths > 0 {
        let seed = derive_seed(c.seed, RESIDUAL_STREAM, 0);
        rec.seeds.insert("residual".to_string(), seed);
        let grid = *problem.grid();
        let batch = sample_brownian(&grid, c.residual_paths, seed, false).stage("path sampling")?;
        let res = rec.time("residual", || -> Result<_, CliError> {
            let (u, _) = simulate(&problem, &trained.stack, &batch).stage("policy evaluation")?;
            optimality_residual(&problem, &u, &batch, &basis(4), AdjointPairing::Conditional)
                .stage("optimality residual")
        })?;
        rec.result("control_norm", res.control_norm);
        rec.result("residual", res.residual);
        rec.result("relative_residual", res.relative);
        columns.extend(["control norm", "relative residual"]);
        values.extend([res.control_norm, res.relative]);
        ses.extend([
            0.0,
            res.residual_se / res.control_norm.max(f64::MIN_POSITIVE),
        ]);
    }
    let mut bytes = Vec::new();
    trained.stack.save(&mut bytes).stage("policy checkpoint")?;
    rec.artifacts.push(("policy.bin".to_string(), bytes));

    let mut table = ErrorTable::new("h", &columns, false);
    table.push(problem.fem().mesh().h(), values, ses);
    Ok(table)
}

fn lq_convergence(c: &LqConvergence, rec: &mut Recorder) -> Result<ErrorTable, CliError> {
    let study = c.study()?;
    rec.seeds.insert("eval".to_string(), study.eval_seed);
    let report = convergence_study(&c.problem.spec(), &study).stage("convergence study")?;
    rec.timings
        .insert("evaluation".to_string(), report.eval_seconds);
    let mut table = ErrorTable::new("h", &["‖Ū − U*‖", "‖Ȳ − Y*‖"], true);
    let mut final_losses = Vec::new();
    for r in &report.rows {
        table.push(r.h, vec![r.u_err, r.y_err], vec![r.u_err_se, r.y_err_se]);
        rec.timings
            .insert(format!("train n_cells={}", r.n_cells), r.train_seconds);
        final_losses.push(r.final_loss);
    }
    rec.result("final_losses", final_losses);
    rec.result("reference_final_loss", report.reference_final_loss);
    rec.result("u_monotone", report.u_monotone);
    rec.result("y_monotone", report.y_monotone);
    Ok(table.sorted())
}

fn duality(c: &Duality, rec: &mut Recorder) -> Result<ErrorTable, CliError> {
    let fem = FemSystem::uniform(cells_of("h", c.h)?).stage("fem assembly")?;
    let finest = *c.steps.iter().max().expect("validated");
    let fine_grid = TimeGrid::new(c.horizon, finest).stage("time grid")?;
    let g_shape = fem
        .l2_project(|x| (std::f64::consts::PI * x).sin(), 8)
        .stage("source projection")?
        .into_vec();
    let v_shape = fem.interpolate(|x| x * (1.0 - x)).into_vec();
    let stochastic = c.stochastic_sources;
    let [a0, a1, a2, a3] = c.alphas;
    let mut sums = vec![(0.0, 0.0); c.steps.len()];
    let start = Instant::now();
    for chunk in 0..c.chunks {
        // Every chunk has its own regressions; the finest noise is shared by
        // all step counts.
        let fine =
            sample_brownian_range(&fine_grid, chunk * c.paths, c.paths, c.seed, c.antithetic)
                .stage("path sampling")?;
        for (k, &j) in c.steps.iter().enumerate() {
            let batch = fine.coarsen(finest / j).stage("noise coarsening")?;
            let grid = *batch.grid();
            let coeffs = LinearSpdeCoeffs::constant(a0, a1, a2, a3, j);
            let g = BrownianScaled {
                shape: g_shape.clone(),
                tau: grid.tau(),
                coeff: move |t: f64, w: f64| (1.0 + t) * if stochastic { 1.0 + w } else { 1.0 },
            };
            let v = BrownianScaled {
                shape: v_shape.clone(),
                tau: grid.tau(),
                coeff: move |t: f64, w: f64| t.cos() + if stochastic { w } else { 0.0 },
            };
            let d = duality_check(
                &fem,
                &grid,
                &coeffs,
                &g,
                &v,
                &batch,
                &basis(c.degree),
                AdjointPairing::Conditional,
            )
            .stage("duality check")?;
            sums[k].0 += d.lhs;
            sums[k].1 += d.rhs;
        }
    }
    rec.timings
        .insert("duality".to_string(), start.elapsed().as_secs_f64());
    let mut table = ErrorTable::new("tau", &["lhs", "rhs", "relative gap"], false);
    let mut gaps = Vec::new();
    for (&j, &(l, r)) in c.steps.iter().zip(&sums) {
        let (l, r) = (l / c.chunks as f64, r / c.chunks as f64);
        let gap = (l - r).abs() / l.abs().max(r.abs()).max(DUALITY_FLOOR);
        table.push(c.horizon / j as f64, vec![l, r, gap], vec![0.0; 3]);
        gaps.push(json!({"steps": j, "gap": gap}));
    }
    rec.result("gaps", gaps);
    Ok(table.sorted())
}
