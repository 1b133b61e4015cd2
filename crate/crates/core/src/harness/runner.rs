//! Executes an [`ExperimentConfig`]: grid points × trials as independent
//! tasks, each owning `RngStream(seed, task_index)`, merged in task order.

use std::time::Instant;

use super::config::{validate_config, Experiment, ExperimentConfig, SftSolver, TrainCovariance, DEFAULT_OS_STEP_CONSTANT};
use super::table::{schema, Cell, Table};
use crate::error::{Error, Result};
use crate::evaluator::{posttest_error_exact, posttest_error_mc};
use crate::lsa::{pretrained_init, LsaParams};
use crate::numerics::{Matrix, RngStream};
use crate::os::{os_gd, stability_report, OsConfig, OsStep};
use crate::par::map_indexed;
use crate::sft::{sft_closed_form, sft_first_order, sft_gd, SftConfig, StepSize};
use crate::task::{gamma0, gamma0_inverse, gen_prompt_batch, gen_prompt_batch_with, BatchStorage, CovarianceKind, CovarianceSpec};
use crate::theory::{theory_components, TheoryInputs};

/// Substream reserved for test-time Monte Carlo; batch generation uses
/// substreams `0..=B`.
const EVAL_SUBSTREAM: u64 = u64::MAX;

/// Runs a validated experiment and returns its table.
///
/// Sweeps record per-point divergences in `divergence_count`. The
/// gd-rate-demo aborts with [`Error::Divergence`] instead.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Table> {
    validate_config(cfg).map_err(Error::Config)?;
    with_threads(cfg.threads, || match cfg.experiment {
        e if e.is_sft_sweep() || e.is_os_sweep() => run_sweep(cfg),
        Experiment::TheoryCurve => run_theory_curve(cfg),
        Experiment::CompareTheorySim => run_compare(cfg),
        _ => run_gd_rate(cfg),
    })
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(vec![format!("threads: {e}")]))?
            .install(f),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T>(_threads: Option<usize>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f()
}

/// Covariances that do not depend on the grid point.
struct Covariances {
    sigma0: Matrix,
    sigma: Matrix,
    a: Matrix,
}

impl Covariances {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = CovarianceSpec::new(cfg.d, cfg.m, cfg.rho, cfg.r, cfg.eta, CovarianceKind::Pretrain)?;
        Ok(Self {
            sigma0: spec.materialize(),
            sigma: spec.with_kind(CovarianceKind::Posttest)?.materialize(),
            a: spec.with_kind(CovarianceKind::Posttrain)?.materialize(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Point {
    n: usize,
    b: usize,
    k: usize,
}

fn sweep_points(cfg: &ExperimentConfig) -> Vec<Point> {
    let mut points = Vec::new();
    for &n in &cfg.n {
        for &b in &cfg.b {
            for &k in &cfg.k {
                points.push(Point { n, b, k });
            }
        }
    }
    points
}

#[derive(Debug, Clone, Copy)]
struct Trial {
    /// `inf` when the trial diverged.
    error: f64,
    secs: f64,
    init_radius: f64,
    init_bound: f64,
}

impl Trial {
    fn diverged(secs: f64) -> Self {
        Self { error: f64::INFINITY, secs, init_radius: f64::NAN, init_bound: f64::NAN }
    }
}

/// Mean and standard error over the finite values, and how many were not.
struct Summary {
    mean: f64,
    stderr: f64,
    diverged: usize,
}

fn summarize(values: impl IntoIterator<Item = f64>) -> Summary {
    let (mut finite, mut diverged) = (Vec::new(), 0);
    for v in values {
        if v.is_finite() {
            finite.push(v);
        } else {
            diverged += 1;
        }
    }
    let count = finite.len() as f64;
    match finite.len() {
        0 => Summary { mean: f64::INFINITY, stderr: f64::INFINITY, diverged },
        1 => Summary { mean: finite[0], stderr: 0.0, diverged },
        _ => {
            let mean = finite.iter().sum::<f64>() / count;
            let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0);
            Summary { mean, stderr: (var / count).sqrt(), diverged }
        }
    }
}

/// Post-test error at the configured test rollout length: exact for one
/// step, Monte Carlo otherwise (`inf` if every MC prompt diverged).
fn evaluate(cfg: &ExperimentConfig, params: &LsaParams, sigma: &Matrix, n: usize, stream: RngStream) -> Result<f64> {
    if cfg.test_k == 1 {
        posttest_error_exact(&params.v_tilde, sigma, n)
    } else {
        let report = posttest_error_mc(params, sigma, n, cfg.test_k, cfg.mc_trials, stream.substream(EVAL_SUBSTREAM))?;
        Ok(report.mc_mean)
    }
}

fn sft_trial(cfg: &ExperimentConfig, cov: &Covariances, g0inv: &Matrix, p: Point, stream: RngStream) -> Result<Trial> {
    let start = Instant::now();
    let batch = gen_prompt_batch_with(&cov.a, p.b, p.n, stream, BatchStorage::PhiOnly)?;
    let params = match cfg.solver {
        SftSolver::ClosedForm => sft_closed_form(&batch, g0inv, cfg.eta)?,
        SftSolver::Gd => {
            let init = LsaParams::with_identity_w(-g0inv)?;
            let sft = SftConfig {
                step: cfg.gamma_step.map_or(StepSize::Auto, StepSize::Fixed),
                steps: cfg.sft_steps,
                ..SftConfig::new(cfg.eta, p.k)
            };
            match sft_gd(&init, &batch, g0inv, &sft) {
                Ok(run) => run.params,
                Err(Error::Divergence { .. }) => return Ok(Trial::diverged(start.elapsed().as_secs_f64())),
                Err(e) => return Err(e),
            }
        }
    };
    let error = evaluate(cfg, &params, &cov.sigma, p.n, stream)?;
    Ok(Trial { error, secs: start.elapsed().as_secs_f64(), init_radius: f64::NAN, init_bound: f64::NAN })
}

fn os_trial(cfg: &ExperimentConfig, cov: &Covariances, p: Point, stream: RngStream) -> Result<Trial> {
    let start = Instant::now();
    let train_cov = match cfg.os_train_cov {
        TrainCovariance::Posttest => &cov.sigma,
        TrainCovariance::Posttrain => &cov.a,
    };
    let batch = gen_prompt_batch(train_cov, p.b, p.n, stream)?;
    let init = pretrained_init(&cov.sigma0, p.n)?;
    let os = OsConfig {
        step: OsStep::HessianScaled(cfg.gamma_step.unwrap_or(DEFAULT_OS_STEP_CONSTANT)),
        steps: cfg.os_steps,
        log_spectra: false,
        ..OsConfig::new(p.k)
    };
    let run = os_gd(&init, &batch, &os)?;
    let report = stability_report(&init.v_tilde, &batch, p.k, run.trajectory[0].grad_norm)?;
    let (init_radius, init_bound) = (report.mean_radius(), report.hessian_bound);
    if run.diverged() {
        return Ok(Trial { init_radius, init_bound, ..Trial::diverged(start.elapsed().as_secs_f64()) });
    }
    let error = evaluate(cfg, &run.params, &cov.sigma, p.n, stream)?;
    Ok(Trial { error, secs: start.elapsed().as_secs_f64(), init_radius, init_bound })
}

fn run_sweep(cfg: &ExperimentConfig) -> Result<Table> {
    let exp = cfg.experiment;
    let cov = Covariances::new(cfg)?;
    let points = sweep_points(cfg);
    let g0invs = points
        .iter()
        .map(|p| gamma0_inverse(&gamma0(&cov.sigma0, p.n)?))
        .collect::<Result<Vec<_>>>()?;
    let trials = cfg.trials;
    let outcomes = map_indexed(points.len() * trials, |task| {
        let (pi, p) = (task / trials, points[task / trials]);
        let stream = RngStream::new(cfg.seed, task as u64);
        if exp.is_sft_sweep() {
            sft_trial(cfg, &cov, &g0invs[pi], p, stream)
        } else {
            os_trial(cfg, &cov, p, stream)
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let swept = exp.swept().expect("sweeps have a swept variable");
    let step_rule = format!("hessian_scaled:{:?}", cfg.gamma_step.unwrap_or(DEFAULT_OS_STEP_CONSTANT));
    let mut table = Table::new(schema(exp, cfg.timing));
    for (pi, p) in points.iter().enumerate() {
        let chunk = &outcomes[pi * trials..(pi + 1) * trials];
        let s = summarize(chunk.iter().map(|t| t.error));
        let mut row: Vec<Cell> = vec![
            exp.name().into(),
            swept.into(),
            cfg.d.into(),
            cfg.m.into(),
            p.n.into(),
            p.b.into(),
            p.k.into(),
            cfg.rho.into(),
            cfg.r.into(),
            cfg.eta.into(),
            trials.into(),
            cfg.seed.into(),
        ];
        if exp.is_sft_sweep() {
            let solver = match cfg.solver {
                SftSolver::ClosedForm => "closed-form",
                SftSolver::Gd => "gd",
            };
            row.extend([solver.into(), cfg.test_k.into(), s.mean.into(), s.stderr.into(), s.diverged.into()]);
        } else {
            let train_cov = match cfg.os_train_cov {
                TrainCovariance::Posttest => "posttest",
                TrainCovariance::Posttrain => "posttrain",
            };
            let radius = chunk.iter().map(|t| t.init_radius).sum::<f64>() / trials as f64;
            let bound = chunk.iter().map(|t| t.init_bound).sum::<f64>() / trials as f64;
            row.extend([
                step_rule.as_str().into(),
                cfg.os_steps.into(),
                train_cov.into(),
                cfg.test_k.into(),
                s.mean.into(),
                s.stderr.into(),
                s.diverged.into(),
                radius.into(),
                bound.into(),
            ]);
        }
        if cfg.timing {
            row.push(chunk.iter().map(|t| t.secs).sum::<f64>().into());
        }
        table.push(row);
    }
    Ok(table)
}

fn theory_inputs(cfg: &ExperimentConfig, n: usize, b: usize) -> TheoryInputs {
    TheoryInputs::from_dims(cfg.d, cfg.m, n, b, cfg.rho, cfg.r, cfg.eta)
}

fn run_theory_curve(cfg: &ExperimentConfig) -> Result<Table> {
    let n = cfg.n[0];
    let base = theory_inputs(cfg, n, 1);
    let mut table = Table::new(schema(cfg.experiment, cfg.timing));
    for &beta in &cfg.beta {
        let start = Instant::now();
        let inp = base.with_beta(beta);
        let c = theory_components(&inp)?;
        let mut row: Vec<Cell> = vec![
            cfg.experiment.name().into(),
            cfg.d.into(),
            cfg.m.into(),
            n.into(),
            cfg.rho.into(),
            cfg.r.into(),
            cfg.eta.into(),
            inp.gamma.into(),
            inp.mu1.into(),
            beta.into(),
            c.q.into(),
            c.w[0].into(),
            c.w[1].into(),
            c.v[0].into(),
            c.v[1].into(),
            c.t12.into(),
            c.bias.into(),
            c.t_inv.into(),
            c.t_inv_sigma.into(),
            c.t_var.into(),
            c.t_var_sigma.into(),
            c.f.into(),
        ];
        if cfg.timing {
            row.push(start.elapsed().as_secs_f64().into());
        }
        table.push(row);
    }
    Ok(table)
}

fn run_compare(cfg: &ExperimentConfig) -> Result<Table> {
    let cov = Covariances::new(cfg)?;
    let n = cfg.n[0];
    let g0inv = gamma0_inverse(&gamma0(&cov.sigma0, n)?)?;
    let trials = cfg.trials;
    let d = cfg.d as f64;
    let outcomes = map_indexed(cfg.b.len() * trials, |task| -> Result<(f64, f64, f64)> {
        let start = Instant::now();
        let b = cfg.b[task / trials];
        let batch = gen_prompt_batch_with(&cov.a, b, n, RngStream::new(cfg.seed, task as u64), BatchStorage::PhiOnly)?;
        let exact = sft_closed_form(&batch, &g0inv, cfg.eta)?.v_tilde;
        let first_order = sft_first_order(&batch, &cov.a, &g0inv, cfg.eta)?.combined();
        Ok((
            posttest_error_exact(&exact, &cov.sigma, n)? / d,
            posttest_error_exact(&first_order, &cov.sigma, n)? / d,
            start.elapsed().as_secs_f64(),
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut table = Table::new(schema(cfg.experiment, cfg.timing));
    for (pi, &b) in cfg.b.iter().enumerate() {
        let chunk = &outcomes[pi * trials..(pi + 1) * trials];
        let inp = theory_inputs(cfg, n, b);
        let f = theory_components(&inp)?.f;
        let exact = summarize(chunk.iter().map(|t| t.0));
        let first = summarize(chunk.iter().map(|t| t.1));
        let mut row: Vec<Cell> = vec![
            cfg.experiment.name().into(),
            cfg.d.into(),
            cfg.m.into(),
            n.into(),
            b.into(),
            inp.beta.into(),
            cfg.rho.into(),
            cfg.r.into(),
            cfg.eta.into(),
            inp.gamma.into(),
            inp.mu1.into(),
            trials.into(),
            cfg.seed.into(),
            exact.mean.into(),
            exact.stderr.into(),
            first.mean.into(),
            first.stderr.into(),
            f.into(),
            ((exact.mean - f).abs() / f).into(),
            ((first.mean - f).abs() / f).into(),
            exact.diverged.max(first.diverged).into(),
        ];
        if cfg.timing {
            row.push(chunk.iter().map(|t| t.2).sum::<f64>().into());
        }
        table.push(row);
    }
    Ok(table)
}

fn run_gd_rate(cfg: &ExperimentConfig) -> Result<Table> {
    let cov = Covariances::new(cfg)?;
    let (n, b, k) = (cfg.n[0], cfg.b[0], cfg.k[0]);
    let g0inv = gamma0_inverse(&gamma0(&cov.sigma0, n)?)?;
    let init = LsaParams::with_identity_w(-&g0inv)?;
    let sft = SftConfig {
        step: cfg.gamma_step.map_or(StepSize::Auto, StepSize::Fixed),
        steps: cfg.sft_steps,
        ..SftConfig::new(cfg.eta, k)
    };
    let runs = map_indexed(cfg.trials, |t| {
        let start = Instant::now();
        let batch = gen_prompt_batch_with(&cov.a, b, n, RngStream::new(cfg.seed, t as u64), BatchStorage::PhiOnly)?;
        sft_gd(&init, &batch, &g0inv, &sft).map(|run| (run, start.elapsed().as_secs_f64()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut table = Table::new(schema(cfg.experiment, cfg.timing));
    for (trial, (run, secs)) in runs.iter().enumerate() {
        for (step, entry) in run.trajectory.iter().enumerate() {
            let mut row: Vec<Cell> = vec![
                cfg.experiment.name().into(),
                cfg.d.into(),
                cfg.m.into(),
                n.into(),
                b.into(),
                k.into(),
                cfg.rho.into(),
                cfg.r.into(),
                cfg.eta.into(),
                cfg.seed.into(),
                trial.into(),
                step.into(),
                run.gamma.into(),
                entry.loss.into(),
                entry.distance.into(),
                run.predicted_log_rate().into(),
            ];
            if cfg.timing {
                row.push((*secs).into());
            }
            table.push(row);
        }
    }
    Ok(table)
}
