//! Browser bindings for three small icl-lab computations: the asymptotic
//! error curve `F(β)`, a desk-sized SFT error-vs-B sweep, and the OS
//! overthinking effect (post-test error against training CoT length).
//!
//! Every export returns a flat `Float64Array`; failures become `NaN` entries
//! so the page can draw gaps instead of aborting.

use icl_lab::evaluator::posttest_error_exact;
use icl_lab::lsa::pretrained_init;
use icl_lab::numerics::{Matrix, RngStream};
use icl_lab::os::{os_gd, OsConfig};
use icl_lab::sft::sft_closed_form;
use icl_lab::task::{gamma0, gamma0_inverse, gen_prompt_batch, gen_prompt_batch_with, BatchStorage, CovarianceKind, CovarianceSpec};
use icl_lab::theory::{theory_components, TheoryInputs, POLE_GUARD};
use icl_lab::Result;
use wasm_bindgen::prelude::wasm_bindgen;

/// Pretrain, post-test and post-train covariances of the two-block model.
fn covariances(d: usize, m: usize, rho: f64, r: f64, eta: f64) -> Result<(Matrix, Matrix, Matrix)> {
    let spec = CovarianceSpec::new(d, m, rho, r, eta, CovarianceKind::Pretrain)?;
    Ok((
        spec.materialize(),
        spec.with_kind(CovarianceKind::Posttest)?.materialize(),
        spec.with_kind(CovarianceKind::Posttrain)?.materialize(),
    ))
}

/// `points` evenly spaced β in `(0, beta_max]` followed by `F` at each. Grid
/// points inside the pole guard are nudged off β = 1.
pub fn theory_curve_values(rho: f64, r: f64, eta: f64, gamma: f64, mu1: f64, beta_max: f64, points: usize) -> Vec<f64> {
    let betas: Vec<f64> = (1..=points)
        .map(|i| beta_max * i as f64 / points as f64)
        .map(|b| if (b - 1.0).abs() <= POLE_GUARD { 1.0 + 2.0 * POLE_GUARD } else { b })
        .collect();
    let base = TheoryInputs { rho, r, eta, gamma, mu1, beta: 0.0 };
    let f = betas.iter().map(|&b| theory_components(&base.with_beta(b)).map_or(f64::NAN, |c| c.f));
    betas.iter().copied().chain(f).collect()
}

/// Mean normalized post-test error `‖·‖²/d` of the closed-form SFT solution
/// at each B in `b_values`.
#[allow(clippy::too_many_arguments)]
pub fn sft_error_values(
    d: usize,
    m: usize,
    n: usize,
    rho: f64,
    r: f64,
    eta: f64,
    b_values: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (sigma0, sigma, a) = covariances(d, m, rho, r, eta)?;
    let g0inv = gamma0_inverse(&gamma0(&sigma0, n)?)?;
    let mut out = Vec::with_capacity(b_values.len());
    for (i, &b) in b_values.iter().enumerate() {
        let mut total = 0.0;
        for t in 0..trials {
            let stream = RngStream::new(seed, (i * trials + t) as u64);
            let batch = gen_prompt_batch_with(&a, b, n, stream, BatchStorage::PhiOnly)?;
            let v = sft_closed_form(&batch, &g0inv, eta)?.v_tilde;
            total += posttest_error_exact(&v, &sigma, n)?;
        }
        out.push(total / (trials as f64 * d as f64));
    }
    Ok(out)
}

/// Normalized post-test error after outcome-supervised GD with CoT length
/// `k = 1..=k_max` (`NaN` where training diverged).
#[allow(clippy::too_many_arguments)]
pub fn os_overthinking_values(
    d: usize,
    m: usize,
    n: usize,
    b: usize,
    rho: f64,
    k_max: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (sigma0, sigma, _) = covariances(d, m, rho, 0.01, 0.2)?;
    let batch = gen_prompt_batch(&sigma, b, n, RngStream::new(seed, 0))?;
    let init = pretrained_init(&sigma0, n)?;
    (1..=k_max)
        .map(|k| {
            let run = os_gd(&init, &batch, &OsConfig { steps, log_spectra: false, ..OsConfig::new(k) })?;
            if run.diverged() {
                return Ok(f64::NAN);
            }
            Ok(posttest_error_exact(&run.params.v_tilde, &sigma, n)? / d as f64)
        })
        .collect()
}

#[wasm_bindgen]
pub fn theory_curve(rho: f64, r: f64, eta: f64, gamma: f64, mu1: f64, beta_max: f64, points: usize) -> Vec<f64> {
    theory_curve_values(rho, r, eta, gamma, mu1, beta_max, points)
}

/// B from `b_step` to `b_max` in steps of `b_step`, then the errors.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sft_error_vs_b(d: usize, m: usize, n: usize, rho: f64, r: f64, eta: f64, b_max: usize, b_step: usize, trials: usize, seed: u32) -> Vec<f64> {
    let b_values: Vec<usize> = (b_step.max(1)..=b_max).step_by(b_step.max(1)).collect();
    let errors = sft_error_values(d, m, n, rho, r, eta, &b_values, trials.max(1), seed as u64)
        .unwrap_or_else(|_| vec![f64::NAN; b_values.len()]);
    b_values.iter().map(|&b| b as f64).chain(errors).collect()
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn os_overthinking(d: usize, m: usize, n: usize, b: usize, rho: f64, k_max: usize, steps: usize, seed: u32) -> Vec<f64> {
    os_overthinking_values(d, m, n, b, rho, k_max, steps, seed as u64).unwrap_or_else(|_| vec![f64::NAN; k_max])
}
