//! Post-test error `E‖ŵ − w*‖²` on fresh prompts with covariance `Σ`: the
//! closed form for one step from zero, and a Monte-Carlo estimator for any `k`.

use crate::error::{Error, Result};
use crate::lsa::{cot_rollout, LsaParams};
use crate::numerics::{ensure_finite, standard_normal_vector, GaussianSampler, Matrix, RngStream, Vector};
use crate::par::map_indexed;

/// Trials per RNG substream in [`posttest_error_mc`].
const MC_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Closed form, present when `k = 1` and `W̃` plays no role.
    pub exact: Option<f64>,
    /// Mean over non-diverged trials (`inf` if every trial diverged).
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub trials: usize,
    pub diverged: usize,
    pub k_used: usize,
}

/// `‖I + ṼΣ‖²_F + (1/n)(tr(ṼΣ²Ṽᵀ) + tr(ṼΣṼᵀ) tr(Σ))`: the expected error of
/// `ŵ = −Ṽ S w*` with `S` an `n`-sample covariance of `N(0, Σ)`.
pub fn posttest_error_exact(v_tilde: &Matrix, sigma: &Matrix, n: usize) -> Result<f64> {
    let d = v_tilde.nrows();
    if !v_tilde.is_square() || sigma.shape() != (d, d) {
        return Err(Error::Dimension(format!(
            "Ṽ is {}x{}, Σ is {}x{}",
            v_tilde.nrows(),
            v_tilde.ncols(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::Domain("prompt length n must be >= 1".into()));
    }
    ensure_finite(v_tilde, "Ṽ")?;
    ensure_finite(sigma, "Σ")?;
    let v_sigma = v_tilde * sigma;
    let bias = (Matrix::identity(d, d) + &v_sigma).norm_squared();
    // tr(ṼΣ²Ṽᵀ) = ‖ṼΣ‖²_F; tr(ṼΣṼᵀ) = Σ_ij (ṼΣ)_ij Ṽ_ij.
    let quad = v_sigma.norm_squared();
    let cross = v_sigma.dot(v_tilde);
    Ok(bias + (quad + cross * sigma.trace()) / n as f64)
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
    diverged: usize,
}

impl Moments {
    fn empty() -> Self {
        Self { count: 0, mean: 0.0, m2: 0.0, diverged: 0 }
    }

    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Self) -> Self {
        let count = self.count + other.count;
        let diverged = self.diverged + other.diverged;
        if count == 0 {
            return Self { diverged, ..Self::empty() };
        }
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        Self { count, mean, m2, diverged }
    }
}

/// Monte-Carlo post-test error: draws `w* ~ N(0, I)` and `n` features from
/// `N(0, Σ)` per trial, rolls out `k` steps from zero and averages
/// `‖ŵ_k − w*‖²`. Diverged trials are counted and left out of the mean.
pub fn posttest_error_mc(
    params: &LsaParams,
    sigma: &Matrix,
    n: usize,
    k: usize,
    trials: usize,
    stream: RngStream,
) -> Result<ErrorReport> {
    let d = params.dim();
    if sigma.shape() != (d, d) {
        return Err(Error::Dimension(format!("Σ must be {d}x{d}")));
    }
    if trials == 0 || n == 0 {
        return Err(Error::Domain(format!("need trials >= 1 and n >= 1 (trials = {trials}, n = {n})")));
    }
    let sampler = GaussianSampler::new(sigma)?;
    let zero = Vector::zeros(d);
    let chunks = trials.div_ceil(MC_CHUNK);
    let partial = map_indexed(chunks, |c| -> Result<Moments> {
        let mut rng = stream.substream(c as u64).rng();
        let mut moments = Moments::empty();
        let len = MC_CHUNK.min(trials - c * MC_CHUNK);
        for _ in 0..len {
            let w_star = standard_normal_vector(d, &mut rng);
            let x = sampler.sample(n, &mut rng);
            let s = &x * x.transpose() / n as f64;
            match cot_rollout(params, &s, &w_star, k, &zero, false) {
                Ok(r) => moments.push((r.last() - &w_star).norm_squared()),
                Err(Error::Divergence { .. }) => moments.diverged += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(moments)
    });
    let mut total = Moments::empty();
    for m in partial {
        total = total.merge(m?);
    }
    let (mc_mean, mc_stderr) = match total.count {
        0 => (f64::INFINITY, f64::INFINITY),
        1 => (total.mean, 0.0),
        c => (total.mean, (total.m2 / (c as f64 - 1.0) / c as f64).sqrt()),
    };
    let exact = if k == 1 { Some(posttest_error_exact(&params.v_tilde, sigma, n)?) } else { None };
    Ok(ErrorReport { exact, mc_mean, mc_stderr, trials, diverged: total.diverged, k_used: k })
}
