//! Supervised fine-tuning on exponentially converging CoT targets
//! `w_i = (1 − (1−η)^i) w*`: loss, the minimal-deviation minimizer, full-batch
//! GD in the `W̃ = I` slice, the infinite-batch limit, and the first-order
//! approximation used by the asymptotic theory.

use crate::error::{Error, Result};
use crate::lsa::LsaParams;
use crate::numerics::{ensure_finite, pinv, Matrix, PINV_REL_TOL};
use crate::task::PromptBatch;

/// GD step size for [`sft_gd`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// `B / (c_k · λ_max(M))`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftConfig {
    pub eta: f64,
    pub k: usize,
    pub step: StepSize,
    pub steps: usize,
    /// Reject step sizes at or above `2B / (c_k · λ_max(M))` instead of running.
    pub strict: bool,
}

impl SftConfig {
    pub fn new(eta: f64, k: usize) -> Self {
        Self { eta, k, step: StepSize::Auto, steps: 100, strict: false }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Domain(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if self.k == 0 {
            return Err(Error::Domain("CoT length k must be >= 1".into()));
        }
        Ok(())
    }
}

/// `c_k = Σ_{i=0..k} (1−η)^{2i}`.
pub fn c_k(eta: f64, k: usize) -> f64 {
    let rho_sq = (1.0 - eta) * (1.0 - eta);
    (0..=k).map(|i| rho_sq.powi(i as i32)).sum()
}

fn is_identity(m: &Matrix) -> bool {
    m.is_square() && m.iter().enumerate().all(|(idx, &x)| {
        let (i, j) = (idx % m.nrows(), idx / m.nrows());
        x == if i == j { 1.0 } else { 0.0 }
    })
}

/// SFT loss. Uses the `Φ` closed form when `W̃ = I` exactly, otherwise the
/// per-prompt residuals (which need stored covariances).
pub fn sft_loss(params: &LsaParams, batch: &PromptBatch, eta: f64, k: usize) -> Result<f64> {
    if is_identity(&params.w_tilde) {
        sft_loss_identity(&params.v_tilde, batch, eta, k)
    } else {
        sft_loss_general(params, batch, eta, k)
    }
}

/// `(c_k / 2B) ‖ṼΦ + ηΩ‖²_F`, valid for `W̃ = I`.
pub fn sft_loss_identity(v_tilde: &Matrix, batch: &PromptBatch, eta: f64, k: usize) -> Result<f64> {
    check_batch(batch, v_tilde.nrows())?;
    let residual = v_tilde * &batch.phi + &batch.omega * eta;
    Ok(c_k(eta, k) / (2.0 * batch.len() as f64) * residual.norm_squared())
}

/// `(1/2B) Σ_τ Σ_{i=0..k} ‖Ṽ S_τ (W̃ − I) w*_τ − (1−η)^i (Ṽ S_τ W̃ + ηI) w*_τ‖²`.
pub fn sft_loss_general(params: &LsaParams, batch: &PromptBatch, eta: f64, k: usize) -> Result<f64> {
    let d = params.dim();
    check_batch(batch, d)?;
    let covs = batch.covariances()?;
    let rho = 1.0 - eta;
    let mut total = 0.0;
    for (tau, s) in covs.iter().enumerate() {
        let w = batch.omega.column(tau);
        let w_tilde_w = &params.w_tilde * w;
        let v_s = &params.v_tilde * s;
        let shift = &v_s * (&w_tilde_w - w);
        let target = &v_s * &w_tilde_w + w * eta;
        let mut rho_i = 1.0;
        for _ in 0..=k {
            total += (&shift - &target * rho_i).norm_squared();
            rho_i *= rho;
        }
    }
    Ok(total / (2.0 * batch.len() as f64))
}

fn check_batch(batch: &PromptBatch, d: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Domain("batch must contain at least one prompt".into()));
    }
    if batch.dim() != d {
        return Err(Error::Dimension(format!("params are {d}-dimensional, batch is {}-dimensional", batch.dim())));
    }
    Ok(())
}

/// Zero-loss point closest to `(−Γ₀⁻¹, I)`:
/// `Ṽ* = −η Ω Φ† − Γ₀⁻¹ (I − Φ Φ†)`, `W̃* = I`.
pub fn sft_closed_form(batch: &PromptBatch, gamma0_inv: &Matrix, eta: f64) -> Result<LsaParams> {
    let d = batch.dim();
    if gamma0_inv.shape() != (d, d) {
        return Err(Error::Dimension(format!("Γ₀⁻¹ must be {d}x{d}")));
    }
    let phi_pinv = pinv(&batch.phi, PINV_REL_TOL)?;
    let projector = &batch.phi * &phi_pinv;
    let v = -(&batch.omega * &phi_pinv) * eta - gamma0_inv * (Matrix::identity(d, d) - projector);
    LsaParams::with_identity_w(v)
}

/// Extreme eigenvalues of `M = ΦΦᵀ`: `(λ_max, smallest eigenvalue above
/// the relative cutoff)`.
pub fn gram_extreme_eigenvalues(phi: &Matrix) -> (f64, f64) {
    // The nonzero spectrum of ΦΦᵀ equals that of ΦᵀΦ; use the smaller one.
    let gram = if phi.nrows() <= phi.ncols() { phi * phi.transpose() } else { phi.transpose() * phi };
    let eig = gram.symmetric_eigenvalues();
    let max = eig.max();
    let min_pos = eig
        .iter()
        .copied()
        .filter(|&l| l > PINV_REL_TOL * max)
        .fold(f64::INFINITY, f64::min);
    (max, if min_pos.is_finite() { min_pos } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftStep {
    pub loss: f64,
    /// `‖Ṽ_t − Ṽ*‖_F`.
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct SftRun {
    pub params: LsaParams,
    pub target: LsaParams,
    /// Entry `t` describes `Ṽ_t`; entry 0 is the initialization.
    pub trajectory: Vec<SftStep>,
    pub gamma: f64,
    pub lambda_max: f64,
    pub lambda_min_pos: f64,
}

impl SftRun {
    /// Predicted per-step contraction of the distance under the auto step.
    pub fn predicted_log_rate(&self) -> f64 {
        (1.0 - self.lambda_min_pos / self.lambda_max).ln()
    }
}

/// Divergence is declared once the distance exceeds this multiple of the
/// initial distance (or 1, whichever is larger).
const DIVERGENCE_FACTOR: f64 = 1e8;

/// Full-batch GD on the `W̃ = I` slice:
/// `Ṽ ← Ṽ − (γ c_k / B)(ṼΦ + ηΩ)Φᵀ`. `init.w_tilde` is ignored.
pub fn sft_gd(init: &LsaParams, batch: &PromptBatch, gamma0_inv: &Matrix, cfg: &SftConfig) -> Result<SftRun> {
    cfg.validate()?;
    check_batch(batch, init.dim())?;
    let b = batch.len() as f64;
    let ck = c_k(cfg.eta, cfg.k);
    let (lambda_max, lambda_min_pos) = gram_extreme_eigenvalues(&batch.phi);
    let gamma = match cfg.step {
        StepSize::Auto => {
            if lambda_max == 0.0 {
                0.0
            } else {
                b / (ck * lambda_max)
            }
        }
        StepSize::Fixed(g) => g,
    };
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::Config(vec![format!("GD step must be finite and >= 0, got {gamma}")]));
    }
    if cfg.strict && lambda_max > 0.0 {
        let bound = 2.0 * b / (ck * lambda_max);
        if gamma >= bound {
            return Err(Error::Config(vec![format!(
                "step {gamma:.6e} violates the contraction bound 2B/(c_k λ_max) = {bound:.6e}"
            )]));
        }
    }

    let target = sft_closed_form(batch, gamma0_inv, cfg.eta)?;
    let phi_t = batch.phi.transpose();
    let lr = gamma * ck / b;
    let mut v = init.v_tilde.clone();
    let record = |v: &Matrix| -> Result<SftStep> {
        Ok(SftStep { loss: sft_loss_identity(v, batch, cfg.eta, cfg.k)?, distance: (v - &target.v_tilde).norm() })
    };
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    trajectory.push(record(&v)?);
    let limit = DIVERGENCE_FACTOR * trajectory[0].distance.max(1.0);
    for step in 1..=cfg.steps {
        let residual = &v * &batch.phi + &batch.omega * cfg.eta;
        v -= residual * &phi_t * lr;
        let entry = record(&v)?;
        if !entry.distance.is_finite() || entry.distance > limit {
            return Err(Error::Divergence { step, magnitude: entry.distance });
        }
        trajectory.push(entry);
    }
    Ok(SftRun { params: LsaParams::with_identity_w(v)?, target, trajectory, gamma, lambda_max, lambda_min_pos })
}

/// Least-squares slope of `ln(distance)` against step over `range`, skipping
/// entries whose distance has fallen to round-off.
pub fn fitted_log_rate(trajectory: &[SftStep], range: std::ops::Range<usize>) -> Option<f64> {
    let floor = 1e-12 * trajectory.first()?.distance.max(1e-300);
    let points: Vec<(f64, f64)> = trajectory[range.start.min(trajectory.len())..range.end.min(trajectory.len())]
        .iter()
        .enumerate()
        .filter(|(_, s)| s.distance > floor)
        .map(|(i, s)| ((range.start + i) as f64, s.distance.ln()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    Some(sxy / sxx)
}

/// Infinite-batch limit of `Ṽ*`:
/// `−η · pinv((n+1)/n · A + tr(A)/n · AA†) − Γ₀⁻¹ (I − AA†)`.
pub fn sft_population_limit(a: &Matrix, gamma0_inv: &Matrix, eta: f64, n: usize) -> Result<Matrix> {
    if !a.is_square() || a.shape() != gamma0_inv.shape() {
        return Err(Error::Dimension("A and Γ₀⁻¹ must be square and of equal size".into()));
    }
    if n == 0 {
        return Err(Error::Domain("prompt length n must be >= 1".into()));
    }
    ensure_finite(a, "A")?;
    let d = a.nrows();
    let nf = n as f64;
    let proj = a * pinv(a, PINV_REL_TOL)?;
    let inner = a * ((nf + 1.0) / nf) + &proj * (a.trace() / nf);
    Ok(-pinv(&inner, PINV_REL_TOL)? * eta - gamma0_inv * (Matrix::identity(d, d) - proj))
}

/// Deterministic and first-order stochastic parts of `Ṽ*` around the
/// population design `AΩ`.
#[derive(Debug, Clone)]
pub struct FirstOrder {
    /// `V_S = −η Ω (AΩ)† − Γ₀⁻¹ (I − AΩ (AΩ)†)`.
    pub v_s: Matrix,
    /// `V_N = −V_S (Φ − AΩ) (AΩ)†`.
    pub v_n: Matrix,
}

impl FirstOrder {
    pub fn combined(&self) -> Matrix {
        &self.v_s + &self.v_n
    }
}

pub fn sft_first_order(batch: &PromptBatch, a: &Matrix, gamma0_inv: &Matrix, eta: f64) -> Result<FirstOrder> {
    let d = batch.dim();
    if a.shape() != (d, d) || gamma0_inv.shape() != (d, d) {
        return Err(Error::Dimension(format!("A and Γ₀⁻¹ must be {d}x{d}")));
    }
    let design = a * &batch.omega;
    let design_pinv = pinv(&design, PINV_REL_TOL)?;
    let proj = &design * &design_pinv;
    let v_s = -(&batch.omega * &design_pinv) * eta - gamma0_inv * (Matrix::identity(d, d) - proj);
    let noise = &batch.phi - &design;
    let v_n = -(&v_s * noise) * &design_pinv;
    Ok(FirstOrder { v_s, v_n })
}

/// Plain finite-difference descent over both blocks `(Ṽ, W̃)`. Exploratory:
/// no convergence theory covers the joint problem.
pub fn joint_fd_descent<F>(init: &LsaParams, loss: F, step: f64, steps: usize, h: f64) -> Result<(LsaParams, Vec<f64>)>
where
    F: Fn(&LsaParams) -> Result<f64>,
{
    let mut params = init.clone();
    let mut history = vec![loss(&params)?];
    for _ in 0..steps {
        let gv = fd_gradient(&params, &loss, h, true)?;
        let gw = fd_gradient(&params, &loss, h, false)?;
        params.v_tilde -= gv * step;
        params.w_tilde -= gw * step;
        let value = loss(&params)?;
        if !value.is_finite() {
            return Err(Error::Divergence { step: history.len(), magnitude: value });
        }
        history.push(value);
    }
    Ok((params, history))
}

fn fd_gradient<F>(params: &LsaParams, loss: &F, h: f64, wrt_v: bool) -> Result<Matrix>
where
    F: Fn(&LsaParams) -> Result<f64>,
{
    let d = params.dim();
    let mut grad = Matrix::zeros(d, d);
    let mut probe = params.clone();
    for j in 0..d {
        for i in 0..d {
            let block = if wrt_v { &mut probe.v_tilde } else { &mut probe.w_tilde };
            let orig = block[(i, j)];
            block[(i, j)] = orig + h;
            let up = loss(&probe)?;
            let block = if wrt_v { &mut probe.v_tilde } else { &mut probe.w_tilde };
            block[(i, j)] = orig - h;
            let down = loss(&probe)?;
            let block = if wrt_v { &mut probe.v_tilde } else { &mut probe.w_tilde };
            block[(i, j)] = orig;
            grad[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}
