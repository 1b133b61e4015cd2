//! Outcome supervision: loss on the final rollout step only, its analytic
//! gradient in `Ṽ` (with `W̃ = I`), the curvature proxy
//! `(1/B) Σ k² ρ(M_τ)^{2k−2} ‖w*_τ‖² ‖S_τ‖`, and a GD trainer that records
//! spectral telemetry and stops cleanly on divergence.

use crate::error::{Error, Result};
use crate::lsa::{cot_rollout, LsaParams, OVERFLOW_THRESHOLD};
use crate::numerics::{operator_norm, spectral_radius, Matrix, Vector};
use crate::par::map_indexed;
use crate::task::PromptBatch;

/// How [`os_gd`] picks its step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OsStep {
    Fixed(f64),
    /// `c / os_hessian_bound(init)`.
    HessianScaled(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsConfig {
    pub k: usize,
    pub step: OsStep,
    pub steps: usize,
    /// Cap on the Frobenius norm of each gradient step. Off by default.
    pub clip: Option<f64>,
    /// Train only `Ṽ`. When false, `W̃` is also updated using
    /// finite-difference gradients (exploratory, no theory behind it).
    pub w_fixed: bool,
    /// Compute per-prompt spectral radii every step.
    pub log_spectra: bool,
}

impl OsConfig {
    pub fn new(k: usize) -> Self {
        Self { k, step: OsStep::HessianScaled(0.5), steps: 200, clip: None, w_fixed: true, log_spectra: true }
    }

    fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.k == 0 {
            errors.push("k must be >= 1".to_string());
        }
        match self.step {
            OsStep::Fixed(g) | OsStep::HessianScaled(g) if !(g >= 0.0 && g.is_finite()) => {
                errors.push(format!("step parameter must be finite and >= 0, got {g}"))
            }
            _ => {}
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                errors.push(format!("clip must be > 0, got {c}"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

fn guard(v: &Vector, step: usize) -> Result<()> {
    let magnitude = v.amax();
    if !magnitude.is_finite() || magnitude > OVERFLOW_THRESHOLD {
        return Err(Error::Divergence { step, magnitude });
    }
    Ok(())
}

fn check(batch: &PromptBatch, d: usize, k: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Domain("batch must contain at least one prompt".into()));
    }
    if batch.dim() != d {
        return Err(Error::Dimension(format!("params are {d}-dimensional, batch is {}-dimensional", batch.dim())));
    }
    if k == 0 {
        return Err(Error::Domain("k must be >= 1".into()));
    }
    Ok(())
}

/// `(1/2B) Σ_τ ‖(I + Σ_{i<k} (Ṽ S_τ W̃ + I)^i Ṽ S_τ) w*_τ‖²`.
pub fn os_loss(params: &LsaParams, batch: &PromptBatch, k: usize) -> Result<f64> {
    let d = params.dim();
    check(batch, d, k)?;
    let covs = batch.covariances()?;
    let mut total = 0.0;
    for (tau, s) in covs.iter().enumerate() {
        let w = batch.omega.column(tau).into_owned();
        let mut term = &params.v_tilde * (s * &w);
        let mut acc = w + &term;
        for i in 1..k {
            term = &term + &params.v_tilde * (s * (&params.w_tilde * &term));
            guard(&term, i)?;
            acc += &term;
        }
        total += acc.norm_squared();
    }
    Ok(total / (2.0 * batch.len() as f64))
}

/// `(1/2B) Σ_τ ‖(I + Ṽ S_τ)^k w*_τ‖²`; only meaningful for `W̃ = I`.
pub fn os_loss_power(v_tilde: &Matrix, batch: &PromptBatch, k: usize) -> Result<f64> {
    check(batch, v_tilde.nrows(), k)?;
    let covs = batch.covariances()?;
    let mut total = 0.0;
    for (tau, s) in covs.iter().enumerate() {
        let mut u = batch.omega.column(tau).into_owned();
        for step in 1..=k {
            u = &u + v_tilde * (s * &u);
            guard(&u, step)?;
        }
        total += u.norm_squared();
    }
    Ok(total / (2.0 * batch.len() as f64))
}

/// `½ · mean_τ ‖ŵ_{k,τ} − w*_τ‖²` with `ŵ` from [`cot_rollout`] started at 0.
pub fn os_loss_rollout(params: &LsaParams, batch: &PromptBatch, k: usize) -> Result<f64> {
    check(batch, params.dim(), k)?;
    let covs = batch.covariances()?;
    let zero = Vector::zeros(params.dim());
    let mut total = 0.0;
    for (tau, s) in covs.iter().enumerate() {
        let w = batch.omega.column(tau).into_owned();
        let r = cot_rollout(params, s, &w, k, &zero, false)?;
        total += (r.last() - w).norm_squared();
    }
    Ok(total / (2.0 * batch.len() as f64))
}

/// Analytic `∇_Ṽ` of the `W̃ = I` loss:
/// `(1/B) Σ_τ Σ_{j<k} (Mᵀ)^j M^k w wᵀ (Mᵀ)^{k−1−j} Sᵀ` with `M = I + Ṽ S_τ`.
pub fn os_grad(v_tilde: &Matrix, batch: &PromptBatch, k: usize) -> Result<Matrix> {
    let d = v_tilde.nrows();
    check(batch, d, k)?;
    let covs = batch.covariances()?;
    let parts = map_indexed(covs.len(), |tau| prompt_grad(v_tilde, &covs[tau], &batch.omega.column(tau).into_owned(), k));
    let mut grad = Matrix::zeros(d, d);
    for part in parts {
        grad += part?;
    }
    Ok(grad / batch.len() as f64)
}

fn prompt_grad(v: &Matrix, s: &Matrix, w: &Vector, k: usize) -> Result<Matrix> {
    // powers[i] = M^i w
    let mut powers = Vec::with_capacity(k + 1);
    powers.push(w.clone());
    for i in 1..=k {
        let prev = &powers[i - 1];
        let next = prev + v * (s * prev);
        guard(&next, i)?;
        powers.push(next);
    }
    let mut grad = Matrix::zeros(v.nrows(), v.ncols());
    // left = (Mᵀ)^j M^k w, built up with Mᵀ x = x + Sᵀ Ṽᵀ x.
    let mut left = powers[k].clone();
    for j in 0..k {
        let right = s * &powers[k - 1 - j];
        grad.ger(1.0, &left, &right, 1.0);
        left = &left + s.transpose() * (v.transpose() * &left);
        guard(&left, j + 1)?;
    }
    Ok(grad)
}

/// Per-prompt `M_τ = I + Ṽ S_τ`.
fn prompt_step_matrix(v: &Matrix, s: &Matrix) -> Matrix {
    Matrix::identity(v.nrows(), v.ncols()) + v * s
}

/// Spectral radii `ρ(I + Ṽ S_τ)` for every prompt.
pub fn prompt_spectral_radii(v_tilde: &Matrix, batch: &PromptBatch) -> Result<Vec<f64>> {
    let covs = batch.covariances()?;
    map_indexed(covs.len(), |tau| spectral_radius(&prompt_step_matrix(v_tilde, &covs[tau])))
        .into_iter()
        .collect()
}

/// `(1/B) Σ_τ k² ρ(M_τ)^{2k−2} ‖w*_τ‖² ‖S_τ‖_op`.
pub fn os_hessian_bound(v_tilde: &Matrix, batch: &PromptBatch, k: usize) -> Result<f64> {
    check(batch, v_tilde.nrows(), k)?;
    let radii = prompt_spectral_radii(v_tilde, batch)?;
    let covs = batch.covariances()?;
    let kf = k as f64;
    let total: f64 = radii
        .iter()
        .zip(covs)
        .enumerate()
        .map(|(tau, (r, s))| kf * kf * r.powi(2 * k as i32 - 2) * batch.omega.column(tau).norm_squared() * operator_norm(s))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Central-difference Hessian-vector product `(∇L(Ṽ + hD) − ∇L(Ṽ − hD)) / 2h`.
pub fn os_hvp_probe(v_tilde: &Matrix, batch: &PromptBatch, k: usize, direction: &Matrix, h: f64) -> Result<Matrix> {
    let up = os_grad(&(v_tilde + direction * h), batch, k)?;
    let down = os_grad(&(v_tilde - direction * h), batch, k)?;
    Ok((up - down) / (2.0 * h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub spectral_radii: Vec<f64>,
    /// Share of prompts with `ρ(M_τ) > 1`.
    pub fraction_unstable: f64,
    pub hessian_bound: f64,
    pub grad_norm: f64,
}

impl StabilityReport {
    pub fn mean_radius(&self) -> f64 {
        if self.spectral_radii.is_empty() {
            return f64::NAN;
        }
        self.spectral_radii.iter().sum::<f64>() / self.spectral_radii.len() as f64
    }
}

pub fn stability_report(v_tilde: &Matrix, batch: &PromptBatch, k: usize, grad_norm: f64) -> Result<StabilityReport> {
    let spectral_radii = prompt_spectral_radii(v_tilde, batch)?;
    let unstable = spectral_radii.iter().filter(|&&r| r > 1.0).count();
    let fraction_unstable = unstable as f64 / spectral_radii.len().max(1) as f64;
    let covs = batch.covariances()?;
    let kf = k as f64;
    let hessian_bound = spectral_radii
        .iter()
        .zip(covs)
        .enumerate()
        .map(|(tau, (r, s))| kf * kf * r.powi(2 * k as i32 - 2) * batch.omega.column(tau).norm_squared() * operator_norm(s))
        .sum::<f64>()
        / batch.len() as f64;
    Ok(StabilityReport { spectral_radii, fraction_unstable, hessian_bound, grad_norm })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsStepRecord {
    pub loss: f64,
    pub grad_norm: f64,
    pub stability: Option<StabilityReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OsStatus {
    Completed,
    /// The update producing iterate `step` overflowed or went non-finite.
    Diverged { step: usize },
}

#[derive(Debug, Clone)]
pub struct OsRun {
    /// Final iterate, or the last stable one after a divergence.
    pub params: LsaParams,
    pub trajectory: Vec<OsStepRecord>,
    pub status: OsStatus,
    pub gamma: f64,
}

impl OsRun {
    pub fn diverged(&self) -> bool {
        matches!(self.status, OsStatus::Diverged { .. })
    }

    /// The run as a `Result`, mapping divergence to [`Error::Divergence`].
    pub fn into_result(self) -> Result<OsRun> {
        match self.status {
            OsStatus::Completed => Ok(self),
            OsStatus::Diverged { step } => {
                Err(Error::Divergence { step, magnitude: self.trajectory.last().map_or(f64::NAN, |r| r.loss) })
            }
        }
    }
}

fn fd_grad_w(params: &LsaParams, batch: &PromptBatch, k: usize, h: f64) -> Result<Matrix> {
    let d = params.dim();
    let mut grad = Matrix::zeros(d, d);
    let mut probe = params.clone();
    for j in 0..d {
        for i in 0..d {
            let orig = probe.w_tilde[(i, j)];
            probe.w_tilde[(i, j)] = orig + h;
            let up = os_loss(&probe, batch, k)?;
            probe.w_tilde[(i, j)] = orig - h;
            let down = os_loss(&probe, batch, k)?;
            probe.w_tilde[(i, j)] = orig;
            grad[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}

fn fd_grad_v(params: &LsaParams, batch: &PromptBatch, k: usize, h: f64) -> Result<Matrix> {
    let d = params.dim();
    let mut grad = Matrix::zeros(d, d);
    let mut probe = params.clone();
    for j in 0..d {
        for i in 0..d {
            let orig = probe.v_tilde[(i, j)];
            probe.v_tilde[(i, j)] = orig + h;
            let up = os_loss(&probe, batch, k)?;
            probe.v_tilde[(i, j)] = orig - h;
            let down = os_loss(&probe, batch, k)?;
            probe.v_tilde[(i, j)] = orig;
            grad[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}

const FD_STEP: f64 = 1e-6;

/// Gradient descent on the OS loss from `init`. Divergence is reported
/// through [`OsRun::status`], keeping the last stable iterate.
pub fn os_gd(init: &LsaParams, batch: &PromptBatch, cfg: &OsConfig) -> Result<OsRun> {
    cfg.validate()?;
    check(batch, init.dim(), cfg.k)?;
    let gamma = match cfg.step {
        OsStep::Fixed(g) => g,
        OsStep::HessianScaled(c) => {
            let bound = os_hessian_bound(&init.v_tilde, batch, cfg.k)?;
            if !(bound > 0.0) || !bound.is_finite() {
                return Err(Error::Config(vec![format!(
                    "Hessian-scaled step needs a positive finite curvature bound at init, got {bound}"
                )]));
            }
            c / bound
        }
    };

    let mut params = init.clone();
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    let evaluate = |p: &LsaParams| -> Result<(f64, Matrix, Option<Matrix>)> {
        let loss = os_loss(p, batch, cfg.k)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("OS loss"));
        }
        if cfg.w_fixed {
            Ok((loss, os_grad(&p.v_tilde, batch, cfg.k)?, None))
        } else {
            Ok((loss, fd_grad_v(p, batch, cfg.k, FD_STEP)?, Some(fd_grad_w(p, batch, cfg.k, FD_STEP)?)))
        }
    };
    let record = |p: &LsaParams, loss: f64, gv: &Matrix, gw: &Option<Matrix>| -> Result<OsStepRecord> {
        let grad_norm = (gv.norm_squared() + gw.as_ref().map_or(0.0, |g| g.norm_squared())).sqrt();
        let stability = if cfg.log_spectra { Some(stability_report(&p.v_tilde, batch, cfg.k, grad_norm)?) } else { None };
        Ok(OsStepRecord { loss, grad_norm, stability })
    };

    let (loss, mut gv, mut gw) = evaluate(&params)?;
    trajectory.push(record(&params, loss, &gv, &gw)?);
    for step in 1..=cfg.steps {
        let mut scale = gamma;
        if let Some(cap) = cfg.clip {
            let norm = trajectory.last().expect("nonempty").grad_norm;
            if norm > cap {
                scale *= cap / norm;
            }
        }
        let mut next = params.clone();
        next.v_tilde -= &gv * scale;
        if let Some(g) = &gw {
            next.w_tilde -= g * scale;
        }
        match evaluate(&next) {
            Ok((l, g1, g2)) if next.v_tilde.iter().chain(next.w_tilde.iter()).all(|x| x.is_finite()) => {
                params = next;
                (gv, gw) = (g1, g2);
                trajectory.push(record(&params, l, &gv, &gw)?);
            }
            Ok(_) | Err(Error::Divergence { .. }) | Err(Error::NonFinite(_)) => {
                return Ok(OsRun { params, trajectory, status: OsStatus::Diverged { step }, gamma });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(OsRun { params, trajectory, status: OsStatus::Completed, gamma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsa::pretrained_init;
    use crate::numerics::RngStream;
    use crate::task::{gamma0, gamma0_inverse, gen_prompt_batch, CovarianceKind, CovarianceSpec, PromptBatch};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn diag(v: &[f64]) -> Matrix {
        Matrix::from_diagonal(&Vector::from_column_slice(v))
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 13).rng();
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn scalar_batch() -> PromptBatch {
        PromptBatch::from_parts(4, diag(&[1.0]), vec![diag(&[2.0])]).unwrap()
    }

    fn random_batch(d: usize, b: usize, seed: u64) -> PromptBatch {
        gen_prompt_batch(&Matrix::identity(d, d), b, 2 * d + 3, RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn scalar_loss_and_gradient() {
        let batch = scalar_batch();
        let p = LsaParams::with_identity_w(diag(&[-0.1])).unwrap();
        assert_abs_diff_eq!(os_loss(&p, &batch, 2).unwrap(), 0.2048, epsilon = 1e-15);
        assert_abs_diff_eq!(os_loss_power(&p.v_tilde, &batch, 2).unwrap(), 0.2048, epsilon = 1e-15);
        assert_abs_diff_eq!(os_grad(&p.v_tilde, &batch, 2).unwrap()[(0, 0)], 2.048, epsilon = 1e-14);
        // ρ(M) = 0.8: 4 · 0.64 · 1 · 2.
        assert_abs_diff_eq!(os_hessian_bound(&p.v_tilde, &batch, 2).unwrap(), 5.12, epsilon = 1e-12);
    }

    #[test]
    fn exact_inverse_zeroes_loss_and_gradient() {
        let s = diag(&[2.0, 0.5]);
        let batch = PromptBatch::from_parts(3, gaussian(2, 1, 1), vec![s.clone()]).unwrap();
        let v = -s.try_inverse().unwrap();
        let p = LsaParams::with_identity_w(v.clone()).unwrap();
        for k in 1..=4 {
            assert!(os_loss(&p, &batch, k).unwrap() <= 1e-28);
            assert!(os_grad(&v, &batch, k).unwrap().amax() <= 1e-14);
        }
        assert_eq!(os_hessian_bound(&v, &batch, 3).unwrap(), 0.0);
    }

    #[test]
    fn hessian_bound_k_squared_at_unit_radius() {
        let batch = scalar_batch();
        let v = diag(&[0.0]);
        let b4 = os_hessian_bound(&v, &batch, 4).unwrap();
        let b8 = os_hessian_bound(&v, &batch, 8).unwrap();
        assert_abs_diff_eq!(b8 / b4, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn hvp_matches_scalar_second_derivative() {
        // L(V) = ½ (1 + 2V)^{2k}, so L'' = 4k(2k−1)(1 + 2V)^{2k−2}.
        let batch = scalar_batch();
        for k in [1usize, 2, 4, 8] {
            let v = diag(&[-0.1]);
            let hv = os_hvp_probe(&v, &batch, k, &diag(&[1.0]), 1e-5).unwrap()[(0, 0)];
            let expected = 4.0 * k as f64 * (2.0 * k as f64 - 1.0) * 0.8f64.powi(2 * k as i32 - 2);
            assert!((hv - expected).abs() <= 1e-5 * expected, "k={k}: {hv} vs {expected}");
        }
    }

    #[test]
    fn gradient_scale_regimes() {
        // Diagonal instances: all radii 0.5 → shrinking in k; all 1.1 → growing.
        let batch = PromptBatch::from_parts(4, Matrix::from_column_slice(2, 1, &[1.0, 0.5]), vec![Matrix::identity(2, 2)]).unwrap();
        for (v, growing) in [(-0.5, false), (0.1, true)] {
            let vm = Matrix::identity(2, 2) * v;
            let norms: Vec<f64> = (2..=10).map(|k| os_grad(&vm, &batch, k).unwrap().norm()).collect();
            for pair in norms.windows(2) {
                assert_eq!(pair[1] > pair[0], growing, "{norms:?}");
            }
        }
    }

    #[test]
    fn gd_with_zero_step_is_constant() {
        let batch = random_batch(3, 4, 1);
        let init = LsaParams::with_identity_w(gaussian(3, 3, 2) * 0.1).unwrap();
        let mut cfg = OsConfig::new(2);
        cfg.step = OsStep::Fixed(0.0);
        cfg.steps = 5;
        let run = os_gd(&init, &batch, &cfg).unwrap();
        assert_eq!(run.params, init);
        assert!(run.trajectory.windows(2).all(|w| w[0].loss == w[1].loss));
    }

    fn two_block(d: usize, m: usize, rho: f64, n: usize, aligned: bool) -> (LsaParams, Matrix) {
        let spec = CovarianceSpec::new(d, m, rho, 0.0, 0.5, CovarianceKind::Pretrain).unwrap();
        let sigma0 = spec.materialize();
        let sigma = if aligned { sigma0.clone() } else { spec.with_kind(CovarianceKind::Posttest).unwrap().materialize() };
        (pretrained_init(&sigma0, n).unwrap(), sigma)
    }

    #[test]
    fn aligned_init_is_stable_and_descends() {
        let (init, sigma) = two_block(6, 3, 0.5, 2000, true);
        let batch = gen_prompt_batch(&sigma, 20, 2000, RngStream::new(3, 0)).unwrap();
        let mut cfg = OsConfig::new(3);
        cfg.step = OsStep::HessianScaled(0.1);
        cfg.steps = 30;
        let run = os_gd(&init, &batch, &cfg).unwrap();
        assert_eq!(run.status, OsStatus::Completed);
        assert!(run.trajectory[0].stability.as_ref().unwrap().mean_radius() < 1.0);
        assert!(run.trajectory.windows(2).all(|w| w[1].loss <= w[0].loss));
    }

    #[test]
    fn misaligned_init_diverges_with_moderate_step() {
        let (init, sigma) = two_block(6, 3, 0.1, 2000, false);
        let batch = gen_prompt_batch(&sigma, 20, 2000, RngStream::new(4, 0)).unwrap();
        let mut cfg = OsConfig::new(4);
        let radius = stability_report(&init.v_tilde, &batch, 4, 0.0).unwrap().mean_radius();
        assert!(radius > 1.0);
        let loss0 = os_loss(&init, &batch, 4).unwrap();
        // The step the curvature rule would pick in the aligned setting.
        let (aligned_init, aligned_sigma) = two_block(6, 3, 0.1, 2000, true);
        let aligned_batch = gen_prompt_batch(&aligned_sigma, 20, 2000, RngStream::new(4, 0)).unwrap();
        let gamma = 0.5 / os_hessian_bound(&aligned_init.v_tilde, &aligned_batch, 4).unwrap();
        cfg.step = OsStep::Fixed(gamma);
        cfg.steps = 200;
        let run = os_gd(&init, &batch, &cfg).unwrap();
        assert!(run.diverged() || run.trajectory.iter().any(|r| r.loss > 1e6 * loss0));
        if run.diverged() {
            assert!(run.params.v_tilde.iter().all(|x| x.is_finite()));
            assert!(run.clone().into_result().is_err());
        }
    }

    #[test]
    fn init_radius_tracks_shift_ratio() {
        // For large n, ρ(I − Γ₀⁻¹ S_τ) ≈ ρ(Γ₀⁻¹ Δ).
        let (d, m, rho, n) = (8, 4, 0.1, 20_000);
        let (init, sigma) = two_block(d, m, rho, n, false);
        let spec = CovarianceSpec::new(d, m, rho, 0.0, 0.5, CovarianceKind::Shift).unwrap();
        let sigma0 = spec.with_kind(CovarianceKind::Pretrain).unwrap().materialize();
        let ratio = spectral_radius(&(gamma0_inverse(&gamma0(&sigma0, n).unwrap()).unwrap() * spec.materialize())).unwrap();
        let batch = gen_prompt_batch(&sigma, 10, n, RngStream::new(5, 0)).unwrap();
        let mean = stability_report(&init.v_tilde, &batch, 2, 0.0).unwrap().mean_radius();
        assert!((mean - ratio).abs() <= 0.1 * ratio.max(1.0), "{mean} vs {ratio}");
    }

    #[test]
    fn clipping_limits_step() {
        let batch = random_batch(3, 4, 9);
        let init = LsaParams::with_identity_w(gaussian(3, 3, 2) * 0.1).unwrap();
        let mut cfg = OsConfig::new(2);
        cfg.step = OsStep::Fixed(1.0);
        cfg.steps = 1;
        cfg.clip = Some(1e-3);
        let run = os_gd(&init, &batch, &cfg).unwrap();
        assert!((&run.params.v_tilde - &init.v_tilde).norm() <= 1e-3 * (1.0 + 1e-12));
    }

    #[test]
    fn joint_training_runs() {
        let batch = random_batch(2, 3, 10);
        let init = LsaParams::with_identity_w(gaussian(2, 2, 3) * 0.05).unwrap();
        let mut cfg = OsConfig::new(2);
        cfg.w_fixed = false;
        cfg.step = OsStep::HessianScaled(0.2);
        cfg.steps = 10;
        let run = os_gd(&init, &batch, &cfg).unwrap();
        assert!(run.trajectory.last().unwrap().loss < run.trajectory[0].loss);
        assert_ne!(run.params.w_tilde, init.w_tilde);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn three_loss_forms_agree(d in 1usize..=6, b in 1usize..=5, k in 1usize..=5, seed in any::<u64>()) {
            let batch = random_batch(d, b, seed);
            let v = gaussian(d, d, seed ^ 1) * 0.2;
            let identity = LsaParams::with_identity_w(v.clone()).unwrap();
            let general = os_loss(&identity, &batch, k).unwrap();
            let power = os_loss_power(&v, &batch, k).unwrap();
            let rollout = os_loss_rollout(&identity, &batch, k).unwrap();
            let tol = 1e-10 * general.max(1.0);
            prop_assert!((general - power).abs() <= tol);
            prop_assert!((general - rollout).abs() <= tol);

            let full = LsaParams::new(v, Matrix::identity(d, d) + gaussian(d, d, seed ^ 2) * 0.1).unwrap();
            let g = os_loss(&full, &batch, k).unwrap();
            let r = os_loss_rollout(&full, &batch, k).unwrap();
            prop_assert!((g - r).abs() <= 1e-10 * g.max(1.0));
        }
    }
}
