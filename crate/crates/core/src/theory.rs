//! Asymptotic post-test error `F(β)` of the first-order SFT solution in the
//! proportional regime `B/d → β`, `m/d → μ₁`, `d/n → γ`, for the two-block
//! covariance model, together with its endpoint values and initial slope.

use crate::error::{Error, Result};

/// Half-width of the excluded band around the pole at `β = 1`.
pub const POLE_GUARD: f64 = 1e-6;
/// Target residual of the fixed-point solve.
pub const Q_RESIDUAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryInputs {
    /// Pretraining scale of the first block.
    pub rho: f64,
    /// Interference: post-training variance on the second block.
    pub r: f64,
    pub eta: f64,
    /// Aspect ratio `d/n`.
    pub gamma: f64,
    /// `m/d`.
    pub mu1: f64,
    /// `B/d`.
    pub beta: f64,
}

impl TheoryInputs {
    /// Ratios from finite dimensions.
    pub fn from_dims(d: usize, m: usize, n: usize, b: usize, rho: f64, r: f64, eta: f64) -> Self {
        Self { rho, r, eta, gamma: d as f64 / n as f64, mu1: m as f64 / d as f64, beta: b as f64 / d as f64 }
    }

    pub fn with_beta(self, beta: f64) -> Self {
        Self { beta, ..self }
    }

    pub fn with_r(self, r: f64) -> Self {
        Self { r, ..self }
    }

    pub fn mu2(&self) -> f64 {
        1.0 - self.mu1
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            errors.push(format!("rho must be >= 0, got {}", self.rho));
        }
        if !(self.r >= 0.0 && self.r.is_finite()) {
            errors.push(format!("r must be >= 0, got {}", self.r));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            errors.push(format!("eta must lie in (0, 1), got {}", self.eta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            errors.push(format!("gamma = d/n must be > 0, got {}", self.gamma));
        }
        if !(self.mu1 > 0.0 && self.mu1 < 1.0) {
            errors.push(format!("mu1 = m/d must lie in (0, 1), got {}", self.mu1));
        }
        if !(self.beta >= 0.0) {
            errors.push(format!("beta must be >= 0, got {}", self.beta));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Domain(errors.join("; ")))
        }
    }
}

/// Closed-form constants of the two-block model. Index 0 is the shifted
/// (first) block, index 1 the unshifted block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    pub mu: [f64; 2],
    pub kappa: f64,
    /// `a₁ = η(ρ+1)`, `a₂ = r`.
    pub a: [f64; 2],
    /// Post-test block variances `Σ₁ = ρ+1`, `Σ₂ = 1`.
    pub sigma: [f64; 2],
    pub alpha: [f64; 2],
    pub delta: [f64; 2],
    pub delta_t: [f64; 2],
    pub g: [f64; 2],
    pub s: [f64; 2],
    pub sigma_bar: f64,
}

/// Constants for `r > 0`; `r = 0` is the pole of `δ₂ = 1/(1+κ) − η/r`.
pub fn theory_constants(inp: &TheoryInputs) -> Result<TheoryConstants> {
    inp.validate()?;
    if inp.r == 0.0 {
        return Err(Error::InterferencePole);
    }
    Ok(constants_unchecked(inp))
}

fn constants_unchecked(inp: &TheoryInputs) -> TheoryConstants {
    let rho = inp.rho;
    let mu = [inp.mu1, inp.mu2()];
    let kappa = inp.gamma * (inp.mu1 * rho + 1.0 - inp.mu1);
    let a = [inp.eta * (rho + 1.0), inp.r];
    let sigma = [rho + 1.0, 1.0];
    let alpha = [(kappa - 1.0) / (rho + kappa), kappa / (kappa + 1.0)];
    let delta1 = (1.0 - kappa) / (rho + kappa);
    let delta2 = 1.0 / (1.0 + kappa) - inp.eta / inp.r;
    let delta = [delta1, delta2];
    let delta_t = [delta1 / (rho + 1.0), delta2];
    let g = [-1.0 / (rho + kappa), -1.0 / (1.0 + kappa)];
    let a_bar = mu[0] * a[0] + mu[1] * a[1];
    let s = [a_bar * a[0], a_bar * a[1]];
    let sigma_bar = mu[0] * sigma[0] + mu[1] * sigma[1];
    TheoryConstants { mu, kappa, a, sigma, alpha, delta, delta_t, g, s, sigma_bar }
}

/// Root of `β = Σ_k μ_k a_k² q / (1 + a_k² q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QSolution {
    Root(f64),
    /// `β ≥ 1`: the rank fraction saturates and `w_k = 1`.
    Saturated,
}

fn fixed_point_map(q: f64, mu: [f64; 2], a_sq: [f64; 2]) -> f64 {
    (0..2).map(|k| mu[k] * a_sq[k] * q / (1.0 + a_sq[k] * q)).sum()
}

/// Bisection on the increasing map `q ↦ Σ μ_k a_k² q / (1 + a_k² q)`.
pub fn solve_q(beta: f64, mu: [f64; 2], a_sq: [f64; 2]) -> Result<QSolution> {
    if !(beta >= 0.0) {
        return Err(Error::Domain(format!("beta must be >= 0, got {beta}")));
    }
    if mu.iter().chain(&a_sq).any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!("mu and a² must be finite and >= 0, got {mu:?}, {a_sq:?}")));
    }
    if beta >= 1.0 {
        return Ok(QSolution::Saturated);
    }
    if beta == 0.0 {
        return Ok(QSolution::Root(0.0));
    }
    // The map saturates at the mass of blocks with a_k > 0.
    let ceiling: f64 = (0..2).filter(|&k| a_sq[k] > 0.0).map(|k| mu[k]).sum();
    if beta >= ceiling {
        return Err(Error::Infeasible(format!(
            "beta = {beta} is not below the reachable rank fraction {ceiling} (a² = {a_sq:?})"
        )));
    }
    let residual = |q: f64| fixed_point_map(q, mu, a_sq) - beta;
    let mut hi = 1.0;
    while residual(hi) < 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Infeasible(format!("no bracket for beta = {beta}")));
        }
    }
    let mut lo = 0.0;
    let mut mid = 0.5 * hi;
    for _ in 0..2000 {
        mid = 0.5 * (lo + hi);
        let r = residual(mid);
        if r.abs() <= Q_RESIDUAL_TOL * 1e-3 || mid <= lo || mid >= hi {
            break;
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(QSolution::Root(mid))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryComponents {
    /// Fixed-point root; `inf` on the saturated branch.
    pub q: f64,
    pub w: [f64; 2],
    pub v: [f64; 2],
    pub t12: f64,
    pub bias: f64,
    pub t_inv: f64,
    pub t_inv_sigma: f64,
    pub t_var: f64,
    pub t_var_sigma: f64,
    /// Predicted normalized post-test error.
    pub f: f64,
}

fn check_pole(beta: f64) -> Result<()> {
    if (beta - 1.0).abs() <= POLE_GUARD {
        return Err(Error::Pole { beta, guard: POLE_GUARD });
    }
    Ok(())
}

/// Every component of `F(β)` at the given inputs.
pub fn theory_components(inp: &TheoryInputs) -> Result<TheoryComponents> {
    let c = theory_constants(inp)?;
    check_pole(inp.beta)?;
    let mu = c.mu;
    let a_sq = [c.a[0] * c.a[0], c.a[1] * c.a[1]];
    let sig = c.sigma;

    let (q, w, v, t12, t_inv, t_inv_sigma) = match solve_q(inp.beta, mu, a_sq)? {
        QSolution::Saturated => {
            let excess = inp.beta - 1.0;
            let t_inv = (0..2).map(|k| mu[k] * sig[k] * sig[k] / a_sq[k]).sum::<f64>() / excess;
            let t_inv_sigma = (0..2).map(|k| mu[k] * sig[k] / a_sq[k]).sum::<f64>() / excess;
            (f64::INFINITY, [1.0, 1.0], [0.0, 0.0], 0.0, t_inv, t_inv_sigma)
        }
        QSolution::Root(q) => {
            let w = [a_sq[0] * q / (1.0 + a_sq[0] * q), a_sq[1] * q / (1.0 + a_sq[1] * q)];
            let v = [w[0] * (1.0 - w[0]), w[1] * (1.0 - w[1])];
            let den = mu[0] * v[0] + mu[1] * v[1];
            let t12 = if den > 0.0 { mu[0] * mu[1] * v[0] * v[1] / den } else { 0.0 };
            let (t_inv, t_inv_sigma) = if q > 0.0 {
                let norm: f64 = (0..2).map(|k| mu[k] * w[k] * w[k] / a_sq[k]).sum();
                let num: f64 = (0..2).map(|k| mu[k] * sig[k] * sig[k] * w[k] * w[k] / a_sq[k]).sum();
                let num_sigma: f64 = (0..2).map(|k| mu[k] * sig[k] * w[k] * w[k] / a_sq[k]).sum();
                (q * num / norm, q * num_sigma / norm)
            } else {
                (0.0, 0.0)
            };
            (q, w, v, t12, t_inv, t_inv_sigma)
        }
    };

    let dt_gap = c.delta_t[1] * c.delta_t[1] - c.delta_t[0] * c.delta_t[0];
    let bias = (0..2)
        .map(|k| mu[k] * (c.alpha[k].powi(2) * (1.0 - w[k]) + (c.alpha[k] + c.delta[k]).powi(2) * w[k]))
        .sum::<f64>()
        + t12 * dt_gap * (sig[0] * sig[0] - sig[1] * sig[1]);
    let var_weight = |k: usize| c.g[k].powi(2) * (1.0 - w[k]) + (c.g[k] + c.delta_t[k]).powi(2) * w[k];
    let t_var = (0..2).map(|k| mu[k] * c.s[k] * var_weight(k)).sum::<f64>() + t12 * dt_gap * (c.s[0] - c.s[1]);
    let t_var_sigma =
        (0..2).map(|k| mu[k] * sig[k] * var_weight(k)).sum::<f64>() + t12 * dt_gap * (sig[0] - sig[1]);

    let gamma = inp.gamma;
    let f = bias
        + gamma * t_inv * t_var
        + gamma * c.sigma_bar * t_var_sigma
        + gamma * gamma * c.sigma_bar * t_inv_sigma * t_var;
    Ok(TheoryComponents { q, w, v, t12, bias, t_inv, t_inv_sigma, t_var, t_var_sigma, f })
}

/// `F` over a grid of β values, keeping the remaining inputs fixed.
pub fn theory_curve(inp: &TheoryInputs, betas: &[f64]) -> Vec<Result<TheoryComponents>> {
    betas.iter().map(|&b| theory_components(&inp.with_beta(b))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryEndpoints {
    /// `F(0)`.
    pub f0: f64,
    /// `lim_{β→∞} F(β)`.
    pub f_inf: f64,
    /// `F′(0)`.
    pub f_prime0: f64,
}

/// `F(0)`, `F(∞)` and the right derivative `F′(0)`. `inp.beta` is ignored.
pub fn theory_endpoints(inp: &TheoryInputs) -> Result<TheoryEndpoints> {
    let c = theory_constants(inp)?;
    let mu = c.mu;
    let sig = c.sigma;
    let gamma = inp.gamma;
    let a_sq = [c.a[0] * c.a[0], c.a[1] * c.a[1]];

    let f0 = (0..2).map(|k| mu[k] * c.alpha[k].powi(2)).sum::<f64>()
        + gamma * c.sigma_bar * (0..2).map(|k| mu[k] * sig[k] * c.g[k].powi(2)).sum::<f64>();
    let f_inf = (0..2).map(|k| mu[k] * (c.alpha[k] + c.delta[k]).powi(2)).sum::<f64>()
        + gamma * c.sigma_bar * (0..2).map(|k| mu[k] * sig[k] * (c.g[k] + c.delta_t[k]).powi(2)).sum::<f64>();

    // Near β = 0: q ≈ β/c, w_k ≈ a_k² q, T₁₂ ≈ μ₁μ₂a₁²a₂² q / c.
    let cc = mu[0] * a_sq[0] + mu[1] * a_sq[1];
    let t12_prime = mu[0] * mu[1] * a_sq[0] * a_sq[1] / (cc * cc);
    let dt_gap = c.delta_t[1].powi(2) - c.delta_t[0].powi(2);
    let bias_prime = (0..2)
        .map(|k| mu[k] * a_sq[k] * (2.0 * c.alpha[k] * c.delta[k] + c.delta[k].powi(2)))
        .sum::<f64>()
        / cc
        + t12_prime * dt_gap * (sig[0].powi(2) - sig[1].powi(2));
    let t_inv_prime = (0..2).map(|k| mu[k] * sig[k].powi(2) * a_sq[k]).sum::<f64>() / (cc * cc);
    let t_inv_sigma_prime = (0..2).map(|k| mu[k] * sig[k] * a_sq[k]).sum::<f64>() / (cc * cc);
    let t_var0 = (0..2).map(|k| mu[k] * c.s[k] * c.g[k].powi(2)).sum::<f64>();
    let t_var_sigma_prime = (0..2)
        .map(|k| mu[k] * sig[k] * (a_sq[k] / cc) * ((c.g[k] + c.delta_t[k]).powi(2) - c.g[k].powi(2)))
        .sum::<f64>()
        + t12_prime * dt_gap * (sig[0] - sig[1]);
    let f_prime0 = bias_prime
        + gamma * t_inv_prime * t_var0
        + gamma * c.sigma_bar * t_var_sigma_prime
        + gamma * gamma * c.sigma_bar * t_inv_sigma_prime * t_var0;
    Ok(TheoryEndpoints { f0, f_inf, f_prime0 })
}

/// Leading coefficient of `F(∞) − F(0)` as `r → 0⁺`: the gap behaves like
/// `μ₂ (1 + γ Σ̄) η² / r²`. Well defined at `r = 0`.
pub fn interference_gap_coefficient(inp: &TheoryInputs) -> Result<f64> {
    inp.validate()?;
    let c = constants_unchecked(&inp.with_r(1.0));
    Ok(inp.mu2() * (1.0 + inp.gamma * c.sigma_bar) * inp.eta * inp.eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn reference_inputs(gamma: f64) -> TheoryInputs {
        TheoryInputs { rho: 0.1, r: 0.1, eta: 0.2, gamma, mu1: 0.5, beta: 0.5 }
    }

    #[test]
    fn solve_q_symmetric_and_zero() {
        match solve_q(0.5, [0.5, 0.5], [1.0, 1.0]).unwrap() {
            QSolution::Root(q) => assert_abs_diff_eq!(q, 1.0, epsilon = 1e-10),
            other => panic!("{other:?}"),
        }
        assert_eq!(solve_q(0.0, [0.5, 0.5], [1.0, 4.0]).unwrap(), QSolution::Root(0.0));
        assert_eq!(solve_q(1.0, [0.5, 0.5], [1.0, 4.0]).unwrap(), QSolution::Saturated);
    }

    #[test]
    fn solve_q_against_grid_scan() {
        let (mu, a_sq, beta) = ([0.5, 0.5], [1.0, 4.0], 0.5);
        let QSolution::Root(q) = solve_q(beta, mu, a_sq).unwrap() else { panic!() };
        assert!((fixed_point_map(q, mu, a_sq) - beta).abs() <= Q_RESIDUAL_TOL);
        // Independent oracle: dense scan for the sign change, then the linear
        // interpolation inside the bracketing cell.
        let f = |q: f64| 0.5 * q / (1.0 + q) + 2.0 * q / (1.0 + 4.0 * q) - 0.5;
        let step = 1e-5;
        let mut x = 0.0;
        while f(x + step) < 0.0 {
            x += step;
        }
        let root = x + step * (-f(x)) / (f(x + step) - f(x));
        assert_abs_diff_eq!(q, root, epsilon = 1e-8);
    }

    #[test]
    fn solve_q_infeasible() {
        assert!(matches!(solve_q(0.3, [0.5, 0.5], [0.0, 0.0]), Err(Error::Infeasible(_))));
        // Only the first block (mass 0.5) is reachable.
        assert!(matches!(solve_q(0.6, [0.5, 0.5], [1.0, 0.0]), Err(Error::Infeasible(_))));
        assert!(matches!(solve_q(0.4, [0.5, 0.5], [1.0, 0.0]), Ok(QSolution::Root(_))));
    }

    #[test]
    fn constants_hand_values() {
        let c = theory_constants(&reference_inputs(1.0)).unwrap();
        assert_abs_diff_eq!(c.kappa, 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(c.alpha[0], -0.45 / 0.65, epsilon = 1e-15);
        assert_abs_diff_eq!(c.alpha[0], -0.69231, epsilon = 1e-5);
        assert_abs_diff_eq!(c.g[0], -1.53846, epsilon = 1e-5);
        assert_abs_diff_eq!(c.delta_t[1], 1.0 / 1.55 - 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.s[0], (0.5 * 0.22 + 0.5 * 0.1) * 0.22, epsilon = 1e-15);
        assert_abs_diff_eq!(c.sigma_bar, 1.05, epsilon = 1e-15);
    }

    #[test]
    fn constants_identities() {
        for (rho, gamma, mu1) in [(0.1, 1.0, 0.5), (2.0, 0.3, 0.2), (0.0, 5.0, 0.9)] {
            let c = theory_constants(&TheoryInputs { rho, r: 0.3, eta: 0.4, gamma, mu1, beta: 0.0 }).unwrap();
            assert_abs_diff_eq!(c.alpha[0] + c.delta[0], 0.0, epsilon = 1e-14);
            for k in 0..2 {
                assert_abs_diff_eq!(c.delta[k], c.delta_t[k] * c.sigma[k], epsilon = 1e-14);
            }
        }
        // κ = 0 substitution: α₁ = −1/ρ.
        let inp = TheoryInputs { rho: 0.1, r: 0.1, eta: 0.2, gamma: 1e-300, mu1: 0.5, beta: 0.0 };
        assert_abs_diff_eq!(theory_constants(&inp).unwrap().alpha[0], -10.0, epsilon = 1e-12);
    }

    #[test]
    fn r_zero_is_a_pole() {
        let inp = reference_inputs(1.0).with_r(0.0);
        assert!(matches!(theory_constants(&inp), Err(Error::InterferencePole)));
        assert!(matches!(theory_endpoints(&inp), Err(Error::InterferencePole)));
        assert!(interference_gap_coefficient(&inp).is_ok());
    }

    #[test]
    fn pole_guard_band() {
        assert!(matches!(theory_components(&reference_inputs(1.0).with_beta(1.0)), Err(Error::Pole { .. })));
        assert!(matches!(theory_components(&reference_inputs(1.0).with_beta(1.0 + 5e-7)), Err(Error::Pole { .. })));
        assert!(theory_components(&reference_inputs(1.0).with_beta(1.0 + 2e-6)).is_ok());
    }

    #[test]
    fn saturated_branch() {
        let inp = reference_inputs(1.0).with_beta(2.0);
        let t = theory_components(&inp).unwrap();
        let c = theory_constants(&inp).unwrap();
        assert_eq!(t.w, [1.0, 1.0]);
        assert_eq!(t.v, [0.0, 0.0]);
        assert_eq!(t.t12, 0.0);
        let bias: f64 = (0..2).map(|k| c.mu[k] * (c.alpha[k] + c.delta[k]).powi(2)).sum();
        assert_abs_diff_eq!(t.bias, bias, epsilon = 1e-14);
        let t_inv = (0.5 * 1.21 / 0.0484 + 0.5 / 0.01) / 1.0;
        assert_abs_diff_eq!(t.t_inv, t_inv, epsilon = 1e-10);
    }

    #[test]
    fn symmetric_blocks_leakage() {
        // Equal a_k make w₁ = w₂ and v₁ = v₂ = v, so T₁₂ = v/4 at μ = (½, ½).
        // a₁ = η(ρ+1) = r requires r = 0.22 at ρ = 0.1, η = 0.2.
        let inp = TheoryInputs { rho: 0.1, r: 0.22, eta: 0.2, gamma: 1.0, mu1: 0.5, beta: 0.3 };
        let t = theory_components(&inp).unwrap();
        assert_abs_diff_eq!(t.v[0], t.v[1], epsilon = 1e-12);
        assert_abs_diff_eq!(t.t12, t.v[0] / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn f0_hand_value_and_consistency() {
        let e = theory_endpoints(&reference_inputs(1.0)).unwrap();
        // Σμα² = ½(0.4793 + 0.1259); γΣ̄ Σ μ Σ g² = 1.05 · 1.5099.
        assert_abs_diff_eq!(e.f0, 1.888, epsilon = 5e-4);
        let at_zero = theory_components(&reference_inputs(1.0).with_beta(0.0)).unwrap();
        assert_abs_diff_eq!(at_zero.f, e.f0, epsilon = 1e-12);
    }

    #[test]
    fn f_inf_is_the_large_beta_limit() {
        let e = theory_endpoints(&reference_inputs(0.6)).unwrap();
        let far = theory_components(&reference_inputs(0.6).with_beta(1e9)).unwrap().f;
        assert!((far - e.f_inf).abs() <= 1e-6 * e.f_inf);
    }

    #[test]
    fn derivative_matches_forward_difference() {
        for inp in [reference_inputs(1.0), reference_inputs(0.6), TheoryInputs { rho: 0.2, r: 0.05, eta: 0.3, gamma: 0.1, mu1: 0.7, beta: 0.0 }] {
            let e = theory_endpoints(&inp).unwrap();
            let eps = 1e-7;
            let fd = (theory_components(&inp.with_beta(eps)).unwrap().f - e.f0) / eps;
            assert!((fd - e.f_prime0).abs() <= 1e-4 * e.f_prime0.abs().max(1.0), "{fd} vs {}", e.f_prime0);
        }
    }

    #[test]
    fn reference_values() {
        // Independent double-precision evaluation of the same formulas.
        for (beta, expected) in [
            (0.2, 3.3417726237474144),
            (0.5, 4.372975126034212),
            (0.8, 11.776831066153006),
            (1.3, 11.463355371900827),
            (2.0, 4.871461157024793),
        ] {
            let f = theory_components(&reference_inputs(0.6).with_beta(beta)).unwrap().f;
            assert!((f - expected).abs() <= 1e-9 * expected, "beta {beta}: {f} vs {expected}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rank_fraction_identity(beta in 0.0f64..3.0, rho in 0.0f64..3.0, r in 0.01f64..2.0, mu1 in 0.05f64..0.95) {
            prop_assume!((beta - 1.0).abs() > POLE_GUARD);
            let inp = TheoryInputs { rho, r, eta: 0.2, gamma: 1.0, mu1, beta };
            let t = theory_components(&inp).unwrap();
            prop_assert!((mu1 * t.w[0] + (1.0 - mu1) * t.w[1] - beta.min(1.0)).abs() <= 1e-10);
            for k in 0..2 {
                prop_assert!((0.0..=1.0).contains(&t.w[k]));
                prop_assert!((t.v[k] - t.w[k] * (1.0 - t.w[k])).abs() <= 1e-15);
            }
        }
    }
}
