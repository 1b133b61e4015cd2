//! Linear self-attention under the block-sparse parameterization: the
//! pretrained initialization, the per-prompt CoT recursion, and the literal
//! embedding-level forward pass that the recursion is checked against.

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, spectral_radius, Matrix, Vector};
use crate::task::{gamma0, gamma0_inverse};

/// Entries beyond this magnitude are treated as divergence.
pub const OVERFLOW_THRESHOLD: f64 = 1e150;

/// The two nonzero `d x d` blocks of the attention parameters: `Ṽ` sits at
/// block (3,1) of `V` and `W̃` at block (1,3) of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LsaParams {
    pub v_tilde: Matrix,
    pub w_tilde: Matrix,
}

impl LsaParams {
    pub fn new(v_tilde: Matrix, w_tilde: Matrix) -> Result<Self> {
        if !v_tilde.is_square() || v_tilde.shape() != w_tilde.shape() {
            return Err(Error::Dimension(format!(
                "Ṽ is {}x{} and W̃ is {}x{}; both must be the same square size",
                v_tilde.nrows(),
                v_tilde.ncols(),
                w_tilde.nrows(),
                w_tilde.ncols()
            )));
        }
        ensure_finite(&v_tilde, "Ṽ")?;
        ensure_finite(&w_tilde, "W̃")?;
        Ok(Self { v_tilde, w_tilde })
    }

    /// `W̃ = I`.
    pub fn with_identity_w(v_tilde: Matrix) -> Result<Self> {
        let d = v_tilde.nrows();
        Self::new(v_tilde, Matrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.v_tilde.nrows()
    }

    /// Full `(2d+2) x (2d+2)` value matrix.
    pub fn full_v(&self) -> Matrix {
        let d = self.dim();
        let mut v = Matrix::zeros(2 * d + 2, 2 * d + 2);
        v.view_mut((d + 1, 0), (d, d)).copy_from(&self.v_tilde);
        v
    }

    /// Full `(2d+2) x (2d+2)` key-query matrix, including the fixed `-1`
    /// that subtracts the label.
    pub fn full_w(&self) -> Matrix {
        let d = self.dim();
        let mut w = Matrix::zeros(2 * d + 2, 2 * d + 2);
        w.view_mut((0, d + 1), (d, d)).copy_from(&self.w_tilde);
        w[(d, 2 * d + 1)] = -1.0;
        w
    }
}

/// `Ṽ = −Γ₀⁻¹`, `W̃ = I`.
pub fn pretrained_init(sigma0: &Matrix, n: usize) -> Result<LsaParams> {
    let inv = gamma0_inverse(&gamma0(sigma0, n)?)?;
    LsaParams::with_identity_w(-inv)
}

/// Iterates of one CoT rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `ŵ₀, …, ŵ_k`.
    pub w_hats: Vec<Vector>,
    /// `ρ(I + Ṽ S W̃)`. The iteration map does not change between steps, so
    /// one value covers the whole rollout.
    pub spectral_radius: Option<f64>,
}

impl Rollout {
    pub fn last(&self) -> &Vector {
        self.w_hats.last().expect("rollout always holds w0")
    }
}

fn check_rollout_dims(params: &LsaParams, s: &Matrix, w_star: &Vector, w0: &Vector) -> Result<()> {
    let d = params.dim();
    if s.shape() != (d, d) || w_star.len() != d || w0.len() != d {
        return Err(Error::Dimension(format!(
            "params are {d}-dimensional but S is {}x{}, w* has {} entries, w0 has {}",
            s.nrows(),
            s.ncols(),
            w_star.len(),
            w0.len()
        )));
    }
    Ok(())
}

fn check_overflow(w: &Vector, step: usize) -> Result<()> {
    let magnitude = w.amax();
    if !magnitude.is_finite() || magnitude > OVERFLOW_THRESHOLD {
        return Err(Error::Divergence { step, magnitude });
    }
    Ok(())
}

/// Runs `ŵ_{i+1} = ŵ_i + Ṽ S (W̃ ŵ_i − w*)` for `k` steps from `w0`.
pub fn cot_rollout(
    params: &LsaParams,
    s: &Matrix,
    w_star: &Vector,
    k: usize,
    w0: &Vector,
    log_spectrum: bool,
) -> Result<Rollout> {
    check_rollout_dims(params, s, w_star, w0)?;
    let spectral_radius = if log_spectrum {
        let d = params.dim();
        let step = Matrix::identity(d, d) + &params.v_tilde * s * &params.w_tilde;
        Some(spectral_radius(&step)?)
    } else {
        None
    };
    let mut w_hats = Vec::with_capacity(k + 1);
    w_hats.push(w0.clone());
    for step in 1..=k {
        let prev = &w_hats[step - 1];
        let residual = &params.w_tilde * prev - w_star;
        let next = prev + &params.v_tilde * (s * residual);
        check_overflow(&next, step)?;
        w_hats.push(next);
    }
    Ok(Rollout { w_hats, spectral_radius })
}

/// The same rollout computed on the literal `(2d+2)`-row embedding, with
/// `f(Z) = Z + V Z (Zᵀ W Z) / n` and the last output column appended after
/// each step. Intended as a reference for [`cot_rollout`].
pub fn lsa_forward_embedding(params: &LsaParams, x: &Matrix, y: &Vector, k: usize, w0: &Vector) -> Result<Rollout> {
    let d = params.dim();
    let n = x.ncols();
    if x.nrows() != d || y.len() != n || w0.len() != d {
        return Err(Error::Dimension(format!(
            "params are {d}-dimensional but X is {}x{}, y has {} entries, w0 has {}",
            x.nrows(),
            x.ncols(),
            y.len(),
            w0.len()
        )));
    }
    if n == 0 {
        return Err(Error::Domain("prompt length n must be >= 1".into()));
    }
    let v = params.full_v();
    let w = params.full_w();
    let rows = 2 * d + 2;
    let mut z = Matrix::zeros(rows, n + 1 + k);
    z.view_mut((0, 0), (d, n)).copy_from(x);
    z.view_mut((d, 0), (1, n)).copy_from(&y.transpose());
    z.view_mut((d + 1, n), (d, 1)).copy_from(w0);
    z[(2 * d + 1, n)] = 1.0;

    let mut w_hats = Vec::with_capacity(k + 1);
    w_hats.push(w0.clone());
    for step in 1..=k {
        let cols = n + step;
        let current = z.columns(0, cols);
        let last = current.column(cols - 1);
        // Last column of Z + V Z Zᵀ W Z / n.
        let scores = current.transpose() * (&w * last);
        let out = last + &v * (current * scores) / n as f64;
        let w_hat = out.rows(d + 1, d).into_owned();
        check_overflow(&w_hat, step)?;
        z.set_column(cols, &out);
        w_hats.push(w_hat);
    }
    Ok(Rollout { w_hats, spectral_radius: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{pinv, RngStream, PINV_REL_TOL};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn diag(v: &[f64]) -> Matrix {
        Matrix::from_diagonal(&Vector::from_column_slice(v))
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 7).rng();
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn pretrained_init_examples() {
        let p = pretrained_init(&Matrix::identity(2, 2), 2).unwrap();
        assert_abs_diff_eq!(p.v_tilde, Matrix::identity(2, 2) * -0.4, epsilon = 1e-15);
        assert_eq!(p.w_tilde, Matrix::identity(2, 2));

        let p = pretrained_init(&diag(&[0.1, 1.0]), 4).unwrap();
        assert_abs_diff_eq!(p.v_tilde, -diag(&[1.0 / 0.4, 1.0 / 1.525]), epsilon = 1e-12);
    }

    #[test]
    fn pretrained_init_inverts_gamma0() {
        let l = gaussian(5, 5, 3);
        let sigma0 = &l * l.transpose() + Matrix::identity(5, 5) * 0.1;
        let p = pretrained_init(&sigma0, 7).unwrap();
        let g = gamma0(&sigma0, 7).unwrap();
        assert_abs_diff_eq!(&p.v_tilde * g, -Matrix::identity(5, 5), epsilon = 1e-10);
    }

    #[test]
    fn pretrained_init_singular() {
        assert!(matches!(pretrained_init(&Matrix::zeros(2, 2), 3), Err(Error::Singular(_))));
    }

    #[test]
    fn full_matrices_follow_sparsity_pattern() {
        let p = LsaParams::new(diag(&[2.0, 3.0]), diag(&[5.0, 7.0])).unwrap();
        let v = p.full_v();
        let w = p.full_w();
        assert_eq!(v.shape(), (6, 6));
        assert_eq!(v[(3, 0)], 2.0);
        assert_eq!(v[(4, 1)], 3.0);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 2);
        assert_eq!(w[(0, 3)], 5.0);
        assert_eq!(w[(1, 4)], 7.0);
        assert_eq!(w[(2, 5)], -1.0);
        assert_eq!(w.iter().filter(|&&x| x != 0.0).count(), 3);
    }

    #[test]
    fn one_step_exact_recovery() {
        let s = diag(&[2.0, 0.5, 4.0]);
        let w_star = Vector::from_column_slice(&[1.0, -2.0, 0.3]);
        let p = LsaParams::with_identity_w(-s.clone().try_inverse().unwrap()).unwrap();
        let r = cot_rollout(&p, &s, &w_star, 1, &Vector::zeros(3), false).unwrap();
        assert_abs_diff_eq!(r.last().clone(), w_star, epsilon = 1e-14);
    }

    #[test]
    fn zero_v_freezes_iterates() {
        let w0 = Vector::from_column_slice(&[0.5, -1.0]);
        let p = LsaParams::with_identity_w(Matrix::zeros(2, 2)).unwrap();
        let r = cot_rollout(&p, &Matrix::identity(2, 2), &Vector::from_element(2, 3.0), 4, &w0, false).unwrap();
        assert!(r.w_hats.iter().all(|w| *w == w0));
    }

    #[test]
    fn scalar_recursion_hand_values() {
        let p = LsaParams::with_identity_w(diag(&[-0.1])).unwrap();
        let r = cot_rollout(&p, &diag(&[2.0]), &Vector::from_element(1, 1.0), 3, &Vector::zeros(1), true).unwrap();
        let got: Vec<f64> = r.w_hats.iter().map(|w| w[0]).collect();
        for (g, e) in got.iter().zip([0.0, 0.2, 0.36, 0.488]) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(r.spectral_radius.unwrap(), 0.8, epsilon = 1e-14);
    }

    #[test]
    fn k_zero_returns_only_w0() {
        let p = LsaParams::with_identity_w(diag(&[-0.1])).unwrap();
        let w0 = Vector::from_element(1, 0.25);
        let r = cot_rollout(&p, &diag(&[2.0]), &Vector::from_element(1, 1.0), 0, &w0, false).unwrap();
        assert_eq!(r.w_hats, vec![w0.clone()]);
        let e = lsa_forward_embedding(&p, &Matrix::from_element(1, 3, 1.0), &Vector::from_element(3, 1.0), 0, &w0).unwrap();
        assert_eq!(e.w_hats, vec![w0]);
    }

    #[test]
    fn divergence_reports_step() {
        // Scalar multiplier 1 + 10·1 = 11 per step; 11^k w* crosses 1e150 at k = 145.
        let p = LsaParams::with_identity_w(diag(&[10.0])).unwrap();
        let err = cot_rollout(&p, &diag(&[1.0]), &Vector::from_element(1, 1.0), 400, &Vector::zeros(1), true).unwrap_err();
        match err {
            Error::Divergence { step, magnitude } => {
                assert!((140..=150).contains(&step), "step {step}");
                assert!(magnitude > OVERFLOW_THRESHOLD);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = LsaParams::with_identity_w(Matrix::zeros(2, 2)).unwrap();
        assert!(cot_rollout(&p, &Matrix::identity(3, 3), &Vector::zeros(2), 1, &Vector::zeros(2), false).is_err());
        assert!(LsaParams::new(Matrix::zeros(2, 2), Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn zero_v_embedding_appends_w0() {
        let p = LsaParams::with_identity_w(Matrix::zeros(2, 2)).unwrap();
        let x = gaussian(2, 5, 1);
        let w_star = Vector::from_column_slice(&[1.0, 2.0]);
        let y = x.transpose() * &w_star;
        let w0 = Vector::from_column_slice(&[0.3, 0.1]);
        let r = lsa_forward_embedding(&p, &x, &y, 3, &w0).unwrap();
        assert!(r.w_hats.iter().all(|w| *w == w0));
    }

    #[test]
    fn supervised_path_fixed_point() {
        // With Ṽ S = −η I on a full-rank S, the rollout reproduces (1 − (1−η)^i) w*.
        let eta = 0.3;
        let x = gaussian(4, 12, 5);
        let s = &x * x.transpose() / 12.0;
        let v = -pinv(&s, PINV_REL_TOL).unwrap() * eta;
        let p = LsaParams::with_identity_w(v).unwrap();
        let w_star = Vector::from_column_slice(&[1.0, -1.0, 0.5, 2.0]);
        let r = cot_rollout(&p, &s, &w_star, 6, &Vector::zeros(4), false).unwrap();
        for (i, w) in r.w_hats.iter().enumerate() {
            let target = &w_star * (1.0 - (1.0 - eta).powi(i as i32));
            assert_abs_diff_eq!(w.clone(), target, epsilon = 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn embedding_matches_recursion(
            d in 1usize..=8,
            n in 1usize..=16,
            k in 0usize..=5,
            seed in any::<u64>(),
            v_scale in 0.01f64..0.3,
        ) {
            let x = gaussian(d, n, seed);
            let w_star = gaussian(d, 1, seed ^ 2).column(0).into_owned();
            let w0 = gaussian(d, 1, seed ^ 3).column(0).into_owned();
            let params = LsaParams::new(gaussian(d, d, seed ^ 4) * v_scale, gaussian(d, d, seed ^ 5)).unwrap();
            let y = x.transpose() * &w_star;
            let s = &x * x.transpose() / n as f64;
            let rec = cot_rollout(&params, &s, &w_star, k, &w0, false).unwrap();
            let emb = lsa_forward_embedding(&params, &x, &y, k, &w0).unwrap();
            for (a, b) in rec.w_hats.iter().zip(&emb.w_hats) {
                let scale = a.amax().max(1.0);
                prop_assert!((a - b).amax() <= 1e-10 * scale);
            }
        }
    }
}
