//! The two-block covariance family, the pretraining operator `Γ₀`, and
//! sampled prompt batches with their derived matrices `Ω`, `Φ`, `ΦΦᵀ`.

use rand_distr::{ChiSquared, Distribution};

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, standard_normal_vector, GaussianSampler, Matrix, RngStream, Vector};

/// Which member of the covariance family to build.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceKind {
    /// `Σ₀ = diag(ρ·1_m, 1_{d−m})`
    Pretrain,
    /// `Δ = diag(1_m, 0_{d−m})`
    Shift,
    /// `Σ = Σ₀ + Δ`
    Posttest,
    /// `A = diag(η(ρ+1)·1_m, r·1_{d−m})`
    Posttrain,
    /// Any symmetric PSD `d x d` matrix.
    Custom(Matrix),
}

/// Two-block covariance parameters. Stored as scalars and materialized on
/// demand.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    pub d: usize,
    pub m: usize,
    pub rho: f64,
    pub r: f64,
    pub eta: f64,
    pub kind: CovarianceKind,
}

impl CovarianceSpec {
    pub fn new(d: usize, m: usize, rho: f64, r: f64, eta: f64, kind: CovarianceKind) -> Result<Self> {
        let spec = Self { d, m, rho, r, eta, kind };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_kind(&self, kind: CovarianceKind) -> Result<Self> {
        Self::new(self.d, self.m, self.rho, self.r, self.eta, kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m >= self.d {
            return Err(Error::Domain(format!("m must satisfy 0 < m < d (m = {}, d = {})", self.m, self.d)));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::Domain(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return Err(Error::Domain(format!("r must be >= 0, got {}", self.r)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Domain(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if let CovarianceKind::Custom(c) = &self.kind {
            if c.shape() != (self.d, self.d) {
                return Err(Error::Dimension(format!(
                    "custom covariance is {}x{}, expected {}x{}",
                    c.nrows(),
                    c.ncols(),
                    self.d,
                    self.d
                )));
            }
            ensure_finite(c, "custom covariance")?;
        }
        Ok(())
    }

    /// Diagonal entries for the four named kinds; `None` for `Custom`.
    pub fn diagonal(&self) -> Option<Vector> {
        let (first, second) = match self.kind {
            CovarianceKind::Pretrain => (self.rho, 1.0),
            CovarianceKind::Shift => (1.0, 0.0),
            CovarianceKind::Posttest => (self.rho + 1.0, 1.0),
            CovarianceKind::Posttrain => (self.eta * (self.rho + 1.0), self.r),
            CovarianceKind::Custom(_) => return None,
        };
        Some(Vector::from_fn(self.d, |i, _| if i < self.m { first } else { second }))
    }

    pub fn materialize(&self) -> Matrix {
        match &self.kind {
            CovarianceKind::Custom(c) => c.clone(),
            _ => Matrix::from_diagonal(&self.diagonal().expect("named kinds are diagonal")),
        }
    }
}

/// `Γ₀ = (1 + 1/n)·Σ₀ + (tr(Σ₀)/n)·I`.
pub fn gamma0(sigma0: &Matrix, n: usize) -> Result<Matrix> {
    if !sigma0.is_square() {
        return Err(Error::Dimension("Σ₀ must be square".into()));
    }
    if n == 0 {
        return Err(Error::Domain("prompt length n must be >= 1".into()));
    }
    ensure_finite(sigma0, "Σ₀")?;
    let d = sigma0.nrows();
    let nf = n as f64;
    Ok(sigma0 * (1.0 + 1.0 / nf) + Matrix::identity(d, d) * (sigma0.trace() / nf))
}

/// Inverse of `Γ₀`, erroring when it is singular (e.g. `Σ₀ = 0`).
pub fn gamma0_inverse(gamma0: &Matrix) -> Result<Matrix> {
    gamma0
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular("Γ₀ is not positive definite".into()))
}

/// What a [`PromptBatch`] keeps besides `Ω` and `Φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchStorage {
    /// Per-prompt empirical covariances `S_τ` (features drawn explicitly).
    #[default]
    Covariances,
    /// `S_τ` plus the raw `d x n` feature matrices `X_τ`.
    CovariancesAndFeatures,
    /// Only `Φ`: each column `S_τ w*_τ` is drawn directly from its exact
    /// distribution in `O(d)` without materializing `X_τ` or `S_τ`.
    PhiOnly,
}

/// `B` prompts of length `n`: ground-truth weights and feature statistics.
#[derive(Debug, Clone)]
pub struct PromptBatch {
    pub n: usize,
    /// `d x B`, column τ is `w*_τ`.
    pub omega: Matrix,
    /// `d x B`, column τ is `S_τ w*_τ`.
    pub phi: Matrix,
    pub covariances: Option<Vec<Matrix>>,
    pub features: Option<Vec<Matrix>>,
    pub stream: Option<RngStream>,
}

impl PromptBatch {
    /// Batch from explicit weights and per-prompt covariances.
    pub fn from_parts(n: usize, omega: Matrix, covariances: Vec<Matrix>) -> Result<Self> {
        if covariances.len() != omega.ncols() {
            return Err(Error::Dimension(format!(
                "{} covariances for {} prompts",
                covariances.len(),
                omega.ncols()
            )));
        }
        let d = omega.nrows();
        if let Some(bad) = covariances.iter().find(|s| s.shape() != (d, d)) {
            return Err(Error::Dimension(format!("covariance is {}x{}, expected {d}x{d}", bad.nrows(), bad.ncols())));
        }
        let mut batch = Self {
            n,
            omega,
            phi: Matrix::zeros(d, covariances.len()),
            covariances: Some(covariances),
            features: None,
            stream: None,
        };
        batch.phi = build_phi(&batch).0;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.omega.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    pub fn covariances(&self) -> Result<&[Matrix]> {
        self.covariances.as_deref().ok_or(Error::MissingCovariances)
    }

    pub fn weight(&self, tau: usize) -> Vector {
        self.omega.column(tau).into_owned()
    }
}

/// Draws `w*_τ ~ N(0, I)` and features with covariance `A`, keeping `S_τ`.
pub fn gen_prompt_batch(a: &Matrix, b: usize, n: usize, stream: RngStream) -> Result<PromptBatch> {
    gen_prompt_batch_with(a, b, n, stream, BatchStorage::Covariances)
}

/// As [`gen_prompt_batch`] with explicit storage. `Ω` is drawn from the same
/// substream in every mode, so the weights agree across storage choices.
pub fn gen_prompt_batch_with(
    a: &Matrix,
    b: usize,
    n: usize,
    stream: RngStream,
    storage: BatchStorage,
) -> Result<PromptBatch> {
    if b == 0 || n == 0 {
        return Err(Error::Domain(format!("need B >= 1 and n >= 1 (B = {b}, n = {n})")));
    }
    let sampler = GaussianSampler::new(a)?;
    let d = sampler.dim();
    let mut omega_rng = stream.substream(0).rng();
    let omega = Matrix::from_fn(d, b, |_, _| rand_distr::StandardNormal.sample(&mut omega_rng));

    let per_prompt = |tau: usize| -> (Vector, Option<Matrix>, Option<Matrix>) {
        let mut rng = stream.substream(tau as u64 + 1).rng();
        let w = omega.column(tau).into_owned();
        match storage {
            BatchStorage::PhiOnly => (phi_column_direct(&sampler, &w, n, &mut rng), None, None),
            BatchStorage::Covariances | BatchStorage::CovariancesAndFeatures => {
                let x = sampler.sample(n, &mut rng);
                let s = &x * x.transpose() / n as f64;
                let col = &s * &w;
                let keep_x = (storage == BatchStorage::CovariancesAndFeatures).then_some(x);
                (col, Some(s), keep_x)
            }
        }
    };
    let results = crate::par::map_indexed(b, per_prompt);

    let mut phi = Matrix::zeros(d, b);
    let mut covs = Vec::new();
    let mut feats = Vec::new();
    for (tau, (col, s, x)) in results.into_iter().enumerate() {
        phi.set_column(tau, &col);
        if let Some(s) = s {
            covs.push(s);
        }
        if let Some(x) = x {
            feats.push(x);
        }
    }
    Ok(PromptBatch {
        n,
        omega,
        phi,
        covariances: (storage != BatchStorage::PhiOnly).then_some(covs),
        features: (storage == BatchStorage::CovariancesAndFeatures).then_some(feats),
        stream: Some(stream),
    })
}

/// One draw of `S w` with `S = (1/n)·X Xᵀ`, `X` having `n` i.i.d. `N(0, A)`
/// columns, without forming `X`.
///
/// Writing `X = A^{1/2} G` and `u = A^{1/2} w`, the vector `G Gᵀ û` equals
/// `‖g‖(‖g‖·û + P⊥ z)` in distribution, where `g = Gᵀû ~ N(0, I_n)` and
/// `z ~ N(0, I_d)` is independent (rotational invariance of `G`).
pub fn phi_column_direct<R: rand::Rng + ?Sized>(
    sampler: &GaussianSampler,
    w: &Vector,
    n: usize,
    rng: &mut R,
) -> Vector {
    let d = sampler.dim();
    let u = sampler.apply_root(w);
    let u_norm = u.norm();
    // Consume the same number of draws on every branch.
    let chi_sq: f64 = ChiSquared::new(n as f64).expect("n >= 1").sample(rng);
    let z = standard_normal_vector(d, rng);
    if u_norm == 0.0 {
        return Vector::zeros(d);
    }
    let u_hat = &u / u_norm;
    let z_perp = &z - &u_hat * u_hat.dot(&z);
    let g_norm = chi_sq.sqrt();
    let gg_u = (&u_hat * g_norm + z_perp) * g_norm;
    sampler.apply_root(&gg_u) * (u_norm / n as f64)
}

/// `Φ = [S_1 w*_1, …, S_B w*_B]` and `M = ΦΦᵀ`.
///
/// Recomputed from the stored `S_τ` when present, otherwise taken from the
/// batch's sampled `Φ`.
pub fn build_phi(batch: &PromptBatch) -> (Matrix, Matrix) {
    let phi = match &batch.covariances {
        Some(covs) => {
            let mut phi = Matrix::zeros(batch.dim(), batch.len());
            for (tau, s) in covs.iter().enumerate() {
                phi.set_column(tau, &(s * batch.omega.column(tau)));
            }
            phi
        }
        None => batch.phi.clone(),
    };
    let gram = &phi * phi.transpose();
    (phi, gram)
}
