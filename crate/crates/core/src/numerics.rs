//! Dense linear-algebra primitives and seeded Gaussian sampling.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative cutoff for [`pinv`].
pub const PINV_REL_TOL: f64 = 1e-10;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITER: usize = 0; // 0 = until convergence
const SCHUR_EPS: f64 = 1e-14;
const SCHUR_MAX_ITER: usize = 10_000;
const PSD_TOL: f64 = 1e-12;

/// A reproducible random stream identified by `(seed, stream)`.
///
/// Streams are counter-based: `(seed, stream)` selects a ChaCha8 stream, so
/// distinct stream ids never overlap and parallel tasks can each own one
/// regardless of scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Child stream `index` of this stream. Children of different parents
    /// (or of the same parent with different indices) are distinct.
    pub fn substream(&self, index: u64) -> RngStream {
        RngStream {
            seed: splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x5851_f42d_4c95_7f2d))),
            stream: index,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Pseudoinverse together with the numerical rank it used.
#[derive(Debug, Clone)]
pub struct Pinv {
    pub inverse: Matrix,
    pub rank: usize,
}

/// Moore-Penrose pseudoinverse via SVD, zeroing singular values below
/// `rel_tol * sigma_max`.
pub fn pinv(m: &Matrix, rel_tol: f64) -> Result<Matrix> {
    pinv_with_rank(m, rel_tol).map(|p| p.inverse)
}

pub fn pinv_with_rank(m: &Matrix, rel_tol: f64) -> Result<Pinv> {
    if !(rel_tol > 0.0) {
        return Err(Error::Domain(format!("pinv rel_tol must be > 0, got {rel_tol}")));
    }
    ensure_finite(m, "pinv input")?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Pinv { inverse: Matrix::zeros(cols, rows), rank: 0 });
    }
    // nalgebra's bidiagonalization is markedly faster on tall inputs.
    if rows < cols {
        let t = pinv_with_rank(&m.transpose(), rel_tol)?;
        return Ok(Pinv { inverse: t.inverse.transpose(), rank: t.rank });
    }
    let svd = m
        .clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical {
            op: "SVD",
            rows,
            cols,
            norm: m.norm(),
            max_abs: max_abs(m),
        })?;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let s_max = svd.singular_values.max();
    let cutoff = rel_tol * s_max;
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| s_max > 0.0 && svd.singular_values[i] > cutoff)
        .collect();
    let rank = keep.len();
    let mut inverse = Matrix::zeros(cols, rows);
    for &i in &keep {
        let inv_s = 1.0 / svd.singular_values[i];
        // V_i * (1/s_i) * U_i^T
        inverse.ger(inv_s, &v_t.row(i).transpose(), &u.column(i), 1.0);
    }
    Ok(Pinv { inverse, rank })
}

/// Largest eigenvalue magnitude (eigenvalues may be complex).
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "spectral radius needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m, "spectral_radius input")?;
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let schur = m
        .clone()
        .try_schur(SCHUR_EPS, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::Numerical {
            op: "Schur eigensolver",
            rows: m.nrows(),
            cols: m.ncols(),
            norm: m.norm(),
            max_abs: max_abs(m),
        })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm())))
}

/// Largest singular value.
pub fn operator_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.is_square() && (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) {
        return m.clone().symmetric_eigenvalues().amax();
    }
    m.singular_values().max()
}

/// Precomputed symmetric square root of a PSD covariance, for repeated draws.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    root: Matrix,
    diagonal: Option<Vector>,
}

impl GaussianSampler {
    /// Symmetrizes `cov` and clips eigenvalues in `[-1e-12 * ||cov||, 0)` to
    /// zero. More negative eigenvalues are a domain error.
    pub fn new(cov: &Matrix) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::Dimension(format!(
                "covariance must be square, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        ensure_finite(cov, "covariance")?;
        let d = cov.nrows();
        let is_diagonal = (0..d).all(|i| (0..d).all(|j| i == j || cov[(i, j)] == 0.0));
        let scale = cov.norm();
        let tol = PSD_TOL * scale;
        if is_diagonal {
            let mut diag = Vector::zeros(d);
            for i in 0..d {
                let v = cov[(i, i)];
                if v < -tol {
                    return Err(Error::Domain(format!(
                        "covariance not PSD: eigenvalue {v:.3e} below tolerance {:.3e}",
                        -tol
                    )));
                }
                diag[i] = v.max(0.0).sqrt();
            }
            return Ok(Self { root: Matrix::from_diagonal(&diag), diagonal: Some(diag) });
        }
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let mut sqrt_vals = Vector::zeros(d);
        for i in 0..d {
            let v = eig.eigenvalues[i];
            if v < -tol {
                return Err(Error::Domain(format!(
                    "covariance not PSD: eigenvalue {v:.3e} below tolerance {:.3e}",
                    -tol
                )));
            }
            sqrt_vals[i] = v.max(0.0).sqrt();
        }
        let root = &eig.eigenvectors * Matrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
        Ok(Self { root, diagonal: None })
    }

    pub fn dim(&self) -> usize {
        self.root.nrows()
    }

    /// Symmetric square root `C^{1/2}`.
    pub fn root(&self) -> &Matrix {
        &self.root
    }

    /// Applies `C^{1/2}` to a vector.
    pub fn apply_root(&self, v: &Vector) -> Vector {
        match &self.diagonal {
            Some(diag) => v.component_mul(diag),
            None => &self.root * v,
        }
    }

    /// `d x count` matrix whose columns are i.i.d. `N(0, C)`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Matrix {
        let d = self.dim();
        let z = Matrix::from_fn(d, count, |_, _| StandardNormal.sample(rng));
        match &self.diagonal {
            Some(diag) => {
                let mut out = z;
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= diag[i];
                }
                out
            }
            None => &self.root * z,
        }
    }
}

/// Draws `count` i.i.d. columns from `N(0, cov)` using the eigen square root
/// (valid for singular PSD covariances).
pub fn sample_gaussian(cov: &Matrix, count: usize, stream: RngStream) -> Result<Matrix> {
    let sampler = GaussianSampler::new(cov)?;
    Ok(sampler.sample(count, &mut stream.rng()))
}

/// Standard normal vector of length `d`.
pub fn standard_normal_vector<R: rand::Rng + ?Sized>(d: usize, rng: &mut R) -> Vector {
    Vector::from_fn(d, |_, _| StandardNormal.sample(rng))
}
