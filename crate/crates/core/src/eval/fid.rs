use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Diagonal jitter added when a covariance product has a badly negative spectrum.
const JITTER: f64 = 1e-6;

/// Sample mean and (unbiased) covariance of row vectors.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn fit(samples: &[Vec<f32>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 samples to estimate a covariance, got {}",
                samples.len()
            )));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::Validation("embeddings must share a positive dimension".into()));
        }
        let n = samples.len();
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j] as f64);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }
}

/// Principal square root of a symmetric positive semi-definite matrix; negative eigenvalues
/// (numerical noise) are clamped to zero. Returns the root and the most negative eigenvalue.
fn sqrt_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    (root, min)
}

/// `tr((A B)^{1/2})` for symmetric PSD `A`, `B`, via the similar matrix `A^{1/2} B A^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (f64, f64) {
    let (ra, min_a) = sqrt_psd(a);
    let inner = &ra * b * &ra;
    let (root, min_inner) = sqrt_psd(&inner);
    (root.trace(), min_a.min(min_inner))
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(a: &Gaussian, b: &Gaussian) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Validation(format!(
            "embedding dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let scale = a.cov.trace().abs().max(b.cov.trace().abs()).max(1.0);
    let (mut tr_sqrt, min_eig) = trace_sqrt_product(&a.cov, &b.cov);
    if !tr_sqrt.is_finite() || min_eig < -1e-6 * scale {
        let d = a.mean.len();
        let eye = DMatrix::<f64>::identity(d, d) * (JITTER * scale);
        log::warn!("covariance square root unstable (min eigenvalue {min_eig:e}); adding {JITTER:e} diagonal jitter");
        tr_sqrt = trace_sqrt_product(&(&a.cov + &eye), &(&b.cov + &eye)).0;
    }
    let value = diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("FID evaluated to {value}")));
    }
    Ok(value.max(0.0))
}

/// FID between two sets of embeddings.
pub fn fid(set_a: &[Vec<f32>], set_b: &[Vec<f32>]) -> Result<f64> {
    frechet_distance(&Gaussian::fit(set_a)?, &Gaussian::fit(set_b)?)
}
