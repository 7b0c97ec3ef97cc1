//! Dense Gaussian linear algebra: multivariate normal densities, a
//! tolerance-aware Cholesky factorization and weighted moment matching.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative pivot tolerance: a pivot must exceed this times the largest
/// diagonal entry for the matrix to count as positive definite.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Diagonal jitter, relative to the mean diagonal, used when a moment
/// estimate is only positive semidefinite.
pub const JITTER: f64 = 1e-8;

/// A multivariate normal on the unconstrained parameter scale. The Cholesky
/// factor of the covariance is cached at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianApprox {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl GaussianApprox {
    /// Builds the approximation, symmetrizing `cov` first. Fails if the
    /// dimensions disagree or the covariance is not positive definite.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::NotSquare {
                rows: cov.nrows(),
                cols: cov.ncols(),
            });
        }
        if cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                what: "gaussian mean/covariance",
                expected: mean.len(),
                found: cov.nrows(),
            });
        }
        let cov = symmetrize(&cov);
        let chol = cholesky_lower(&cov).ok_or_else(|| Error::NotPositiveDefinite {
            matrix: "covariance".into(),
        })?;
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_det,
        })
    }

    /// Like [`GaussianApprox::new`], but if `cov` is only semidefinite a
    /// diagonal jitter of [`JITTER`] times the mean diagonal is added once.
    pub fn with_jitter(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        match Self::new(mean.clone(), cov.clone()) {
            Err(Error::NotPositiveDefinite { .. }) => {
                let d = cov.nrows();
                let scale = if d == 0 { 0.0 } else { cov.trace() / d as f64 };
                let bump = if scale > 0.0 { JITTER * scale } else { JITTER };
                let jittered = cov + DMatrix::identity(d, d) * bump;
                Self::new(mean, jittered)
            }
            other => other,
        }
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("identity covariance is positive definite")
    }

    /// Independent normals with the given means and variances.
    pub fn diagonal(mean: &[f64], var: &[f64]) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::DimensionMismatch {
                what: "diagonal gaussian",
                expected: mean.len(),
                found: var.len(),
            });
        }
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(var)),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor of the covariance.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn sd(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| v.sqrt()).collect()
    }

    /// Inverse covariance, computed from the cached factor.
    pub fn precision(&self) -> DMatrix<f64> {
        let d = self.dim();
        let linv = self
            .chol
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("cholesky factor has a nonzero diagonal");
        symmetrize(&(linv.transpose() * linv))
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                what: "mvn_logpdf point",
                expected: d,
                found: x.len(),
            });
        }
        // Forward substitution L z = x - mean.
        let mut z = vec![0.0; d];
        let mut quad = 0.0;
        for i in 0..d {
            let mut acc = x[i] - self.mean[i];
            for (k, zk) in z.iter().enumerate().take(i) {
                acc -= self.chol[(i, k)] * zk;
            }
            z[i] = acc / self.chol[(i, i)];
            quad += z[i] * z[i];
        }
        Ok(-0.5 * (d as f64 * LN_2PI + self.log_det + quad))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol * z
    }
}

/// Log density of `x` under `g`.
pub fn mvn_logpdf(x: &[f64], g: &GaussianApprox) -> Result<f64> {
    g.log_density(x)
}

/// Weighted mean and population-form weighted covariance (denominator
/// `sum(w)`) of the rows of `samples`. Weights need not be normalized.
pub fn weighted_moments(samples: &DMatrix<f64>, weights: &[f64]) -> Result<GaussianApprox> {
    let (s, d) = samples.shape();
    if weights.len() != s {
        return Err(Error::DimensionMismatch {
            what: "weighted_moments weights",
            expected: s,
            found: weights.len(),
        });
    }
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Parse(format!("weight {i} is negative or not finite")));
    }
    let positive = weights.iter().filter(|w| **w > 0.0).count();
    if positive < 2 {
        return Err(Error::DegenerateWeights { positive });
    }
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(d);
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            for k in 0..d {
                mean[k] += w * samples[(i, k)];
            }
        }
    }
    mean /= total;
    let mut cov = DMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for k in 0..d {
            centered[k] = samples[(i, k)] - mean[k];
        }
        for a in 0..d {
            let wa = w * centered[a];
            for b in 0..=a {
                cov[(a, b)] += wa * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    cov /= total;
    GaussianApprox::with_jitter(mean, cov)
}

/// True iff the (symmetrized) matrix admits a Cholesky factorization with
/// every pivot above [`PIVOT_TOLERANCE`] times the largest diagonal entry.
pub fn is_positive_definite(m: &DMatrix<f64>) -> Result<bool> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(cholesky_lower(&symmetrize(m)).is_some())
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Lower-triangular Cholesky factor, or `None` when a pivot falls below the
/// relative tolerance. A 0x0 matrix factors trivially.
pub(crate) fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let max_diag = m.diagonal().iter().fold(0.0_f64, |acc, v| acc.max(*v));
    if n > 0 && !(max_diag > 0.0 && max_diag.is_finite()) {
        return None;
    }
    let tol = PIVOT_TOLERANCE * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = m[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > tol) {
            return None;
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut acc = m[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = acc / ljj;
        }
    }
    Some(l)
}
