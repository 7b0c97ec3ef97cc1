//! The contract between the fusion algorithm and a concrete hierarchical
//! model, plus the data containers it operates on.
//!
//! All shared parameters `phi` and shifts `delta` live on the unconstrained
//! scale. A shift acts additively there, so a shift on a log-transformed
//! parameter is multiplicative on the natural scale.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Random number generator used for every simulation stream.
pub type SimRng = ChaCha8Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Log,
    Logit,
}

impl Transform {
    pub fn forward(self, value: f64, index: usize) -> Result<f64> {
        match self {
            Transform::Identity => Ok(value),
            Transform::Log if value > 0.0 => Ok(value.ln()),
            Transform::Log => Err(Error::Domain {
                index,
                value,
                transform: "log",
            }),
            Transform::Logit if value > 0.0 && value < 1.0 => Ok((value / (1.0 - value)).ln()),
            Transform::Logit => Err(Error::Domain {
                index,
                value,
                transform: "logit",
            }),
        }
    }

    pub fn inverse(self, value: f64) -> f64 {
        match self {
            Transform::Identity => value,
            Transform::Log => value.exp(),
            Transform::Logit => 1.0 / (1.0 + (-value).exp()),
        }
    }
}

/// Names and transforms of the shared parameters, and where the shift
/// components land.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpec {
    names: Vec<String>,
    transforms: Vec<Transform>,
    delta_names: Vec<String>,
    delta_target: Vec<usize>,
}

impl ParameterSpec {
    pub fn new(
        names: Vec<String>,
        transforms: Vec<Transform>,
        delta_names: Vec<String>,
        delta_target: Vec<usize>,
    ) -> Result<Self> {
        if names.len() != transforms.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter transforms",
                expected: names.len(),
                found: transforms.len(),
            });
        }
        if delta_names.len() != delta_target.len() {
            return Err(Error::DimensionMismatch {
                what: "delta targets",
                expected: delta_names.len(),
                found: delta_target.len(),
            });
        }
        for (i, &t) in delta_target.iter().enumerate() {
            if t >= names.len() {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    len: names.len(),
                });
            }
            if delta_target[..i].contains(&t) {
                return Err(Error::Config(format!("delta target {t} listed twice")));
            }
        }
        Ok(Self {
            names,
            transforms,
            delta_names,
            delta_target,
        })
    }

    pub fn dim_phi(&self) -> usize {
        self.names.len()
    }

    pub fn dim_delta(&self) -> usize {
        self.delta_target.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn delta_names(&self) -> &[String] {
        &self.delta_names
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn delta_target(&self) -> &[usize] {
        &self.delta_target
    }

    /// Names of phi followed by delta, the order used in traces.
    pub fn all_names(&self) -> Vec<String> {
        self.names.iter().chain(&self.delta_names).cloned().collect()
    }
}

/// `phi'`: `phi` with `delta` added at the target indices.
pub fn shift_parameters(phi: &[f64], delta: &[f64], spec: &ParameterSpec) -> Result<Vec<f64>> {
    let mut out = phi.to_vec();
    shift_parameters_into(phi, delta, spec, &mut out)?;
    Ok(out)
}

pub(crate) fn shift_parameters_into(
    phi: &[f64],
    delta: &[f64],
    spec: &ParameterSpec,
    out: &mut [f64],
) -> Result<()> {
    if phi.len() != spec.dim_phi() {
        return Err(Error::DimensionMismatch {
            what: "phi",
            expected: spec.dim_phi(),
            found: phi.len(),
        });
    }
    if delta.len() != spec.dim_delta() {
        return Err(Error::DimensionMismatch {
            what: "delta",
            expected: spec.dim_delta(),
            found: delta.len(),
        });
    }
    out.copy_from_slice(phi);
    for (d, &t) in delta.iter().zip(&spec.delta_target) {
        *out.get_mut(t).ok_or(Error::IndexOutOfRange {
            index: t,
            len: phi.len(),
        })? += d;
    }
    Ok(())
}

/// Maps natural-scale values onto the unconstrained scale.
pub fn to_unconstrained(values: &[f64], spec: &ParameterSpec) -> Result<Vec<f64>> {
    if values.len() != spec.dim_phi() {
        return Err(Error::DimensionMismatch {
            what: "natural-scale parameters",
            expected: spec.dim_phi(),
            found: values.len(),
        });
    }
    values
        .iter()
        .zip(&spec.transforms)
        .enumerate()
        .map(|(i, (v, t))| t.forward(*v, i))
        .collect()
}

pub fn from_unconstrained(values: &[f64], spec: &ParameterSpec) -> Result<Vec<f64>> {
    if values.len() != spec.dim_phi() {
        return Err(Error::DimensionMismatch {
            what: "unconstrained parameters",
            expected: spec.dim_phi(),
            found: values.len(),
        });
    }
    Ok(values
        .iter()
        .zip(&spec.transforms)
        .map(|(v, t)| t.inverse(*v))
        .collect())
}

/// Individual-level data: `y` is J x T, one row per individual.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub y: DMatrix<f64>,
    pub design: Vec<f64>,
    /// One covariate vector per individual (e.g. a treatment indicator).
    pub covariates: Vec<Vec<f64>>,
}

impl LocalDataset {
    pub fn new(y: DMatrix<f64>, design: Vec<f64>, covariates: Vec<Vec<f64>>) -> Result<Self> {
        if y.ncols() != design.len() {
            return Err(Error::DimensionMismatch {
                what: "local design",
                expected: y.ncols(),
                found: design.len(),
            });
        }
        if covariates.len() != y.nrows() {
            return Err(Error::DimensionMismatch {
                what: "local covariates",
                expected: y.nrows(),
                found: covariates.len(),
            });
        }
        check_increasing(&design)?;
        Ok(Self {
            y,
            design,
            covariates,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.design.len()
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.y.row(j).iter().copied().collect()
    }
}

/// Time-point averages over `j_prime` external individuals, with the
/// covariate context under which they were collected.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSummary {
    pub y_bar: Vec<f64>,
    pub j_prime: usize,
    pub design: Vec<f64>,
    pub context: Vec<f64>,
}

impl ExternalSummary {
    pub fn new(y_bar: Vec<f64>, j_prime: usize, design: Vec<f64>, context: Vec<f64>) -> Result<Self> {
        if j_prime < 2 {
            return Err(Error::Config(format!("J' must be at least 2, got {j_prime}")));
        }
        if y_bar.len() != design.len() {
            return Err(Error::DimensionMismatch {
                what: "external design",
                expected: y_bar.len(),
                found: design.len(),
            });
        }
        check_increasing(&design)?;
        Ok(Self {
            y_bar,
            j_prime,
            design,
            context,
        })
    }

    pub fn n_times(&self) -> usize {
        self.design.len()
    }
}

fn check_increasing(design: &[f64]) -> Result<()> {
    if design.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("design points must be strictly increasing".into()));
    }
    Ok(())
}

/// A hierarchical model `p(phi) prod_j p(alpha_j | phi) p(y_j | alpha_j, phi)`.
///
/// Individual parameters are independent normals on the unconstrained scale
/// given `phi` and the individual's covariates; [`individual_prior`]
/// returns their location and scale. Implementations must be stateless:
/// every method may be called concurrently with caller-owned RNG streams.
///
/// [`individual_prior`]: HierarchicalModel::individual_prior
pub trait HierarchicalModel: Send + Sync {
    fn parameter_spec(&self) -> &ParameterSpec;

    /// `log p(phi)` on the unconstrained scale, Jacobian included.
    fn log_prior(&self, phi: &[f64]) -> f64;

    /// Componentwise variance of `p(phi)` on the unconstrained scale.
    fn prior_variance(&self) -> Vec<f64>;

    /// Componentwise mean of `p(phi)` on the unconstrained scale.
    fn prior_mean(&self) -> Vec<f64> {
        vec![0.0; self.parameter_spec().dim_phi()]
    }

    /// `log p(delta | phi)`. The builtin models use a prior independent of
    /// `phi`; the argument is kept for models that need the conditional.
    fn log_prior_delta(&self, delta: &[f64], phi: &[f64]) -> f64;

    fn individual_dim(&self) -> usize;

    fn individual_prior(&self, phi: &[f64], covariates: &[f64], loc: &mut [f64], scale: &mut [f64]);

    /// Writes one simulated observation vector (one entry per design point)
    /// into `out`.
    fn simulate_observations(
        &self,
        alpha: &[f64],
        phi: &[f64],
        covariates: &[f64],
        design: &[f64],
        rng: &mut SimRng,
        out: &mut [f64],
    );

    fn log_likelihood(&self, y: &[f64], alpha: &[f64], phi: &[f64], covariates: &[f64], design: &[f64])
        -> f64;

    fn sample_individual(&self, phi: &[f64], covariates: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let d = self.individual_dim();
        let mut loc = vec![0.0; d];
        let mut scale = vec![0.0; d];
        self.individual_prior(phi, covariates, &mut loc, &mut scale);
        loc.iter()
            .zip(&scale)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn log_individual_density(&self, alpha: &[f64], phi: &[f64], covariates: &[f64]) -> f64 {
        let d = self.individual_dim();
        let mut loc = vec![0.0; d];
        let mut scale = vec![0.0; d];
        self.individual_prior(phi, covariates, &mut loc, &mut scale);
        independent_normal_logpdf(alpha, &loc, &scale)
    }
}

pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * (LN_2PI + z * z) - sd.ln()
}

pub fn independent_normal_logpdf(x: &[f64], loc: &[f64], scale: &[f64]) -> f64 {
    x.iter()
        .zip(loc)
        .zip(scale)
        .map(|((x, m), s)| normal_logpdf(*x, *m, *s))
        .sum()
}
