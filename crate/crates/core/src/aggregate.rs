//! Normal approximation to the likelihood of averaged external data, built
//! from a simulated population of hypothetical individuals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky_lower, symmetrize, JITTER};
use crate::model_api::{ExternalSummary, HierarchicalModel, SimRng};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSummary {
    pub m_tilde: DVector<f64>,
    pub sigma_tilde: DMatrix<f64>,
    pub j_tilde: usize,
}

impl PopulationSummary {
    pub fn n_times(&self) -> usize {
        self.m_tilde.len()
    }

    /// With `J~ <= T'` the sample covariance cannot be full rank.
    pub fn is_rank_deficient(&self) -> bool {
        self.j_tilde < self.n_times() + 1
    }
}

/// Simulates `j_tilde` hypothetical individuals under `phi_prime` at the
/// external design points, one row per individual. `draw` labels errors.
pub fn simulate_population(
    model: &dyn HierarchicalModel,
    phi_prime: &[f64],
    j_tilde: usize,
    context: &ExternalSummary,
    draw: usize,
    rng: &mut SimRng,
) -> Result<DMatrix<f64>> {
    if j_tilde < 2 {
        return Err(Error::Config(format!("J~ must be at least 2, got {j_tilde}")));
    }
    let t = context.n_times();
    let da = model.individual_dim();
    let mut loc = vec![0.0; da];
    let mut scale = vec![0.0; da];
    model.individual_prior(phi_prime, &context.context, &mut loc, &mut scale);
    let mut alpha = vec![0.0; da];
    let mut row = vec![0.0; t];
    // Row-major fill, transposed once at the end.
    let mut buf = Vec::with_capacity(j_tilde * t);
    for _ in 0..j_tilde {
        for k in 0..da {
            alpha[k] = loc[k] + scale[k] * rand::Rng::sample::<f64, _>(rng, rand_distr::StandardNormal);
        }
        model.simulate_observations(&alpha, phi_prime, &context.context, &context.design, rng, &mut row);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSimulation { draw });
        }
        buf.extend_from_slice(&row);
    }
    Ok(DMatrix::from_row_slice(j_tilde, t, &buf))
}

/// Column means and the sample covariance (divisor `J~ - 1`) of the rows.
pub fn summarize_population(data: &DMatrix<f64>) -> Result<PopulationSummary> {
    let (n, t) = data.shape();
    if n < 2 {
        return Err(Error::DimensionMismatch {
            what: "simulated population rows (need >= 2)",
            expected: 2,
            found: n,
        });
    }
    let mean = DVector::from_fn(t, |k, _| data.column(k).mean());
    let mut centered = data.clone();
    for k in 0..t {
        let m = mean[k];
        centered.column_mut(k).add_scalar_mut(-m);
    }
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    Ok(PopulationSummary {
        m_tilde: mean,
        sigma_tilde: symmetrize(&cov),
        j_tilde: n,
    })
}

/// `log N(y_bar' | M~, Sigma~ / J')`, with a relative diagonal jitter.
pub fn average_data_loglik(summary: &PopulationSummary, external: &ExternalSummary) -> Result<f64> {
    let t = summary.n_times();
    if external.n_times() != t {
        return Err(Error::DimensionMismatch {
            what: "external summary",
            expected: t,
            found: external.n_times(),
        });
    }
    if summary.is_rank_deficient() {
        return Err(Error::SingularSummary {
            j_tilde: summary.j_tilde,
        });
    }
    let mut cov = &summary.sigma_tilde / external.j_prime as f64;
    let jitter = JITTER * cov.diagonal().mean();
    for k in 0..t {
        cov[(k, k)] += jitter;
    }
    let l = cholesky_lower(&cov).ok_or(Error::SingularSummary {
        j_tilde: summary.j_tilde,
    })?;
    let diff = DVector::from_column_slice(&external.y_bar) - &summary.m_tilde;
    let z = l
        .solve_lower_triangular(&diff)
        .ok_or(Error::SingularSummary {
            j_tilde: summary.j_tilde,
        })?;
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (t as f64 * LN_2PI + log_det + z.norm_squared()))
}

/// Simulate, summarize and evaluate in one call: `log r3` for one draw.
pub fn simulated_log_r3(
    model: &dyn HierarchicalModel,
    phi_prime: &[f64],
    j_tilde: usize,
    external: &ExternalSummary,
    draw: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let pop = simulate_population(model, phi_prime, j_tilde, external, draw, rng)?;
    average_data_loglik(&summarize_population(&pop)?, external)
}
