//! Pseudo-prior state and the EP-style updates of `g(delta)` and `g(phi)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky_lower, symmetrize, weighted_moments, GaussianApprox};
use crate::model_api::HierarchicalModel;
use crate::psis::{ImportanceRatios, SmoothedWeights};

/// Largest halving exponent tried before giving up on positive definiteness.
pub const MAX_RELAXATION: u32 = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPriorPair {
    pub g_phi: GaussianApprox,
    pub g_delta: GaussianApprox,
}

/// How the cavity precision is relaxed when it is not positive definite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Relaxation {
    /// `L0 + L2 - L1 / 2^n`.
    #[default]
    Damped,
    /// Unrelaxed cavity first; otherwise `L0 + L2 - L2 / 2^n` with `n >= 1`.
    PaperLiteral,
}

impl std::str::FromStr for Relaxation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "damped" => Ok(Self::Damped),
            "paper_literal" => Ok(Self::PaperLiteral),
            other => Err(Error::Config(format!(
                "unknown relaxation '{other}' (expected damped or paper_literal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavityUpdate {
    pub g_phi: GaussianApprox,
    /// Halving exponent that restored positive definiteness (0 = exact).
    pub relaxation_n: u32,
}

/// Per-draw `log r1 + log r2 + log r3`, with the three factors retained.
pub fn importance_log_ratios(
    phi_draws: &DMatrix<f64>,
    delta_draws: &DMatrix<f64>,
    pseudo: &PseudoPriorPair,
    model: &dyn HierarchicalModel,
    log_r3: &[f64],
) -> Result<ImportanceRatios> {
    let s = phi_draws.nrows();
    for (what, found) in [("delta draws", delta_draws.nrows()), ("log r3", log_r3.len())] {
        if found != s {
            return Err(Error::DimensionMismatch {
                what,
                expected: s,
                found,
            });
        }
    }
    let mut log_ratios = Vec::with_capacity(s);
    let mut components = Vec::with_capacity(s);
    let mut phi = vec![0.0; phi_draws.ncols()];
    let mut delta = vec![0.0; delta_draws.ncols()];
    for i in 0..s {
        phi.iter_mut()
            .enumerate()
            .for_each(|(k, v)| *v = phi_draws[(i, k)]);
        delta
            .iter_mut()
            .enumerate()
            .for_each(|(k, v)| *v = delta_draws[(i, k)]);
        let r1 = model.log_prior(&phi) - pseudo.g_phi.log_density(&phi)?;
        let r2 = model.log_prior_delta(&delta, &phi) - pseudo.g_delta.log_density(&delta)?;
        let r3 = log_r3[i];
        for (factor, v) in [("r1", r1), ("r2", r2), ("r3", r3)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLogRatio { index: i, factor });
            }
        }
        log_ratios.push(r1 + r2 + r3);
        components.push([r1, r2, r3]);
    }
    Ok(ImportanceRatios {
        log_ratios,
        components: Some(components),
    })
}

/// `N(delta_bar, V_delta)` from the weighted draws.
pub fn update_delta_pseudo_prior(delta_draws: &DMatrix<f64>, weights: &SmoothedWeights) -> Result<GaussianApprox> {
    weighted_moments(delta_draws, &weights.weights)
}

fn check_dims(g0: &GaussianApprox, others: &[&GaussianApprox]) -> Result<()> {
    for g in others {
        if g.dim() != g0.dim() {
            return Err(Error::DimensionMismatch {
                what: "cavity update",
                expected: g0.dim(),
                found: g.dim(),
            });
        }
    }
    Ok(())
}

/// Inverts a positive definite precision via its Cholesky factor.
fn invert_pd(precision: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let l = cholesky_lower(precision)?;
    let d = precision.nrows();
    let l_inv = l.solve_lower_triangular(&DMatrix::identity(d, d))?;
    Some(symmetrize(&(l_inv.transpose() * l_inv)))
}

/// `g0 * p2 / p1` in natural parameters, relaxed by halving when needed.
pub fn cavity_update_phi(
    g0: &GaussianApprox,
    p1: &GaussianApprox,
    p2: &GaussianApprox,
    relaxation: Relaxation,
) -> Result<CavityUpdate> {
    check_dims(g0, &[p1, p2])?;
    let l0 = g0.precision();
    let l1 = p1.precision();
    let l2 = p2.precision();
    let h0 = &l0 * g0.mean();
    let h1 = &l1 * p1.mean();
    let h2 = &l2 * p2.mean();

    for n in 0..=MAX_RELAXATION {
        let damp = 0.5f64.powi(n as i32);
        let (lam, h): (DMatrix<f64>, DVector<f64>) = match (relaxation, n) {
            (_, 0) | (Relaxation::Damped, _) => (&l0 + &l2 - &l1 * damp, &h0 + &h2 - &h1 * damp),
            (Relaxation::PaperLiteral, _) => (&l0 + &l2 - &l2 * damp, &h0 + &h2 - &h2 * damp),
        };
        let lam = symmetrize(&lam);
        if let Some(cov) = invert_pd(&lam) {
            let mean = &cov * h;
            if let Ok(g) = GaussianApprox::new(mean, cov) {
                return Ok(CavityUpdate {
                    g_phi: g,
                    relaxation_n: n,
                });
            }
        }
    }
    Err(Error::RelaxationExhausted { max: MAX_RELAXATION })
}

/// Inflates the diagonal so that `var(g)_i >= prior_var_i / n_max` for all i.
pub fn apply_variance_floor(g_phi: &GaussianApprox, prior_var: &[f64], n_max: f64) -> Result<GaussianApprox> {
    if prior_var.len() != g_phi.dim() {
        return Err(Error::DimensionMismatch {
            what: "prior variance",
            expected: g_phi.dim(),
            found: prior_var.len(),
        });
    }
    let mut cov = g_phi.cov().clone();
    let mut changed = false;
    for (i, pv) in prior_var.iter().enumerate() {
        let floor = pv / n_max;
        if cov[(i, i)] < floor {
            cov[(i, i)] = floor;
            changed = true;
        }
    }
    if !changed {
        return Ok(g_phi.clone());
    }
    GaussianApprox::new(g_phi.mean().clone(), cov)
}
