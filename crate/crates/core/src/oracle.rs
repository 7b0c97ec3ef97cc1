//! Reference posteriors: local data only (red), local data plus the exact
//! averaged-data likelihood (blue, linear model only) and local plus full
//! external data (green).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::GaussianApprox;
use crate::mcmc::{rhat, sample_target, HierarchicalTarget, SamplerConfig};
use crate::model_api::{
    shift_parameters_into, ExternalSummary, HierarchicalModel, LocalDataset, ParameterSpec, SimRng,
};
use crate::models_builtin::{BuiltinConfig, LinearModel};

/// Exact log density of the linear model's cohort averages at `phi_prime`.
pub fn linear_average_loglik_exact(phi_prime: &[f64], external: &ExternalSummary) -> Result<f64> {
    if phi_prime.len() != 6 {
        return Err(Error::DimensionMismatch {
            what: "linear phi",
            expected: 6,
            found: phi_prime.len(),
        });
    }
    let s1 = phi_prime[3].exp();
    let s2 = phi_prime[4].exp();
    let sy = phi_prime[5].exp();
    for (i, s) in [(3, s1), (4, s2), (5, sy)] {
        if !s.is_finite() || (i == 5 && s <= 0.0) {
            return Err(Error::Domain {
                index: i,
                value: phi_prime[i],
                transform: "log",
            });
        }
    }
    let x = &external.design;
    let t = x.len();
    let jp = external.j_prime as f64;
    let mean = DVector::from_fn(t, |k, _| phi_prime[0] + phi_prime[1] * x[k] + phi_prime[2] * x[k] * x[k]);
    let cov = DMatrix::from_fn(t, t, |a, b| {
        let noise = if a == b { sy * sy } else { 0.0 };
        (s1 * s1 + s2 * s2 * x[a] * x[b] + noise) / jp
    });
    GaussianApprox::new(mean, cov)?.log_density(&external.y_bar)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub sampler: SamplerConfig,
    /// R-hat threshold every parameter must meet.
    pub rhat_gate: f64,
    /// How many times the chain length may be doubled to meet the gate.
    pub max_doublings: u32,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig {
                n_chains: 4,
                n_iterations: 4000,
                ..Default::default()
            },
            rhat_gate: 1.01,
            max_doublings: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub rhat: Vec<f64>,
    pub n_iterations: usize,
    pub passed_gate: bool,
}

impl PosteriorSummary {
    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.mean[i], self.sd[i]))
    }
}

fn run_gated<T: HierarchicalTarget>(target: &T, cfg: &OracleConfig) -> Result<PosteriorSummary> {
    let mut sampler = cfg.sampler.clone();
    let mut attempt = 0;
    loop {
        let draws = sample_target(target, &sampler)?;
        let r = rhat(&draws)?;
        let passed = r.iter().all(|v| *v < cfg.rhat_gate);
        if passed || attempt >= cfg.max_doublings {
            return Ok(PosteriorSummary {
                names: draws.names.clone(),
                mean: draws.mean(),
                sd: draws.sd(),
                rhat: r,
                n_iterations: sampler.n_iterations,
                passed_gate: passed,
            });
        }
        attempt += 1;
        sampler.n_iterations *= 2;
    }
}

/// Chain starting points near the prior mean.
fn init_near_prior(model: &dyn HierarchicalModel, rng: &mut SimRng, with_delta: bool) -> Vec<f64> {
    let mean = model.prior_mean();
    let var = model.prior_variance();
    let mut theta: Vec<f64> = mean
        .iter()
        .zip(&var)
        .map(|(m, v)| m + v.sqrt().min(0.5) * rng.sample::<f64, _>(StandardNormal))
        .collect();
    if with_delta {
        for _ in 0..model.parameter_spec().dim_delta() {
            theta.push(0.5 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    theta
}

fn rows(data: &LocalDataset) -> Vec<Vec<f64>> {
    (0..data.n_individuals()).map(|j| data.row(j)).collect()
}

/// `p(phi) prod_j p(alpha_j | phi) p(y_j | alpha_j, phi)`.
pub struct LocalTarget<'a> {
    model: &'a dyn HierarchicalModel,
    data: &'a LocalDataset,
    rows: Vec<Vec<f64>>,
}

impl<'a> LocalTarget<'a> {
    pub fn new(model: &'a dyn HierarchicalModel, data: &'a LocalDataset) -> Self {
        Self {
            model,
            data,
            rows: rows(data),
        }
    }
}

impl HierarchicalTarget for LocalTarget<'_> {
    fn global_names(&self) -> Vec<String> {
        self.model.parameter_spec().names().to_vec()
    }
    fn individual_dim(&self) -> usize {
        self.model.individual_dim()
    }
    fn n_individuals(&self) -> usize {
        self.rows.len()
    }
    fn log_global(&self, theta: &[f64]) -> f64 {
        self.model.log_prior(theta)
    }
    fn individual_prior(&self, theta: &[f64], j: usize, loc: &mut [f64], scale: &mut [f64]) {
        self.model
            .individual_prior(theta, &self.data.covariates[j], loc, scale)
    }
    fn log_lik(&self, theta: &[f64], j: usize, alpha: &[f64]) -> f64 {
        self.model.log_likelihood(
            &self.rows[j],
            alpha,
            theta,
            &self.data.covariates[j],
            &self.data.design,
        )
    }
    fn init_global(&self, rng: &mut SimRng) -> Vec<f64> {
        init_near_prior(self.model, rng, false)
    }
}

const MAX_PHI: usize = 32;

/// Splits `theta = (phi, delta)` and writes `phi'` into `buf`.
fn shifted<'b>(spec: &ParameterSpec, theta: &[f64], buf: &'b mut [f64; MAX_PHI]) -> &'b [f64] {
    let d = spec.dim_phi();
    let out = &mut buf[..d];
    if shift_parameters_into(&theta[..d], &theta[d..], spec, out).is_err() {
        out.iter_mut().for_each(|v| *v = f64::NAN);
    }
    out
}

/// Joint posterior of `(phi, delta)` given local data and the full external
/// cohort, whose individuals follow `phi' = phi + delta`.
pub struct CompleteDataTarget<'a> {
    model: &'a dyn HierarchicalModel,
    local: &'a LocalDataset,
    external: &'a LocalDataset,
    local_rows: Vec<Vec<f64>>,
    external_rows: Vec<Vec<f64>>,
}

impl<'a> CompleteDataTarget<'a> {
    pub fn new(model: &'a dyn HierarchicalModel, local: &'a LocalDataset, external: &'a LocalDataset) -> Result<Self> {
        if model.parameter_spec().dim_phi() > MAX_PHI {
            return Err(Error::Unsupported(format!("more than {MAX_PHI} shared parameters")));
        }
        Ok(Self {
            model,
            local,
            external,
            local_rows: rows(local),
            external_rows: rows(external),
        })
    }
}

impl HierarchicalTarget for CompleteDataTarget<'_> {
    fn global_names(&self) -> Vec<String> {
        self.model.parameter_spec().all_names()
    }
    fn individual_dim(&self) -> usize {
        self.model.individual_dim()
    }
    fn n_individuals(&self) -> usize {
        self.local_rows.len() + self.external_rows.len()
    }
    fn log_global(&self, theta: &[f64]) -> f64 {
        let d = self.model.parameter_spec().dim_phi();
        self.model.log_prior(&theta[..d]) + self.model.log_prior_delta(&theta[d..], &theta[..d])
    }
    fn individual_prior(&self, theta: &[f64], j: usize, loc: &mut [f64], scale: &mut [f64]) {
        let n = self.local_rows.len();
        if j < n {
            let d = self.model.parameter_spec().dim_phi();
            self.model
                .individual_prior(&theta[..d], &self.local.covariates[j], loc, scale)
        } else {
            let mut buf = [0.0; MAX_PHI];
            let phi_prime = shifted(self.model.parameter_spec(), theta, &mut buf);
            self.model
                .individual_prior(phi_prime, &self.external.covariates[j - n], loc, scale)
        }
    }
    fn log_lik(&self, theta: &[f64], j: usize, alpha: &[f64]) -> f64 {
        let n = self.local_rows.len();
        if j < n {
            let d = self.model.parameter_spec().dim_phi();
            self.model.log_likelihood(
                &self.local_rows[j],
                alpha,
                &theta[..d],
                &self.local.covariates[j],
                &self.local.design,
            )
        } else {
            let mut buf = [0.0; MAX_PHI];
            let phi_prime = shifted(self.model.parameter_spec(), theta, &mut buf);
            self.model.log_likelihood(
                &self.external_rows[j - n],
                alpha,
                phi_prime,
                &self.external.covariates[j - n],
                &self.external.design,
            )
        }
    }
    fn init_global(&self, rng: &mut SimRng) -> Vec<f64> {
        init_near_prior(self.model, rng, true)
    }
}

/// Joint posterior of `(phi, delta)` given local data and the exact
/// linear-model density of the external averages.
pub struct ExactAverageTarget<'a> {
    model: &'a LinearModel,
    local: LocalTarget<'a>,
    external: &'a ExternalSummary,
}

impl<'a> ExactAverageTarget<'a> {
    pub fn new(model: &'a LinearModel, local: &'a LocalDataset, external: &'a ExternalSummary) -> Self {
        Self {
            model,
            local: LocalTarget::new(model, local),
            external,
        }
    }
}

impl HierarchicalTarget for ExactAverageTarget<'_> {
    fn global_names(&self) -> Vec<String> {
        self.model.parameter_spec().all_names()
    }
    fn individual_dim(&self) -> usize {
        2
    }
    fn n_individuals(&self) -> usize {
        self.local.n_individuals()
    }
    fn log_global(&self, theta: &[f64]) -> f64 {
        let spec = self.model.parameter_spec();
        let d = spec.dim_phi();
        let mut buf = [0.0; MAX_PHI];
        let phi_prime = shifted(spec, theta, &mut buf);
        let exact = linear_average_loglik_exact(phi_prime, self.external).unwrap_or(f64::NEG_INFINITY);
        self.model.log_prior(&theta[..d]) + self.model.log_prior_delta(&theta[d..], &theta[..d]) + exact
    }
    fn individual_prior(&self, theta: &[f64], j: usize, loc: &mut [f64], scale: &mut [f64]) {
        self.local.individual_prior(&theta[..6], j, loc, scale)
    }
    fn log_lik(&self, theta: &[f64], j: usize, alpha: &[f64]) -> f64 {
        self.local.log_lik(&theta[..6], j, alpha)
    }
    fn init_global(&self, rng: &mut SimRng) -> Vec<f64> {
        init_near_prior(self.model, rng, true)
    }
}

/// Local data only.
pub fn fit_red(model: &dyn HierarchicalModel, data: &LocalDataset, cfg: &OracleConfig) -> Result<PosteriorSummary> {
    run_gated(&LocalTarget::new(model, data), cfg)
}

/// Local data and the complete external cohort.
pub fn fit_green(
    model: &dyn HierarchicalModel,
    data: &LocalDataset,
    external_full: &LocalDataset,
    cfg: &OracleConfig,
) -> Result<PosteriorSummary> {
    run_gated(&CompleteDataTarget::new(model, data, external_full)?, cfg)
}

/// Local data and the exact averaged-data likelihood; linear model only.
pub fn fit_blue(
    config: &BuiltinConfig,
    data: &LocalDataset,
    external: &ExternalSummary,
    cfg: &OracleConfig,
) -> Result<PosteriorSummary> {
    match config {
        BuiltinConfig::Linear(_) => {
            let model = LinearModel::new();
            run_gated(&ExactAverageTarget::new(&model, data, external), cfg)
        }
        other => Err(Error::Unsupported(format!(
            "the exact averaged-data posterior is only available for the linear model, not {}",
            other.name()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::log_joint;
    use crate::model_api::normal_logpdf;
    use crate::models_builtin::{LinearModelConfig, LogisticModelConfig, TurnoverModel, TurnoverModelConfig};
    use rand::SeedableRng;

    fn linear_external(j_prime: usize) -> ExternalSummary {
        let design = LinearModelConfig::default().design();
        let y_bar = design.iter().map(|x| 0.6 - 0.1 * x - 0.1 * x * x).collect();
        ExternalSummary::new(y_bar, j_prime, design, vec![]).unwrap()
    }

    #[test]
    fn no_individual_spread_factorizes() {
        let ext = linear_external(200);
        let phi = [0.6, -0.1, -0.1, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.05f64.ln()];
        let exact = linear_average_loglik_exact(&phi, &ext).unwrap();
        let sd = 0.05 / 200f64.sqrt();
        let direct: f64 = ext
            .y_bar
            .iter()
            .zip(&ext.design)
            .map(|(y, x)| normal_logpdf(*y, 0.6 - 0.1 * x - 0.1 * x * x, sd))
            .sum();
        assert!((exact - direct).abs() < 1e-9);
    }

    #[test]
    fn degenerate_noise_is_rejected() {
        let ext = linear_external(200);
        let phi = [0.0, 0.0, 0.0, 0.0, 0.0, f64::NEG_INFINITY];
        assert!(matches!(linear_average_loglik_exact(&phi, &ext), Err(Error::Domain { .. })));
        assert!(linear_average_loglik_exact(&phi[..5], &ext).is_err());
    }

    #[test]
    fn simulated_cohort_averages_match_the_covariance_formula() {
        let cfg = LinearModelConfig::default();
        let model = LinearModel::new();
        let phi = cfg.true_phi();
        let design = cfg.design();
        let (j_prime, n) = (20usize, 100_000usize);
        let mut rng = SimRng::seed_from_u64(21);
        let mut avgs = DMatrix::zeros(n, 13);
        let mut row = vec![0.0; 13];
        for i in 0..n {
            for _ in 0..j_prime {
                let alpha = model.sample_individual(&phi, &[], &mut rng);
                model.simulate_observations(&alpha, &phi, &[], &design, &mut rng, &mut row);
                for t in 0..13 {
                    avgs[(i, t)] += row[t] / j_prime as f64;
                }
            }
        }
        let emp = crate::aggregate::summarize_population(&avgs).unwrap().sigma_tilde;
        let (s1, s2, sy) = (0.1f64, 0.1f64, 0.05f64);
        let truth = |a: usize, b: usize| {
            let noise = if a == b { sy * sy } else { 0.0 };
            (s1 * s1 + s2 * s2 * design[a] * design[b] + noise) / j_prime as f64
        };
        let mut checked = 0;
        for a in 0..13 {
            for b in 0..13 {
                if a != b && a != 0 {
                    continue;
                }
                let se = ((truth(a, a) * truth(b, b) + truth(a, b).powi(2)) / n as f64).sqrt();
                assert!((emp[(a, b)] - truth(a, b)).abs() < 3.0 * se, "({a},{b})");
                checked += 1;
            }
        }
        assert_eq!(checked, 25);
    }

    fn quick() -> OracleConfig {
        OracleConfig {
            sampler: SamplerConfig {
                n_chains: 2,
                n_iterations: 300,
                seed: 3,
                ..Default::default()
            },
            rhat_gate: 1.5,
            max_doublings: 0,
        }
    }

    #[test]
    fn blue_is_linear_only() {
        let cfg = BuiltinConfig::Logistic(LogisticModelConfig::default());
        let exp = cfg.simulate_experiment(1).unwrap();
        assert!(matches!(
            fit_blue(&cfg, &exp.local, &exp.external, &quick()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn complete_data_density_is_local_plus_external_block() {
        let cfg = BuiltinConfig::Turnover(TurnoverModelConfig::default());
        let exp = cfg.simulate_experiment(2).unwrap();
        let model = TurnoverModel::new();
        let green = CompleteDataTarget::new(&model, &exp.local, &exp.external_full).unwrap();
        let red = LocalTarget::new(&model, &exp.local);
        let mut theta = exp.phi_true.clone();
        theta.extend(&exp.delta_true);
        let mut rng = SimRng::seed_from_u64(0);
        let n_local = exp.local.n_individuals();
        let n_ext = exp.external_full.n_individuals();
        let alpha: Vec<f64> = (0..2 * (n_local + n_ext))
            .map(|_| 3.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let full = log_joint(&green, &theta, &alpha);
        let local = log_joint(&red, &exp.phi_true, &alpha[..2 * n_local]);
        let mut phi_prime = exp.phi_true.clone();
        phi_prime[5] += exp.delta_true[0];
        let mut ext_block = model.log_prior_delta(&exp.delta_true, &exp.phi_true);
        for j in 0..n_ext {
            let a = &alpha[2 * (n_local + j)..2 * (n_local + j + 1)];
            ext_block += model.log_individual_density(a, &phi_prime, &[1.0])
                + model.log_likelihood(&exp.external_full.row(j), a, &phi_prime, &[1.0], &exp.external_full.design);
        }
        assert!((full - (local + ext_block)).abs() < 1e-9 * full.abs());
    }

    #[test]
    fn red_fit_runs_and_summarizes() {
        let cfg = BuiltinConfig::Linear(LinearModelConfig::default());
        let exp = cfg.simulate_experiment(7).unwrap();
        let red = fit_red(&LinearModel::new(), &exp.local, &quick()).unwrap();
        assert_eq!(red.names.len(), 6);
        let (m, _) = red.get("mu_alpha1").unwrap();
        assert!((m - 0.5).abs() < 0.1);
        assert!(red.get("delta1").is_none());
    }
}
