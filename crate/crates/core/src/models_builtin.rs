//! Hierarchical linear, hierarchical logistic and turnover models, with
//! simulators for local data and an external cohort.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model_api::{
    normal_logpdf, shift_parameters, ExternalSummary, HierarchicalModel, LocalDataset, ParameterSpec, SimRng,
    Transform,
};

fn owned(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn transforms_for(names: &[String]) -> Vec<Transform> {
    names
        .iter()
        .map(|n| {
            if n.starts_with("log_") {
                Transform::Log
            } else {
                Transform::Identity
            }
        })
        .collect()
}

/// `0, h/(T-1), ..., h`.
fn even_design(n_times: usize, horizon: f64) -> Vec<f64> {
    (0..n_times)
        .map(|t| horizon * t as f64 / (n_times - 1) as f64)
        .collect()
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModelConfig {
    pub j: usize,
    pub j_prime: usize,
    pub n_times: usize,
    pub mu_alpha: [f64; 2],
    pub sigma_alpha: [f64; 2],
    pub beta: f64,
    pub sigma_y: f64,
    pub delta: [f64; 2],
}

impl Default for LinearModelConfig {
    fn default() -> Self {
        Self {
            j: 50,
            j_prime: 200,
            n_times: 13,
            mu_alpha: [0.5, -0.2],
            sigma_alpha: [0.1, 0.1],
            beta: -0.1,
            sigma_y: 0.05,
            delta: [0.1, 0.1],
        }
    }
}

impl LinearModelConfig {
    pub fn design(&self) -> Vec<f64> {
        even_design(self.n_times, 1.0)
    }

    /// True `phi` on the unconstrained scale.
    pub fn true_phi(&self) -> Vec<f64> {
        vec![
            self.mu_alpha[0],
            self.mu_alpha[1],
            self.beta,
            self.sigma_alpha[0].ln(),
            self.sigma_alpha[1].ln(),
            self.sigma_y.ln(),
        ]
    }
}

/// `y_jt ~ N(a_j1 + a_j2 x_t + beta x_t^2, sigma_y^2)`,
/// `a_j ~ N(mu_alpha, diag(sigma_alpha^2))`; unit-normal priors.
#[derive(Debug, Clone)]
pub struct LinearModel {
    spec: ParameterSpec,
}

impl Default for LinearModel {
    fn default() -> Self {
        Self::new()
    }
}

impl LinearModel {
    pub fn new() -> Self {
        let names = owned(&[
            "mu_alpha1",
            "mu_alpha2",
            "beta",
            "log_sigma_alpha1",
            "log_sigma_alpha2",
            "log_sigma_y",
        ]);
        let transforms = transforms_for(&names);
        let spec = ParameterSpec::new(names, transforms, vec!["delta1".into(), "delta2".into()], vec![0, 1])
            .expect("linear parameter spec is valid");
        Self { spec }
    }

    fn mean_curve(alpha: &[f64], beta: f64, x: f64) -> f64 {
        alpha[0] + alpha[1] * x + beta * x * x
    }
}

impl HierarchicalModel for LinearModel {
    fn parameter_spec(&self) -> &ParameterSpec {
        &self.spec
    }

    fn log_prior(&self, phi: &[f64]) -> f64 {
        phi.iter().map(|v| normal_logpdf(*v, 0.0, 1.0)).sum()
    }

    fn prior_variance(&self) -> Vec<f64> {
        vec![1.0; 6]
    }

    fn log_prior_delta(&self, delta: &[f64], _phi: &[f64]) -> f64 {
        delta.iter().map(|v| normal_logpdf(*v, 0.0, 1.0)).sum()
    }

    fn individual_dim(&self) -> usize {
        2
    }

    fn individual_prior(&self, phi: &[f64], _covariates: &[f64], loc: &mut [f64], scale: &mut [f64]) {
        loc[0] = phi[0];
        loc[1] = phi[1];
        scale[0] = phi[3].exp();
        scale[1] = phi[4].exp();
    }

    fn simulate_observations(
        &self,
        alpha: &[f64],
        phi: &[f64],
        _covariates: &[f64],
        design: &[f64],
        rng: &mut SimRng,
        out: &mut [f64],
    ) {
        let sigma_y = phi[5].exp();
        for (o, &x) in out.iter_mut().zip(design) {
            *o = Self::mean_curve(alpha, phi[2], x) + sigma_y * rng.sample::<f64, _>(StandardNormal);
        }
    }

    fn log_likelihood(&self, y: &[f64], alpha: &[f64], phi: &[f64], _covariates: &[f64], design: &[f64]) -> f64 {
        let sigma_y = phi[5].exp();
        y.iter()
            .zip(design)
            .map(|(y, &x)| normal_logpdf(*y, Self::mean_curve(alpha, phi[2], x), sigma_y))
            .sum()
    }
}

// -------------------------------------------------------------- logistic

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModelConfig {
    pub j: usize,
    pub j_prime: usize,
    pub n_times: usize,
    pub mu_alpha: [f64; 2],
    pub sigma_alpha: [f64; 2],
    pub beta: f64,
    pub delta: [f64; 2],
    /// Binomial trials per cell.
    pub trials: u64,
}

impl Default for LogisticModelConfig {
    fn default() -> Self {
        let lin = LinearModelConfig::default();
        Self {
            j: lin.j,
            j_prime: lin.j_prime,
            n_times: lin.n_times,
            mu_alpha: lin.mu_alpha,
            sigma_alpha: lin.sigma_alpha,
            beta: lin.beta,
            delta: lin.delta,
            trials: 20,
        }
    }
}

impl LogisticModelConfig {
    pub fn design(&self) -> Vec<f64> {
        even_design(self.n_times, 1.0)
    }

    pub fn true_phi(&self) -> Vec<f64> {
        vec![
            self.mu_alpha[0],
            self.mu_alpha[1],
            self.beta,
            self.sigma_alpha[0].ln(),
            self.sigma_alpha[1].ln(),
        ]
    }
}

/// Successes out of `trials` with `p = logit^-1(a_j1 + a_j2 x_t + beta x_t^2)`.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    spec: ParameterSpec,
    trials: u64,
    /// `ln C(trials, k)` for `k = 0..=trials`.
    ln_choose: Vec<f64>,
}

impl LogisticModel {
    pub fn new(trials: u64) -> Self {
        let names = owned(&["mu_alpha1", "mu_alpha2", "beta", "log_sigma_alpha1", "log_sigma_alpha2"]);
        let transforms = transforms_for(&names);
        let spec = ParameterSpec::new(names, transforms, vec!["delta1".into(), "delta2".into()], vec![0, 1])
            .expect("logistic parameter spec is valid");
        let ln_choose = (0..=trials).map(|k| ln_choose(trials, k)).collect();
        Self {
            spec,
            trials,
            ln_choose,
        }
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    pub fn probability(alpha: &[f64], beta: f64, x: f64) -> f64 {
        1.0 / (1.0 + (-LinearModel::mean_curve(alpha, beta, x)).exp())
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

impl HierarchicalModel for LogisticModel {
    fn parameter_spec(&self) -> &ParameterSpec {
        &self.spec
    }

    fn log_prior(&self, phi: &[f64]) -> f64 {
        phi.iter().map(|v| normal_logpdf(*v, 0.0, 1.0)).sum()
    }

    fn prior_variance(&self) -> Vec<f64> {
        vec![1.0; 5]
    }

    fn log_prior_delta(&self, delta: &[f64], _phi: &[f64]) -> f64 {
        delta.iter().map(|v| normal_logpdf(*v, 0.0, 1.0)).sum()
    }

    fn individual_dim(&self) -> usize {
        2
    }

    fn individual_prior(&self, phi: &[f64], _covariates: &[f64], loc: &mut [f64], scale: &mut [f64]) {
        loc[0] = phi[0];
        loc[1] = phi[1];
        scale[0] = phi[3].exp();
        scale[1] = phi[4].exp();
    }

    fn simulate_observations(
        &self,
        alpha: &[f64],
        phi: &[f64],
        _covariates: &[f64],
        design: &[f64],
        rng: &mut SimRng,
        out: &mut [f64],
    ) {
        for (o, &x) in out.iter_mut().zip(design) {
            let p = Self::probability(alpha, phi[2], x);
            *o = match Binomial::new(self.trials, p) {
                Ok(b) => b.sample(rng) as f64,
                Err(_) => f64::NAN,
            };
        }
    }

    fn log_likelihood(&self, y: &[f64], alpha: &[f64], phi: &[f64], _covariates: &[f64], design: &[f64]) -> f64 {
        let n = self.trials as f64;
        y.iter()
            .zip(design)
            .map(|(&k, &x)| {
                let eta = LinearModel::mean_curve(alpha, phi[2], x);
                // log p = -softplus(-eta), log(1-p) = -softplus(eta)
                let log_c = self.ln_choose.get(k as usize).copied().unwrap_or(f64::NEG_INFINITY);
                log_c - k * softplus(-eta) - (n - k) * softplus(eta)
            })
            .sum()
    }
}

// -------------------------------------------------------------- turnover

#[derive(Debug, Clone, PartialEq)]
pub struct TurnoverModelConfig {
    pub j: usize,
    /// The first `n_placebo` local individuals are untreated.
    pub n_placebo: usize,
    pub j_prime: usize,
    pub n_times: usize,
    /// Last observation time, in weeks.
    pub horizon: f64,
    pub l_alpha0: f64,
    pub sigma_l_alpha0: f64,
    pub l_alpha_s: f64,
    pub sigma_l_alpha_s: f64,
    pub l_kappa: f64,
    pub l_emax: f64,
    pub delta: f64,
    pub sigma_y: f64,
}

impl Default for TurnoverModelConfig {
    fn default() -> Self {
        Self {
            j: 100,
            n_placebo: 50,
            j_prime: 50,
            n_times: 13,
            horizon: 52.0,
            l_alpha0: 50f64.ln(),
            sigma_l_alpha0: 0.1,
            l_alpha_s: 42f64.ln(),
            sigma_l_alpha_s: 0.15,
            l_kappa: 42f64.ln() - 2.0 * 10f64.ln(),
            l_emax: 0.4f64.ln(),
            delta: 0.2,
            sigma_y: 0.2,
        }
    }
}

impl TurnoverModelConfig {
    pub fn design(&self) -> Vec<f64> {
        even_design(self.n_times, self.horizon)
    }

    pub fn true_phi(&self) -> Vec<f64> {
        vec![
            self.l_alpha0,
            self.sigma_l_alpha0.ln(),
            self.l_alpha_s,
            self.sigma_l_alpha_s.ln(),
            self.l_kappa,
            self.l_emax,
            self.sigma_y.ln(),
        ]
    }
}

/// `(k_in, k_out)` from `l_kappa = log(k_in k_out)` and
/// `l_ratio = log(k_in / k_out)`.
pub fn turnover_rates(l_kappa: f64, l_ratio: f64) -> (f64, f64) {
    let k_in = (0.5 * (l_kappa + l_ratio)).exp();
    let k_out = (0.5 * (l_kappa - l_ratio)).exp();
    (k_in, k_out)
}

/// Steady state `(k_in / k_out)(1 + e_max s)`.
pub fn turnover_steady_state(k_in: f64, k_out: f64, e_max: f64, s: f64) -> f64 {
    k_in / k_out * (1.0 + e_max * s)
}

/// Response under constant stimulation `s`, starting from `r0` at `t = 0`.
pub fn turnover_response(t: f64, r0: f64, k_in: f64, k_out: f64, e_max: f64, s: f64) -> f64 {
    let rss = turnover_steady_state(k_in, k_out, e_max, s);
    let decay = (-k_out * t).exp();
    r0 * decay - rss * (-k_out * t).exp_m1()
}

/// Turnover response with constant maximal stimulation in treated
/// individuals and lognormal measurement error. The individual covariate is
/// the treatment indicator `s_j`; individual parameters are
/// `(log R0_j, log(k_in/k_out)_j)`.
#[derive(Debug, Clone)]
pub struct TurnoverModel {
    spec: ParameterSpec,
    prior_mean: Vec<f64>,
}

impl Default for TurnoverModel {
    fn default() -> Self {
        Self::new()
    }
}

const TURNOVER_PRIOR_SD: f64 = 5.0;

impl TurnoverModel {
    pub fn new() -> Self {
        let names = owned(&[
            "l_alpha0",
            "log_sigma_l_alpha0",
            "l_alpha_s",
            "log_sigma_l_alpha_s",
            "l_kappa",
            "l_emax",
            "log_sigma_y",
        ]);
        let transforms = transforms_for(&names);
        let spec = ParameterSpec::new(names, transforms, vec!["delta".into()], vec![5])
            .expect("turnover parameter spec is valid");
        let prior_mean = vec![
            50f64.ln(),
            0.1f64.ln(),
            50f64.ln(),
            0.1f64.ln(),
            50f64.ln() - 2.0,
            0.1f64.ln(),
            0.0,
        ];
        Self { spec, prior_mean }
    }

    /// `R(t)` at every design point, for one individual.
    fn responses(alpha: &[f64], phi: &[f64], s: f64, design: &[f64], out: &mut [f64]) {
        let (k_in, k_out) = turnover_rates(phi[4], alpha[1]);
        let e_max = phi[5].exp();
        let r0 = alpha[0].exp();
        for (o, &t) in out.iter_mut().zip(design) {
            *o = turnover_response(t, r0, k_in, k_out, e_max, s);
        }
    }
}

impl HierarchicalModel for TurnoverModel {
    fn parameter_spec(&self) -> &ParameterSpec {
        &self.spec
    }

    fn log_prior(&self, phi: &[f64]) -> f64 {
        phi.iter()
            .zip(&self.prior_mean)
            .map(|(v, m)| normal_logpdf(*v, *m, TURNOVER_PRIOR_SD))
            .sum()
    }

    fn prior_variance(&self) -> Vec<f64> {
        vec![TURNOVER_PRIOR_SD * TURNOVER_PRIOR_SD; 7]
    }

    fn prior_mean(&self) -> Vec<f64> {
        self.prior_mean.clone()
    }

    fn log_prior_delta(&self, delta: &[f64], _phi: &[f64]) -> f64 {
        normal_logpdf(delta[0], 0.0, TURNOVER_PRIOR_SD)
    }

    fn individual_dim(&self) -> usize {
        2
    }

    fn individual_prior(&self, phi: &[f64], _covariates: &[f64], loc: &mut [f64], scale: &mut [f64]) {
        loc[0] = phi[0];
        loc[1] = phi[2];
        scale[0] = phi[1].exp();
        scale[1] = phi[3].exp();
    }

    fn simulate_observations(
        &self,
        alpha: &[f64],
        phi: &[f64],
        covariates: &[f64],
        design: &[f64],
        rng: &mut SimRng,
        out: &mut [f64],
    ) {
        Self::responses(alpha, phi, covariates[0], design, out);
        let sigma_y = phi[6].exp();
        for o in out.iter_mut() {
            *o *= (sigma_y * rng.sample::<f64, _>(StandardNormal)).exp();
        }
    }

    fn log_likelihood(&self, y: &[f64], alpha: &[f64], phi: &[f64], covariates: &[f64], design: &[f64]) -> f64 {
        let mut r = [0.0; 64];
        let r = if design.len() <= r.len() {
            &mut r[..design.len()]
        } else {
            return self.log_likelihood_alloc(y, alpha, phi, covariates, design);
        };
        Self::responses(alpha, phi, covariates[0], design, r);
        let sigma_y = phi[6].exp();
        y.iter()
            .zip(r.iter())
            .map(|(y, r)| {
                let ly = y.ln();
                normal_logpdf(ly, r.ln(), sigma_y) - ly
            })
            .sum()
    }
}

impl TurnoverModel {
    fn log_likelihood_alloc(&self, y: &[f64], alpha: &[f64], phi: &[f64], covariates: &[f64], design: &[f64]) -> f64 {
        let mut r = vec![0.0; design.len()];
        Self::responses(alpha, phi, covariates[0], design, &mut r);
        let sigma_y = phi[6].exp();
        y.iter()
            .zip(&r)
            .map(|(y, r)| normal_logpdf(y.ln(), r.ln(), sigma_y) - y.ln())
            .sum()
    }
}

// ------------------------------------------------------------ experiments

/// One simulated study: local data, the full external cohort and its
/// per-time-point averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub local: LocalDataset,
    pub external_full: LocalDataset,
    pub external: ExternalSummary,
    pub phi_true: Vec<f64>,
    pub delta_true: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinConfig {
    Linear(LinearModelConfig),
    Logistic(LogisticModelConfig),
    Turnover(TurnoverModelConfig),
}

impl BuiltinConfig {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(Self::Linear(LinearModelConfig::default())),
            "logistic" => Ok(Self::Logistic(LogisticModelConfig::default())),
            "turnover" => Ok(Self::Turnover(TurnoverModelConfig::default())),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected linear, logistic or turnover)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Linear(_) => "linear",
            Self::Logistic(_) => "logistic",
            Self::Turnover(_) => "turnover",
        }
    }

    pub fn model(&self) -> Box<dyn HierarchicalModel> {
        match self {
            Self::Linear(_) => Box::new(LinearModel::new()),
            Self::Logistic(c) => Box::new(LogisticModel::new(c.trials)),
            Self::Turnover(_) => Box::new(TurnoverModel::new()),
        }
    }

    pub fn true_phi(&self) -> Vec<f64> {
        match self {
            Self::Linear(c) => c.true_phi(),
            Self::Logistic(c) => c.true_phi(),
            Self::Turnover(c) => c.true_phi(),
        }
    }

    pub fn true_delta(&self) -> Vec<f64> {
        match self {
            Self::Linear(c) => c.delta.to_vec(),
            Self::Logistic(c) => c.delta.to_vec(),
            Self::Turnover(c) => vec![c.delta],
        }
    }

    /// Applies one `key = value` override. Recognized keys: `j`,
    /// `j_prime`, `trials` (logistic only).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got '{v}'")))
        };
        match (self, key) {
            (Self::Linear(c), "j") => c.j = parse(value)?,
            (Self::Linear(c), "j_prime") => c.j_prime = parse(value)?,
            (Self::Logistic(c), "j") => c.j = parse(value)?,
            (Self::Logistic(c), "j_prime") => c.j_prime = parse(value)?,
            (Self::Logistic(c), "trials") => c.trials = parse(value)? as u64,
            (Self::Turnover(c), "j") => c.j = parse(value)?,
            (Self::Turnover(c), "j_prime") => c.j_prime = parse(value)?,
            (Self::Turnover(c), "n_placebo") => c.n_placebo = parse(value)?,
            (me, _) => {
                return Err(Error::Config(format!(
                    "unknown setting '{key}' for model {}",
                    me.name()
                )))
            }
        }
        Ok(())
    }

    fn layout(&self) -> (usize, usize, Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        match self {
            Self::Linear(c) => (c.j, c.j_prime, c.design(), vec![vec![]; c.j], vec![]),
            Self::Logistic(c) => (c.j, c.j_prime, c.design(), vec![vec![]; c.j], vec![]),
            Self::Turnover(c) => {
                let cov = (0..c.j)
                    .map(|j| vec![if j < c.n_placebo { 0.0 } else { 1.0 }])
                    .collect();
                (c.j, c.j_prime, c.design(), cov, vec![1.0])
            }
        }
    }

    /// Simulates local data under the true `phi` and an external cohort
    /// under `phi + delta`.
    pub fn simulate_experiment(&self, seed: u64) -> Result<Experiment> {
        let model = self.model();
        let phi = self.true_phi();
        let delta = self.true_delta();
        let phi_prime = shift_parameters(&phi, &delta, model.parameter_spec())?;
        let (j, j_prime, design, local_cov, context) = self.layout();
        let mut rng = SimRng::seed_from_u64(seed);
        let local_y = simulate_cohort(model.as_ref(), &phi, &local_cov, &design, &mut rng);
        let ext_cov = vec![context.clone(); j_prime];
        let ext_y = simulate_cohort(model.as_ref(), &phi_prime, &ext_cov, &design, &mut rng);
        debug_assert_eq!(local_y.nrows(), j);
        let y_bar = (0..design.len()).map(|t| ext_y.column(t).mean()).collect();
        Ok(Experiment {
            local: LocalDataset::new(local_y, design.clone(), local_cov)?,
            external_full: LocalDataset::new(ext_y, design.clone(), ext_cov)?,
            external: ExternalSummary::new(y_bar, j_prime, design, context)?,
            phi_true: phi,
            delta_true: delta,
        })
    }
}

fn simulate_cohort(
    model: &dyn HierarchicalModel,
    phi: &[f64],
    covariates: &[Vec<f64>],
    design: &[f64],
    rng: &mut SimRng,
) -> DMatrix<f64> {
    let t = design.len();
    let mut y = DMatrix::zeros(covariates.len(), t);
    let mut row = vec![0.0; t];
    for (j, cov) in covariates.iter().enumerate() {
        let alpha = model.sample_individual(phi, cov, rng);
        model.simulate_observations(&alpha, phi, cov, design, rng, &mut row);
        for (k, v) in row.iter().enumerate() {
            y[(j, k)] = *v;
        }
    }
    y
}
