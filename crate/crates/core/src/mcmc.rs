//! Adaptive Metropolis-within-Gibbs for hierarchical targets, and the
//! split-chain potential scale reduction factor.
//!
//! One iteration of a chain performs, in order:
//!
//! 1. `individual_sweeps` sweeps over the individual blocks `alpha_j`, each a
//!    random-walk proposal conditional on the global parameters;
//! 2. a scalar random-walk move of each global component with every
//!    `alpha_j` held fixed;
//! 3. a joint move of `theta` in which each `alpha_j` is shifted along its
//!    linear regression on `theta`, estimated during warmup;
//! 4. a joint non-centered move of `theta` in which each `alpha_j` keeps its
//!    standardized residual.
//!
//! The scalar moves make progress from poor starting points, the regression
//! move follows directions where global and individual parameters trade off,
//! and the non-centered move handles weakly identified individuals.
//! Proposal shapes and scales adapt during warmup only; after warmup every
//! kernel is a fixed Metropolis kernel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{cholesky_lower, GaussianApprox};
use crate::model_api::{independent_normal_logpdf, HierarchicalModel, LocalDataset, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Post-warmup iterations per chain.
    pub n_iterations: usize,
    /// Fraction of the total chain length spent in warmup.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Target acceptance for blocks of dimension > 1.
    pub target_accept_block: f64,
    /// Target acceptance for scalar blocks.
    pub target_accept_scalar: f64,
    /// Sweeps over the individual blocks per iteration.
    pub individual_sweeps: usize,
    /// Initial random-walk scale for the global block.
    pub initial_global_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_iterations: 1000,
            warmup_fraction: 0.5,
            seed: 0,
            target_accept_block: 0.23,
            target_accept_scalar: 0.44,
            individual_sweeps: 2,
            initial_global_scale: 0.05,
        }
    }
}

impl SamplerConfig {
    pub fn warmup_iterations(&self) -> usize {
        let f = self.warmup_fraction;
        (self.n_iterations as f64 * f / (1.0 - f)).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be positive".into()));
        }
        if self.n_iterations < 50 {
            return Err(Error::Config(format!(
                "n_iterations must be at least 50, got {}",
                self.n_iterations
            )));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Post-warmup draws of the global parameters, chain-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDraws {
    pub draws: DMatrix<f64>,
    pub chain_ids: Vec<usize>,
    pub names: Vec<String>,
    /// Post-warmup acceptance rate of the joint regression move, per chain.
    pub global_acceptance: Vec<f64>,
}

impl ParameterDraws {
    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn dim(&self) -> usize {
        self.draws.ncols()
    }

    pub fn n_chains(&self) -> usize {
        self.chain_ids.iter().max().map_or(0, |m| m + 1)
    }

    /// Draws of one parameter from one chain, in iteration order.
    pub fn chain(&self, chain: usize, param: usize) -> Vec<f64> {
        self.chain_ids
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == chain)
            .map(|(i, _)| self.draws[(i, param)])
            .collect()
    }

    pub fn column(&self, param: usize) -> Vec<f64> {
        self.draws.column(param).iter().copied().collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| self.draws.column(k).mean())
            .collect()
    }

    /// Sample standard deviation per parameter.
    pub fn sd(&self) -> Vec<f64> {
        let n = self.n_draws() as f64;
        (0..self.dim())
            .map(|k| {
                let c = self.draws.column(k);
                let m = c.mean();
                (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            })
            .collect()
    }
}

/// A target of the form
/// `exp(log_global(theta)) prod_j N(alpha_j | loc_j(theta), scale_j(theta)) exp(log_lik(theta, j, alpha_j))`.
pub trait HierarchicalTarget: Sync {
    fn global_names(&self) -> Vec<String>;
    fn individual_dim(&self) -> usize;
    fn n_individuals(&self) -> usize;
    fn log_global(&self, theta: &[f64]) -> f64;
    fn individual_prior(&self, theta: &[f64], j: usize, loc: &mut [f64], scale: &mut [f64]);
    fn log_lik(&self, theta: &[f64], j: usize, alpha: &[f64]) -> f64;
    fn init_global(&self, rng: &mut SimRng) -> Vec<f64>;
}

/// `g(phi) prod_j p(alpha_j | phi) p(y_j | alpha_j, phi)` for a model, a
/// pseudo-prior and a local dataset.
pub struct PseudoPosterior<'a> {
    model: &'a dyn HierarchicalModel,
    pseudo_prior: &'a GaussianApprox,
    data: &'a LocalDataset,
    rows: Vec<Vec<f64>>,
}

impl<'a> PseudoPosterior<'a> {
    pub fn new(
        model: &'a dyn HierarchicalModel,
        pseudo_prior: &'a GaussianApprox,
        data: &'a LocalDataset,
    ) -> Result<Self> {
        let d = model.parameter_spec().dim_phi();
        if pseudo_prior.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "pseudo-prior",
                expected: d,
                found: pseudo_prior.dim(),
            });
        }
        let rows = (0..data.n_individuals()).map(|j| data.row(j)).collect();
        Ok(Self {
            model,
            pseudo_prior,
            data,
            rows,
        })
    }
}

impl HierarchicalTarget for PseudoPosterior<'_> {
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
        self.pseudo_prior.log_density(theta).unwrap_or(f64::NEG_INFINITY)
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
        self.pseudo_prior.sample(rng).iter().copied().collect()
    }
}

/// Draws `phi` from `g(phi) prod_j p(alpha_j|phi) p(y_j|alpha_j,phi)`; the
/// individual parameters are sampled and discarded.
pub fn sample_pseudo_posterior(
    model: &dyn HierarchicalModel,
    pseudo_prior: &GaussianApprox,
    data: &LocalDataset,
    cfg: &SamplerConfig,
) -> Result<ParameterDraws> {
    let target = PseudoPosterior::new(model, pseudo_prior, data)?;
    sample_target(&target, cfg)
}

/// Joint log density of `target` at `theta` and the flattened individual
/// parameters `alpha` (J x individual_dim, row-major).
pub fn log_joint<T: HierarchicalTarget>(target: &T, theta: &[f64], alpha: &[f64]) -> f64 {
    let da = target.individual_dim();
    let mut loc = vec![0.0; da];
    let mut scale = vec![0.0; da];
    let mut total = target.log_global(theta);
    for j in 0..target.n_individuals() {
        let a = &alpha[j * da..(j + 1) * da];
        target.individual_prior(theta, j, &mut loc, &mut scale);
        total += independent_normal_logpdf(a, &loc, &scale) + target.log_lik(theta, j, a);
    }
    total
}

const MAX_INIT_ATTEMPTS: usize = 100;
const MAX_CHAIN_RETRIES: usize = 3;
const SHEAR_MOVES: usize = 2;

/// Runs `cfg.n_chains` independent chains (in parallel) on `target`.
pub fn sample_target<T: HierarchicalTarget>(target: &T, cfg: &SamplerConfig) -> Result<ParameterDraws> {
    cfg.validate()?;
    let names = target.global_names();
    let d = names.len();
    let results: Vec<Result<ChainOutput>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut last_err = None;
            for attempt in 0..=MAX_CHAIN_RETRIES {
                let mut rng = SimRng::seed_from_u64(cfg.seed);
                rng.set_stream((c as u64) << 8 | attempt as u64);
                match run_chain(target, cfg, d, &mut rng) {
                    Ok(out) => return Ok(out),
                    Err(e @ Error::AdaptationDiverged { .. }) => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last_err.unwrap_or(Error::AdaptationDiverged {
                retries: MAX_CHAIN_RETRIES,
            }))
        })
        .collect();

    let n = cfg.n_iterations;
    let mut draws = DMatrix::zeros(cfg.n_chains * n, d);
    let mut chain_ids = Vec::with_capacity(cfg.n_chains * n);
    let mut global_acceptance = Vec::with_capacity(cfg.n_chains);
    for (c, res) in results.into_iter().enumerate() {
        let out = res?;
        for (i, row) in out.draws.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                draws[(c * n + i, k)] = *v;
            }
            chain_ids.push(c);
        }
        global_acceptance.push(out.acceptance);
    }
    Ok(ParameterDraws {
        draws,
        chain_ids,
        names,
        global_acceptance,
    })
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    acceptance: f64,
}

/// Random-walk proposal with warmup adaptation of its shape (windowed
/// empirical covariance) and its scale (Robbins–Monro on the log scale).
#[derive(Debug, Clone)]
struct AdaptiveBlock {
    dim: usize,
    log_scale: f64,
    shape: DMatrix<f64>,
    target: f64,
    window_mean: Vec<f64>,
    window_m2: DMatrix<f64>,
    window_n: usize,
    steps: usize,
}

impl AdaptiveBlock {
    fn new(dim: usize, initial_sd: &[f64], target: f64) -> Self {
        let shape = DMatrix::from_diagonal(&DVector::from_column_slice(initial_sd));
        Self {
            dim,
            log_scale: 0.0,
            shape,
            target,
            window_mean: vec![0.0; dim],
            window_m2: DMatrix::zeros(dim, dim),
            window_n: 0,
            steps: 0,
        }
    }

    fn propose(&self, x: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        let scale = self.log_scale.exp();
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..self.dim {
            let mut acc = 0.0;
            for (k, zk) in z.iter().enumerate().take(i + 1) {
                acc += self.shape[(i, k)] * zk;
            }
            out[i] = x[i] + scale * acc;
        }
    }

    fn adapt_scale(&mut self, accept_prob: f64) {
        self.steps += 1;
        let gamma = (self.steps as f64 + 1.0).powf(-0.6);
        self.log_scale += gamma * (accept_prob - self.target);
        self.log_scale = self.log_scale.clamp(-60.0, 20.0);
    }

    fn observe(&mut self, x: &[f64]) {
        self.window_n += 1;
        let n = self.window_n as f64;
        let mut delta = vec![0.0; self.dim];
        for i in 0..self.dim {
            delta[i] = x[i] - self.window_mean[i];
            self.window_mean[i] += delta[i] / n;
        }
        for a in 0..self.dim {
            let da = x[a] - self.window_mean[a];
            for b in 0..self.dim {
                self.window_m2[(a, b)] += delta[b] * da;
            }
        }
    }

    /// Replaces the proposal shape by the regularized window covariance.
    fn end_window(&mut self) {
        let n = self.window_n;
        if n > self.dim + 2 {
            let nf = n as f64;
            let cov = &self.window_m2 / (nf - 1.0);
            let shrink = nf / (nf + 5.0);
            let reg = DMatrix::from_fn(self.dim, self.dim, |i, j| {
                let base = cov[(i, j)] * shrink;
                if i == j {
                    base + 1e-3 * (5.0 / (nf + 5.0)) * cov[(i, i)].max(1e-12) + 1e-12
                } else {
                    base
                }
            });
            let reg = (&reg + reg.transpose()) * 0.5;
            if let Some(l) = cholesky_lower(&reg) {
                self.shape = l * (2.38 / (self.dim as f64).sqrt());
                self.log_scale = 0.0;
            }
        }
        self.window_n = 0;
        self.window_mean.iter_mut().for_each(|v| *v = 0.0);
        self.window_m2.fill(0.0);
    }
}

/// Warmup iterations at which a shape window closes: 25, 50, 100, ... up to
/// 80% of warmup, leaving the tail of warmup for scale-only adaptation.
fn window_ends(warmup: usize) -> Vec<usize> {
    let limit = (0.8 * warmup as f64) as usize;
    let mut ends = Vec::new();
    let mut w = 25;
    let mut end = 25;
    while end <= limit {
        ends.push(end);
        w *= 2;
        end += w;
    }
    ends
}

fn metropolis_accept(rng: &mut SimRng, log_ratio: f64) -> (bool, f64) {
    if log_ratio.is_nan() {
        return (false, 0.0);
    }
    let p = log_ratio.min(0.0).exp();
    (rng.random::<f64>() < p, p)
}

/// Running sums for the least-squares regression of every `alpha_j` on
/// `theta` over one warmup window. Values are offset by the first observation
/// to limit cancellation.
struct ShearEstimator {
    n: usize,
    ref_t: DVector<f64>,
    ref_a: DVector<f64>,
    sum_t: DVector<f64>,
    sum_tt: DMatrix<f64>,
    sum_a: DVector<f64>,
    sum_at: DMatrix<f64>,
}

impl ShearEstimator {
    fn new(d: usize, n_alpha: usize) -> Self {
        Self {
            n: 0,
            ref_t: DVector::zeros(d),
            ref_a: DVector::zeros(n_alpha),
            sum_t: DVector::zeros(d),
            sum_tt: DMatrix::zeros(d, d),
            sum_a: DVector::zeros(n_alpha),
            sum_at: DMatrix::zeros(n_alpha, d),
        }
    }

    fn observe(&mut self, theta: &[f64], alpha: &[f64]) {
        if self.n == 0 {
            self.ref_t.copy_from_slice(theta);
            self.ref_a.copy_from_slice(alpha);
        }
        self.n += 1;
        let t = DVector::from_column_slice(theta) - &self.ref_t;
        let a = DVector::from_column_slice(alpha) - &self.ref_a;
        self.sum_t += &t;
        self.sum_tt.ger(1.0, &t, &t, 1.0);
        self.sum_a += &a;
        self.sum_at.ger(1.0, &a, &t, 1.0);
    }

    /// Regression coefficients `Cov(alpha, theta) Cov(theta)^-1`, or `None`
    /// when the window is too short or degenerate. Resets the sums.
    fn fit(&mut self) -> Option<DMatrix<f64>> {
        let d = self.sum_t.len();
        let n = self.n as f64;
        let out = if self.n > d + 2 {
            let mt = &self.sum_t / n;
            let ma = &self.sum_a / n;
            let mut ctt = (&self.sum_tt - &mt * mt.transpose() * n) / (n - 1.0);
            for i in 0..d {
                ctt[(i, i)] += 1e-3 * ctt[(i, i)].max(0.0) + 1e-12;
            }
            let cat = (&self.sum_at - &ma * mt.transpose() * n) / (n - 1.0);
            ctt.cholesky()
                .map(|ch| ch.solve(&cat.transpose()).transpose())
                .filter(|b| b.iter().all(|v| v.is_finite()))
        } else {
            None
        };
        let (d, na) = (self.sum_t.len(), self.sum_a.len());
        *self = Self::new(d, na);
        out
    }
}

/// How the individual parameters follow a proposed `theta`.
enum GlobalMove<'b> {
    /// `alpha_j' = alpha_j + B_j (theta' - theta)`; unit Jacobian. A zero `B`
    /// gives the centered move.
    Shear(&'b DMatrix<f64>),
    /// Standardized residuals `(alpha_j - loc_j) / scale_j` held fixed.
    NonCentered,
}

struct ChainState {
    theta: Vec<f64>,
    alpha: Vec<f64>,
    ll: Vec<f64>,
    log_global: f64,
}

struct Workspace {
    loc: Vec<f64>,
    scale: Vec<f64>,
    loc_new: Vec<f64>,
    scale_new: Vec<f64>,
    prop_alpha: Vec<f64>,
    prop_ll: Vec<f64>,
}

/// One Metropolis step of the global block towards `prop_theta`. Returns the
/// acceptance decision and probability.
fn global_step<T: HierarchicalTarget>(
    target: &T,
    state: &mut ChainState,
    prop_theta: &[f64],
    mv: GlobalMove<'_>,
    ws: &mut Workspace,
    rng: &mut SimRng,
) -> (bool, f64) {
    let lg = target.log_global(prop_theta);
    if !lg.is_finite() {
        return (false, 0.0);
    }
    let da = target.individual_dim();
    let mut log_ratio = lg - state.log_global;
    for j in 0..target.n_individuals() {
        let a = &state.alpha[j * da..(j + 1) * da];
        let pa = &mut ws.prop_alpha[j * da..(j + 1) * da];
        target.individual_prior(&state.theta, j, &mut ws.loc, &mut ws.scale);
        target.individual_prior(prop_theta, j, &mut ws.loc_new, &mut ws.scale_new);
        match mv {
            GlobalMove::Shear(b) => {
                for k in 0..da {
                    let row = j * da + k;
                    let mut shift = 0.0;
                    for (i, (pt, t)) in prop_theta.iter().zip(&state.theta).enumerate() {
                        shift += b[(row, i)] * (pt - t);
                    }
                    pa[k] = a[k] + shift;
                }
                log_ratio += independent_normal_logpdf(pa, &ws.loc_new, &ws.scale_new)
                    - independent_normal_logpdf(a, &ws.loc, &ws.scale);
            }
            GlobalMove::NonCentered => {
                for k in 0..da {
                    pa[k] = ws.loc_new[k] + ws.scale_new[k] * (a[k] - ws.loc[k]) / ws.scale[k];
                }
            }
        }
        ws.prop_ll[j] = target.log_lik(prop_theta, j, pa);
        log_ratio += ws.prop_ll[j] - state.ll[j];
    }
    let (acc, p) = metropolis_accept(rng, log_ratio);
    if acc {
        state.theta.copy_from_slice(prop_theta);
        state.log_global = lg;
        state.ll.copy_from_slice(&ws.prop_ll);
        state.alpha.copy_from_slice(&ws.prop_alpha);
    }
    (acc, p)
}

fn run_chain<T: HierarchicalTarget>(
    target: &T,
    cfg: &SamplerConfig,
    d: usize,
    rng: &mut SimRng,
) -> Result<ChainOutput> {
    let n_ind = target.n_individuals();
    let da = target.individual_dim();
    let mut ws = Workspace {
        loc: vec![0.0; da],
        scale: vec![0.0; da],
        loc_new: vec![0.0; da],
        scale_new: vec![0.0; da],
        prop_alpha: vec![0.0; n_ind * da],
        prop_ll: vec![0.0; n_ind],
    };

    // Initialization: theta from the global term, alpha_j from its prior.
    let mut state = ChainState {
        theta: Vec::new(),
        alpha: vec![0.0; n_ind * da],
        ll: vec![0.0; n_ind],
        log_global: f64::NEG_INFINITY,
    };
    let mut failing_block = String::from("global");
    let mut ok = false;
    for _ in 0..MAX_INIT_ATTEMPTS {
        state.theta = target.init_global(rng);
        state.log_global = target.log_global(&state.theta);
        if !state.log_global.is_finite() {
            failing_block = "global".into();
            continue;
        }
        ok = true;
        for j in 0..n_ind {
            target.individual_prior(&state.theta, j, &mut ws.loc, &mut ws.scale);
            let a = &mut state.alpha[j * da..(j + 1) * da];
            for k in 0..da {
                a[k] = ws.loc[k] + ws.scale[k] * rng.sample::<f64, _>(StandardNormal);
            }
            state.ll[j] = target.log_lik(&state.theta, j, a);
            if !(state.ll[j].is_finite()
                && independent_normal_logpdf(a, &ws.loc, &ws.scale).is_finite())
            {
                failing_block = format!("individual {j}");
                ok = false;
                break;
            }
        }
        if ok {
            break;
        }
    }
    if !ok {
        return Err(Error::NonFiniteTarget {
            block: failing_block,
        });
    }

    let warmup = cfg.warmup_iterations();
    let windows = window_ends(warmup);
    let target_for = |dim: usize| {
        if dim == 1 {
            cfg.target_accept_scalar
        } else {
            cfg.target_accept_block
        }
    };
    let global_sd = vec![cfg.initial_global_scale; d];
    let mut scalars: Vec<AdaptiveBlock> = (0..d)
        .map(|_| AdaptiveBlock::new(1, &[cfg.initial_global_scale], cfg.target_accept_scalar))
        .collect();
    let mut sheared = AdaptiveBlock::new(d, &global_sd, target_for(d));
    let mut noncentered = AdaptiveBlock::new(d, &global_sd, target_for(d));
    let mut shear = DMatrix::zeros(n_ind * da, d);
    let zero_shear = DMatrix::zeros(n_ind * da, d);
    let mut shear_est = ShearEstimator::new(d, n_ind * da);
    let mut blocks: Vec<AdaptiveBlock> = (0..n_ind)
        .map(|j| {
            target.individual_prior(&state.theta, j, &mut ws.loc, &mut ws.scale);
            let sd: Vec<f64> = ws.scale.iter().map(|s| 0.5 * s.max(1e-6)).collect();
            AdaptiveBlock::new(da, &sd, target_for(da))
        })
        .collect();

    let mut prop_theta = vec![0.0; d];
    let mut draws = Vec::with_capacity(cfg.n_iterations);
    let mut late_warmup_accepts = 0usize;
    let mut accepted_after = 0usize;
    let late_start = (0.8 * warmup as f64) as usize;

    for iter in 0..warmup + cfg.n_iterations {
        let adapting = iter < warmup;
        let mut global_accepts = 0usize;

        // Individual blocks.
        if da > 0 {
            for _ in 0..cfg.individual_sweeps {
                for j in 0..n_ind {
                    target.individual_prior(&state.theta, j, &mut ws.loc, &mut ws.scale);
                    let cur = &state.alpha[j * da..(j + 1) * da];
                    let prop = &mut ws.prop_alpha[..da];
                    blocks[j].propose(cur, rng, prop);
                    let new_ll = target.log_lik(&state.theta, j, prop);
                    let log_ratio = independent_normal_logpdf(prop, &ws.loc, &ws.scale) + new_ll
                        - independent_normal_logpdf(cur, &ws.loc, &ws.scale)
                        - state.ll[j];
                    let (acc, p) = metropolis_accept(rng, log_ratio);
                    if acc {
                        state.alpha[j * da..(j + 1) * da].copy_from_slice(prop);
                        state.ll[j] = new_ll;
                    }
                    if adapting {
                        blocks[j].adapt_scale(p);
                        blocks[j].observe(&state.alpha[j * da..(j + 1) * da]);
                    }
                }
            }
        }

        // Componentwise centered moves.
        for (k, block) in scalars.iter_mut().enumerate() {
            prop_theta.copy_from_slice(&state.theta);
            let mut step = [0.0];
            block.propose(&state.theta[k..=k], rng, &mut step);
            prop_theta[k] = step[0];
            let (acc, p) = global_step(
                target,
                &mut state,
                &prop_theta,
                GlobalMove::Shear(&zero_shear),
                &mut ws,
                rng,
            );
            global_accepts += acc as usize;
            if adapting {
                block.adapt_scale(p);
            }
        }

        // Joint moves carrying alpha along its warmup regression on theta.
        for _ in 0..SHEAR_MOVES {
            sheared.propose(&state.theta, rng, &mut prop_theta);
            let (acc, p) = global_step(
                target,
                &mut state,
                &prop_theta,
                GlobalMove::Shear(&shear),
                &mut ws,
                rng,
            );
            global_accepts += acc as usize;
            if adapting {
                sheared.adapt_scale(p);
            } else {
                accepted_after += acc as usize;
            }
        }

        // Joint non-centered move.
        noncentered.propose(&state.theta, rng, &mut prop_theta);
        let (acc, p_n) = global_step(
            target,
            &mut state,
            &prop_theta,
            GlobalMove::NonCentered,
            &mut ws,
            rng,
        );
        global_accepts += acc as usize;

        if adapting {
            noncentered.adapt_scale(p_n);
            for (k, block) in scalars.iter_mut().enumerate() {
                block.observe(&state.theta[k..=k]);
            }
            sheared.observe(&state.theta);
            noncentered.observe(&state.theta);
            shear_est.observe(&state.theta, &state.alpha);
            if iter >= late_start {
                late_warmup_accepts += global_accepts;
            }
            if windows.contains(&(iter + 1)) {
                scalars.iter_mut().for_each(AdaptiveBlock::end_window);
                sheared.end_window();
                noncentered.end_window();
                blocks.iter_mut().for_each(AdaptiveBlock::end_window);
                if let Some(b) = shear_est.fit() {
                    shear = b;
                }
            }
            if iter + 1 == warmup && warmup >= 20 && late_warmup_accepts == 0 && d > 0 {
                return Err(Error::AdaptationDiverged {
                    retries: MAX_CHAIN_RETRIES,
                });
            }
        } else {
            draws.push(state.theta.clone());
        }
    }
    if draws.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::AdaptationDiverged {
            retries: MAX_CHAIN_RETRIES,
        });
    }
    Ok(ChainOutput {
        draws,
        acceptance: accepted_after as f64 / (SHEAR_MOVES * cfg.n_iterations) as f64,
    })
}

/// Split-chain potential scale reduction factor for one parameter. Chains
/// are trimmed to the shortest length and each is cut in half. Values below
/// one from finite-sample noise are clamped to one.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    let mut pieces: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        pieces.push(&c[..half]);
        pieces.push(&c[n - half..n]);
    }
    potential_scale_reduction(&pieces)
}

/// Potential scale reduction over whole (unsplit) chains, trimmed to the
/// shortest length. Used where each chain is one run of a trending process.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let pieces: Vec<&[f64]> = chains.iter().map(|c| &c[c.len() - n..]).collect();
    potential_scale_reduction(&pieces)
}

fn potential_scale_reduction(chains: &[&[f64]]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let vars: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    let w = vars.iter().sum::<f64>() / m;
    let grand = means.iter().sum::<f64>() / m;
    let b = n * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt().max(1.0)
}

/// Split-chain R-hat for every parameter of `draws`.
pub fn rhat(draws: &ParameterDraws) -> Result<Vec<f64>> {
    let m = draws.n_chains();
    if m < 2 {
        return Err(Error::Config("R-hat needs at least two chains".into()));
    }
    let per_chain = draws.n_draws() / m;
    if per_chain < 10 {
        return Err(Error::Config(format!(
            "R-hat needs at least 10 draws per chain, got {per_chain}"
        )));
    }
    Ok((0..draws.dim())
        .map(|k| {
            let chains: Vec<Vec<f64>> = (0..m).map(|c| draws.chain(c, k)).collect();
            split_rhat(&chains)
        })
        .collect())
}
