//! The outer/inner EP loop: MCMC on the pseudo-posterior, per-draw
//! simulation of the external cohort, Pareto-smoothed reweighting, and the
//! pseudo-prior updates, with multi-run convergence checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::aggregate::simulated_log_r3;
use crate::ep_core::{
    apply_variance_floor, cavity_update_phi, importance_log_ratios, PseudoPriorPair, Relaxation,
};
use crate::error::{Error, Result};
use crate::gaussian::{weighted_moments, GaussianApprox};
use crate::mcmc::{gelman_rubin, rhat, sample_pseudo_posterior, SamplerConfig};
use crate::model_api::{shift_parameters, ExternalSummary, HierarchicalModel, LocalDataset, SimRng};
use crate::psis::{efficiency, pareto_smooth, Regime, SmoothedWeights};

/// Iteration schedule of the algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub outer_steps: usize,
    /// `g(delta)` updates per MCMC fit.
    pub inner_steps: usize,
    /// Post-warmup MCMC iterations per chain at the first outer step.
    pub initial_mcmc_iterations: usize,
    /// Factor applied to the MCMC iterations at each outer step.
    pub mcmc_growth: f64,
    pub n_chains: usize,
    pub j_tilde: usize,
    /// Inner steps, counted cumulatively within a run, that update
    /// `g(delta)` by resampling without replacement. Zero disables it.
    pub resample_warmup_steps: usize,
    pub n_floor_initial: f64,
    pub n_floor_growth: f64,
    pub n_runs: usize,
    pub relaxation: Relaxation,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            outer_steps: 10,
            inner_steps: 10,
            initial_mcmc_iterations: 100,
            mcmc_growth: std::f64::consts::SQRT_2,
            n_chains: 4,
            j_tilde: 1000,
            resample_warmup_steps: 25,
            n_floor_initial: 2.0,
            n_floor_growth: std::f64::consts::SQRT_2,
            n_runs: 3,
            relaxation: Relaxation::Damped,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("outer_steps", self.outer_steps),
            ("inner_steps", self.inner_steps),
            ("initial_mcmc_iterations", self.initial_mcmc_iterations),
            ("n_chains", self.n_chains),
            ("j_tilde", self.j_tilde),
            ("n_runs", self.n_runs),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.j_tilde < 2 {
            return Err(Error::Config("j_tilde must be at least 2".into()));
        }
        for (name, g) in [("mcmc_growth", self.mcmc_growth), ("n_floor_growth", self.n_floor_growth)] {
            if !(g.is_finite() && g >= 1.0) {
                return Err(Error::Config(format!("{name} must be at least 1, got {g}")));
            }
        }
        if !(self.n_floor_initial.is_finite() && self.n_floor_initial >= 1.0) {
            return Err(Error::Config(format!(
                "n_floor_initial must be at least 1, got {}",
                self.n_floor_initial
            )));
        }
        Ok(())
    }

    /// Post-warmup iterations per chain at outer step `t` (0-based).
    pub fn mcmc_iterations(&self, t: usize) -> usize {
        (self.initial_mcmc_iterations as f64 * self.mcmc_growth.powi(t as i32)).round() as usize
    }

    /// Largest pseudo-prior observation count allowed after outer step `t`.
    pub fn n_floor(&self, t: usize) -> f64 {
        self.n_floor_initial * self.n_floor_growth.powi(t as i32)
    }

    pub fn is_resample_step(&self, step: usize) -> bool {
        step < self.resample_warmup_steps
    }

    pub fn total_steps(&self) -> usize {
        self.outer_steps * self.inner_steps
    }
}

/// How `g(delta)` was updated at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    Resample,
    Weighted,
}

impl StepMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StepMode::Resample => "resample",
            StepMode::Weighted => "weighted",
        }
    }
}

impl std::str::FromStr for StepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resample" => Ok(Self::Resample),
            "weighted" => Ok(Self::Weighted),
            other => Err(Error::Parse(format!("unknown step mode '{other}'"))),
        }
    }
}

/// One inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub outer: usize,
    pub inner: usize,
    /// Weighted posterior means, `phi` components then `delta` components.
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub k_hat: Option<f64>,
    pub regime: Regime,
    pub efficiency: f64,
    /// Set on the last inner step of an outer step, after the `g(phi)` update.
    pub relaxation_n: Option<u32>,
    pub mode: StepMode,
}

/// One MCMC fit (one per outer step).
#[derive(Debug, Clone, PartialEq)]
pub struct McmcFit {
    pub outer: usize,
    pub n_iterations: usize,
    pub n_draws: usize,
    /// Split R-hat per `phi` component.
    pub rhat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub run_id: usize,
    pub seed: u64,
    /// `phi` names then `delta` names.
    pub names: Vec<String>,
    pub n_phi: usize,
    pub records: Vec<StepRecord>,
    pub fits: Vec<McmcFit>,
    pub final_pseudo: Option<PseudoPriorPair>,
    /// Last step's `(phi, delta)` draws and the weights used for its moments.
    pub final_draws: Option<DMatrix<f64>>,
    pub final_weights: Vec<f64>,
}

impl RunTrace {
    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// MCMC R-hat of parameter `k` at outer step `outer`; NaN for `delta`.
    pub fn mcmc_rhat(&self, outer: usize, k: usize) -> f64 {
        self.fits
            .iter()
            .find(|f| f.outer == outer)
            .and_then(|f| f.rhat.get(k).copied())
            .unwrap_or(f64::NAN)
    }
}

const TAG_INIT: u64 = 1;
const TAG_MCMC: u64 = 2;
const TAG_DELTA: u64 = 3;
const TAG_SIM: u64 = 4;
const TAG_RESAMPLE: u64 = 5;
const TAG_RUN: u64 = 6;
const TAG_EXPORT: u64 = 7;

/// Deterministic sub-seed for a (tag, index) pair.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Identity covariances, means at the prior mean plus N(0, 0.5^2) noise.
pub fn initialize_pseudo_priors(model: &dyn HierarchicalModel, rng: &mut SimRng) -> PseudoPriorPair {
    let spec = model.parameter_spec();
    let center = model.prior_mean();
    let mut draw = |c: f64| c + 0.5 * rng.sample::<f64, _>(StandardNormal);
    let phi_mean: Vec<f64> = center.iter().map(|&c| draw(c)).collect();
    let delta_mean: Vec<f64> = (0..spec.dim_delta()).map(|_| draw(0.0)).collect();
    let unit = |m: Vec<f64>| {
        let d = m.len();
        GaussianApprox::new(DVector::from_vec(m), DMatrix::identity(d, d))
            .expect("identity covariance is positive definite")
    };
    PseudoPriorPair {
        g_phi: unit(phi_mean),
        g_delta: unit(delta_mean),
    }
}

/// `m` distinct indices drawn sequentially with probability proportional to
/// `weights` (exponential-key method). `m` is reduced to the number of
/// positive weights.
pub fn resample_indices(weights: &[f64], m: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    let positive = weights.iter().filter(|w| **w > 0.0).count();
    let m = m.min(positive);
    if m < 2 {
        return Err(Error::DegenerateWeights { positive });
    }
    // Key ln(u) / w; the m largest keys form the sample.
    let mut keys: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, w)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / w, i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut idx: Vec<usize> = keys[..m].iter().map(|(_, i)| *i).collect();
    idx.sort_unstable();
    Ok(idx)
}

fn indicator(len: usize, idx: &[usize]) -> Vec<f64> {
    let mut w = vec![0.0; len];
    idx.iter().for_each(|&i| w[i] = 1.0);
    w
}

/// Unweighted moments of a weight-proportional subset of `m` draws.
pub fn resample_update_delta(
    delta_draws: &DMatrix<f64>,
    weights: &[f64],
    m: usize,
    rng: &mut SimRng,
) -> Result<GaussianApprox> {
    let idx = resample_indices(weights, m, rng)?;
    weighted_moments(delta_draws, &indicator(delta_draws.nrows(), &idx))
}

/// Importance resampling of the final draws of a run, without replacement,
/// seeded from the run seed.
pub fn importance_resample(trace: &RunTrace, n: usize) -> Result<DMatrix<f64>> {
    let draws = trace
        .final_draws
        .as_ref()
        .ok_or_else(|| Error::Config("trace holds no final draws".into()))?;
    let mut rng = SimRng::seed_from_u64(derive_seed(trace.seed, TAG_EXPORT, 0));
    let idx = resample_indices(&trace.final_weights, n, &mut rng)?;
    Ok(draws.select_rows(idx.iter()))
}

fn weighted_mean_sd(draws: &DMatrix<f64>, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let total: f64 = weights.iter().sum();
    (0..draws.ncols())
        .map(|k| {
            let col = draws.column(k);
            let mean = col.iter().zip(weights).map(|(x, w)| w * x).sum::<f64>() / total;
            let var = col
                .iter()
                .zip(weights)
                .map(|(x, w)| w * (x - mean).powi(2))
                .sum::<f64>()
                / total;
            (mean, var.sqrt())
        })
        .unzip()
}

/// Runs the full algorithm once from `init`.
pub fn run_algorithm(
    model: &dyn HierarchicalModel,
    data: &LocalDataset,
    external: &ExternalSummary,
    schedule: &Schedule,
    init: &PseudoPriorPair,
    seed: u64,
) -> Result<RunTrace> {
    schedule.validate()?;
    let spec = model.parameter_spec();
    for (what, expected, found) in [
        ("initial g(phi)", spec.dim_phi(), init.g_phi.dim()),
        ("initial g(delta)", spec.dim_delta(), init.g_delta.dim()),
        ("prior variance", spec.dim_phi(), model.prior_variance().len()),
    ] {
        if expected != found {
            return Err(Error::DimensionMismatch { what, expected, found });
        }
    }
    let mut trace = RunTrace {
        run_id: 0,
        seed,
        names: spec.all_names(),
        n_phi: spec.dim_phi(),
        records: Vec::with_capacity(schedule.total_steps()),
        fits: Vec::with_capacity(schedule.outer_steps),
        final_pseudo: None,
        final_draws: None,
        final_weights: Vec::new(),
    };
    match run_steps(model, data, external, schedule, init, seed, &mut trace) {
        Ok(()) => Ok(trace),
        Err(e) => Err(Error::RunAborted {
            step: trace.records.len(),
            source: Box::new(e),
            trace: Box::new(trace),
        }),
    }
}

fn run_steps(
    model: &dyn HierarchicalModel,
    data: &LocalDataset,
    external: &ExternalSummary,
    schedule: &Schedule,
    init: &PseudoPriorPair,
    seed: u64,
    trace: &mut RunTrace,
) -> Result<()> {
    let spec = model.parameter_spec();
    let (n_phi, n_delta) = (spec.dim_phi(), spec.dim_delta());
    let prior_var = model.prior_variance();
    let mut pseudo = init.clone();

    for t in 0..schedule.outer_steps {
        let sampler = SamplerConfig {
            n_chains: schedule.n_chains,
            n_iterations: schedule.mcmc_iterations(t),
            seed: derive_seed(seed, TAG_MCMC, t as u64),
            ..SamplerConfig::default()
        };
        let fit = sample_pseudo_posterior(model, &pseudo.g_phi, data, &sampler)?;
        let phi = &fit.draws;
        let s = phi.nrows();
        trace.fits.push(McmcFit {
            outer: t,
            n_iterations: sampler.n_iterations,
            n_draws: s,
            rhat: rhat(&fit).unwrap_or_else(|_| vec![f64::NAN; n_phi]),
        });

        let mut weights = vec![1.0; s];
        let mut joint = DMatrix::zeros(s, n_phi + n_delta);
        joint.columns_mut(0, n_phi).copy_from(phi);
        for inner in 0..schedule.inner_steps {
            let step = t * schedule.inner_steps + inner;

            let mut rng = SimRng::seed_from_u64(derive_seed(seed, TAG_DELTA, step as u64));
            let mut delta = DMatrix::zeros(s, n_delta);
            for i in 0..s {
                let d = pseudo.g_delta.sample(&mut rng);
                delta.row_mut(i).copy_from(&d.transpose());
            }

            let sim_seed = derive_seed(seed, TAG_SIM, step as u64);
            let log_r3 = (0..s)
                .into_par_iter()
                .map(|i| {
                    let phi_i: Vec<f64> = phi.row(i).iter().copied().collect();
                    let delta_i: Vec<f64> = delta.row(i).iter().copied().collect();
                    let phi_prime = shift_parameters(&phi_i, &delta_i, spec)?;
                    let mut r = SimRng::seed_from_u64(sim_seed);
                    r.set_stream(i as u64);
                    simulated_log_r3(model, &phi_prime, schedule.j_tilde, external, i, &mut r)
                })
                .collect::<Result<Vec<f64>>>()?;

            let ratios = importance_log_ratios(phi, &delta, &pseudo, model, &log_r3)?;
            let smoothed = pareto_smooth(&ratios)?;
            let eff = efficiency(&smoothed.weights)?;
            check_collapse(step, &smoothed)?;

            let mode = if schedule.is_resample_step(step) {
                let mut rr = SimRng::seed_from_u64(derive_seed(seed, TAG_RESAMPLE, step as u64));
                let idx = resample_indices(&smoothed.weights, s / 2, &mut rr)?;
                weights = indicator(s, &idx);
                StepMode::Resample
            } else {
                weights.clone_from(&smoothed.weights);
                StepMode::Weighted
            };
            pseudo.g_delta = weighted_moments(&delta, &weights)?;

            joint.columns_mut(n_phi, n_delta).copy_from(&delta);
            let (mean, sd) = weighted_mean_sd(&joint, &weights);
            trace.records.push(StepRecord {
                step,
                outer: t,
                inner,
                mean,
                sd,
                k_hat: smoothed.k_hat,
                regime: smoothed.regime,
                efficiency: eff,
                relaxation_n: None,
                mode,
            });
        }

        let p1 = weighted_moments(phi, &vec![1.0; s])?;
        let p2 = weighted_moments(phi, &weights)?;
        let update = cavity_update_phi(&pseudo.g_phi, &p1, &p2, schedule.relaxation)?;
        pseudo.g_phi = apply_variance_floor(&update.g_phi, &prior_var, schedule.n_floor(t))?;
        if let Some(last) = trace.records.last_mut() {
            last.relaxation_n = Some(update.relaxation_n);
        }
        if t + 1 == schedule.outer_steps {
            trace.final_draws = Some(joint);
            trace.final_weights = weights;
        }
    }
    trace.final_pseudo = Some(pseudo);
    Ok(())
}

/// Fewer than two positive smoothed weights leave no usable moments.
fn check_collapse(step: usize, smoothed: &SmoothedWeights) -> Result<()> {
    if smoothed.weights.iter().filter(|w| **w > 0.0).count() < 2 {
        return Err(Error::WeightCollapse {
            step,
            k_hat: smoothed.k_hat,
        });
    }
    Ok(())
}

/// Seed of run `r` (0-based) under master seed `seed`.
pub fn run_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, TAG_RUN, r as u64)
}

/// Runs `schedule.n_runs` independent runs in parallel, each from its own
/// pseudo-prior initialization. Run ids start at 1.
pub fn run_many(
    model: &dyn HierarchicalModel,
    data: &LocalDataset,
    external: &ExternalSummary,
    schedule: &Schedule,
    seed: u64,
) -> Vec<Result<RunTrace>> {
    (0..schedule.n_runs)
        .into_par_iter()
        .map(|r| {
            let rs = run_seed(seed, r);
            let mut rng = SimRng::seed_from_u64(derive_seed(rs, TAG_INIT, 0));
            let init = initialize_pseudo_priors(model, &mut rng);
            let mut trace = run_algorithm(model, data, external, schedule, &init, rs)?;
            trace.run_id = r + 1;
            Ok(trace)
        })
        .collect()
}

/// Share of each trace's steps, taken from the end, compared across runs.
pub const CONVERGENCE_WINDOW: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub names: Vec<String>,
    /// Cross-run R-hat per parameter.
    pub rhat: Vec<f64>,
    pub final_k_hat: Vec<Option<f64>>,
    pub rhat_ok: bool,
    /// Every run ends with a usable tail fit and `k_hat < 1`.
    pub k_hat_ok: bool,
    pub converged: bool,
}

impl ConvergenceReport {
    pub fn rhat_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.rhat[i])
    }
}

/// Cross-run R-hat of the weighted means over the last 30% of steps, and
/// the verdict `all R-hat < 1.1 and final k_hat < 1` in every run.
pub fn check_convergence(traces: &[RunTrace]) -> Result<ConvergenceReport> {
    if traces.len() < 2 {
        return Err(Error::Config("convergence check needs at least two runs".into()));
    }
    let first = &traces[0];
    let n = first.records.len();
    for tr in &traces[1..] {
        let same_steps = tr.records.len() == n
            && tr.records.iter().zip(&first.records).all(|(a, b)| a.step == b.step);
        if tr.names != first.names || !same_steps {
            return Err(Error::Config(format!(
                "run {} does not share the schedule of run {}",
                tr.run_id, first.run_id
            )));
        }
    }
    if n < 2 {
        return Err(Error::Config("convergence check needs at least two steps".into()));
    }
    let window = ((CONVERGENCE_WINDOW * n as f64).ceil() as usize).clamp(2, n);
    let rhat: Vec<f64> = (0..first.names.len())
        .map(|k| {
            let chains: Vec<Vec<f64>> = traces
                .iter()
                .map(|tr| tr.records[n - window..].iter().map(|r| r.mean[k]).collect())
                .collect();
            gelman_rubin(&chains)
        })
        .collect();
    let final_k_hat: Vec<Option<f64>> = traces.iter().map(|tr| tr.records[n - 1].k_hat).collect();
    let rhat_ok = rhat.iter().all(|r| *r < 1.1);
    let k_hat_ok = traces
        .iter()
        .all(|tr| tr.records[n - 1].regime != Regime::Unreliable);
    Ok(ConvergenceReport {
        names: first.names.clone(),
        rhat,
        final_k_hat,
        rhat_ok,
        k_hat_ok,
        converged: rhat_ok && k_hat_ok,
    })
}
