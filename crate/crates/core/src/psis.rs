//! Pareto-smoothed importance sampling.
//!
//! The largest importance ratios are replaced by expected order statistics
//! of a generalized Pareto distribution fitted to the upper tail with the
//! Zhang–Stephens profile-likelihood estimator. The fitted shape `k_hat`
//! doubles as a reliability diagnostic.

use crate::error::{Error, Result};

/// Below this many draws no tail fit is attempted.
pub const MIN_DRAWS_FOR_SMOOTHING: usize = 25;
/// Minimum number of tail points for a generalized Pareto fit.
pub const MIN_TAIL_LEN: usize = 5;
/// Minimum number of grid points in the Zhang–Stephens quadrature.
pub const MIN_GRID_POINTS: usize = 30;

/// Log importance ratios, optionally with their three factors per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRatios {
    pub log_ratios: Vec<f64>,
    pub components: Option<Vec<[f64; 3]>>,
}

impl ImportanceRatios {
    pub fn new(log_ratios: Vec<f64>) -> Self {
        Self {
            log_ratios,
            components: None,
        }
    }

    pub fn len(&self) -> usize {
        self.log_ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_ratios.is_empty()
    }
}

/// Convergence regime implied by the fitted Pareto shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// k < 1/2: finite variance.
    FastConvergence,
    /// 1/2 <= k < 1: infinite variance, finite mean.
    SlowConvergence,
    /// k >= 1, or no usable tail fit.
    Unreliable,
}

impl Regime {
    pub fn from_k(k: f64) -> Self {
        if k < 0.5 {
            Regime::FastConvergence
        } else if k < 1.0 {
            Regime::SlowConvergence
        } else {
            Regime::Unreliable
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedWeights {
    /// Normalized to sum to one.
    pub weights: Vec<f64>,
    /// `None` when no tail fit was possible: too few draws (regime
    /// unreliable) or a constant tail (regime fast, the ratios are bounded).
    pub k_hat: Option<f64>,
    pub regime: Regime,
}

/// Tail length for `s` draws: `ceil(min(0.2 s, 3 sqrt(s)))`.
pub fn tail_length(s: usize) -> usize {
    let s = s as f64;
    (0.2 * s).min(3.0 * s.sqrt()).ceil() as usize
}

/// Zhang–Stephens estimate of the generalized Pareto shape `k` and scale
/// `sigma` for a sample of exceedances. The sample is sorted internally.
///
/// A constant sample has no defined fit and returns
/// [`Error::DegenerateTail`].
pub fn fit_generalized_pareto(tail_sample: &[f64]) -> Result<(f64, f64)> {
    let n = tail_sample.len();
    if n < MIN_TAIL_LEN {
        return Err(Error::TailTooShort { len: n });
    }
    if let Some(i) = tail_sample.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Parse(format!(
            "tail value {} at index {i} must be finite and nonnegative",
            tail_sample[i]
        )));
    }
    let mut x = tail_sample.to_vec();
    x.sort_by(f64::total_cmp);
    let x_max = x[n - 1];
    if x_max - x[0] <= f64::EPSILON * x_max.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateTail);
    }

    let nf = n as f64;
    let m = MIN_GRID_POINTS + nf.sqrt().floor() as usize;
    const PRIOR: f64 = 3.0;
    let quartile_idx = ((nf / 4.0 + 0.5).floor() as usize).clamp(1, n) - 1;
    let mut x_star = x[quartile_idx];
    if x_star <= 0.0 {
        // Heavy ties at zero: fall back to the sample mean for the grid scale.
        x_star = x.iter().sum::<f64>() / nf;
    }

    let thetas: Vec<f64> = (1..=m)
        .map(|j| 1.0 / x_max + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / PRIOR / x_star)
        .collect();
    let profile: Vec<f64> = thetas
        .iter()
        .map(|&theta| {
            let a = -theta;
            let k = x.iter().map(|xi| (a * xi).ln_1p()).sum::<f64>() / nf;
            nf * ((a / k).ln() - k - 1.0)
        })
        .collect();
    let max_l = profile
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max_l.is_finite() {
        return Err(Error::DegenerateTail);
    }
    let weights: Vec<f64> = profile
        .iter()
        .map(|l| if l.is_finite() { (l - max_l).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let theta_hat = thetas
        .iter()
        .zip(&weights)
        .map(|(t, w)| t * w)
        .sum::<f64>()
        / total;

    let k = x.iter().map(|xi| (-theta_hat * xi).ln_1p()).sum::<f64>() / nf;
    let sigma = -k / theta_hat;
    // Weakly informative shrinkage towards 0.5, as in the reference procedure.
    let k = (k * nf + 0.5 * 10.0) / (nf + 10.0);
    Ok((k, sigma))
}

/// Quantile function of the generalized Pareto with location zero.
pub fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * ((-k * (-p).ln_1p()).exp_m1()) / k
    }
}

/// Pareto-smoothed, normalized importance weights.
pub fn pareto_smooth(ratios: &ImportanceRatios) -> Result<SmoothedWeights> {
    let s = ratios.len();
    if let Some(index) = ratios.log_ratios.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogRatio {
            index,
            factor: "total",
        });
    }
    if s == 0 {
        return Err(Error::AllZeroRatios);
    }
    let max = ratios
        .log_ratios
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = ratios.log_ratios.iter().map(|v| v - max).collect();

    if s < MIN_DRAWS_FOR_SMOOTHING {
        return Ok(SmoothedWeights {
            weights: normalize_log(&lw),
            k_hat: None,
            regime: Regime::Unreliable,
        });
    }

    let m = tail_length(s);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
    let tail_ids = &order[s - m..];
    let tail_lo = lw[tail_ids[0]];
    let tail_hi = lw[tail_ids[m - 1]];

    let (k_hat, regime) = if (tail_hi - tail_lo).abs() < f64::EPSILON / 100.0 {
        (None, Regime::FastConvergence)
    } else {
        let cutoff = lw[order[s - m - 1]];
        let exp_cutoff = cutoff.exp();
        let exceed: Vec<f64> = tail_ids
            .iter()
            .map(|&i| (lw[i].exp() - exp_cutoff).max(0.0))
            .collect();
        match fit_generalized_pareto(&exceed) {
            Ok((k, sigma)) if k.is_finite() && sigma.is_finite() && sigma > 0.0 => {
                for (rank, &i) in tail_ids.iter().enumerate() {
                    let p = (rank as f64 + 0.5) / m as f64;
                    lw[i] = (gpd_quantile(p, k, sigma) + exp_cutoff).ln();
                }
                (Some(k), Regime::from_k(k))
            }
            Ok(_) | Err(Error::DegenerateTail) => (None, Regime::Unreliable),
            Err(e) => return Err(e),
        }
    };
    // Cap at the largest raw ratio.
    for v in lw.iter_mut() {
        if *v > 0.0 {
            *v = 0.0;
        }
    }
    Ok(SmoothedWeights {
        weights: normalize_log(&lw),
        k_hat,
        regime,
    })
}

fn normalize_log(lw: &[f64]) -> Vec<f64> {
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// `S / sum((r_s / mean(r))^2)`: one for equal ratios, `1/S` when a single
/// ratio dominates.
pub fn efficiency(ratios: &[f64]) -> Result<f64> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Parse("ratios must be finite and nonnegative".into()));
    }
    let s = ratios.len() as f64;
    let max = ratios.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Err(Error::AllZeroRatios);
    }
    // Rescaling by the maximum leaves the value unchanged and avoids overflow.
    let mean = ratios.iter().map(|r| r / max).sum::<f64>() / s;
    let sum_sq: f64 = ratios.iter().map(|r| (r / max / mean).powi(2)).sum();
    Ok(s / sum_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gpd_draws(n: usize, k: f64, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                if k == 0.0 {
                    -sigma * u.ln()
                } else {
                    sigma * (u.powf(-k) - 1.0) / k
                }
            })
            .collect()
    }

    #[test]
    fn fits_gpd_shape() {
        let (k, sigma) = fit_generalized_pareto(&gpd_draws(2000, 0.3, 1.0, 11)).unwrap();
        assert!((0.2..=0.4).contains(&k), "k = {k}");
        assert!((sigma - 1.0).abs() < 0.15, "sigma = {sigma}");
    }

    #[test]
    fn fits_exponential_as_zero_shape() {
        let (k, _) = fit_generalized_pareto(&gpd_draws(2000, 0.0, 1.0, 12)).unwrap();
        assert!((-0.1..=0.1).contains(&k), "k = {k}");
    }

    #[test]
    fn constant_or_short_tail_is_an_error() {
        assert!(matches!(
            fit_generalized_pareto(&[2.0; 10]),
            Err(Error::DegenerateTail)
        ));
        assert!(matches!(
            fit_generalized_pareto(&[1.0, 2.0, 3.0]),
            Err(Error::TailTooShort { len: 3 })
        ));
    }

    #[test]
    fn tail_length_rule() {
        assert_eq!(tail_length(25), 5);
        assert_eq!(tail_length(100), 20);
        assert_eq!(tail_length(4000), 190);
    }

    #[test]
    fn gpd_quantile_inverts_cdf() {
        let (k, s) = (0.4, 1.7);
        let q = gpd_quantile(0.9, k, s);
        let cdf = 1.0 - (1.0 + k * q / s).powf(-1.0 / k);
        assert!((cdf - 0.9).abs() < 1e-12);
        assert!((gpd_quantile(0.5, 0.0, 2.0) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_ratios_give_uniform_weights() {
        let sw = pareto_smooth(&ImportanceRatios::new(vec![-3.0; 100])).unwrap();
        assert_eq!(sw.regime, Regime::FastConvergence);
        for w in &sw.weights {
            assert!((w - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn heavy_tail_is_slow_regime() {
        let logs: Vec<f64> = gpd_draws(4000, 0.7, 1.0, 5)
            .into_iter()
            .map(|x| (1.0 + x).ln())
            .collect();
        let sw = pareto_smooth(&ImportanceRatios::new(logs)).unwrap();
        assert_eq!(sw.regime, Regime::SlowConvergence, "k = {:?}", sw.k_hat);
    }

    #[test]
    fn dominant_ratio_is_shrunk() {
        let mut logs = vec![0.0; 100];
        logs[17] = 1e6f64.ln();
        let raw_max = 1e6 / (1e6 + 99.0);
        let sw = pareto_smooth(&ImportanceRatios::new(logs)).unwrap();
        let smoothed_max = sw.weights.iter().copied().fold(0.0, f64::max);
        assert!(smoothed_max < raw_max, "{smoothed_max} vs {raw_max}");
        assert!((sw.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn few_draws_fall_back_to_raw() {
        let logs = vec![0.0, 1.0, 2.0];
        let sw = pareto_smooth(&ImportanceRatios::new(logs)).unwrap();
        assert_eq!(sw.k_hat, None);
        assert_eq!(sw.regime, Regime::Unreliable);
        let e = std::f64::consts::E;
        let z = 1.0 + e + e * e;
        assert!((sw.weights[2] - e * e / z).abs() < 1e-15);
    }

    #[test]
    fn non_finite_log_ratio_names_draw() {
        let mut logs = vec![0.0; 30];
        logs[7] = f64::NAN;
        match pareto_smooth(&ImportanceRatios::new(logs)) {
            Err(Error::NonFiniteLogRatio { index: 7, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn smoothing_keeps_body_proportions() {
        let logs: Vec<f64> = gpd_draws(500, 0.5, 1.0, 9)
            .into_iter()
            .map(|x| (1.0 + x).ln())
            .collect();
        let sw = pareto_smooth(&ImportanceRatios::new(logs.clone())).unwrap();
        let m = tail_length(500);
        let mut order: Vec<usize> = (0..500).collect();
        order.sort_by(|&a, &b| logs[a].total_cmp(&logs[b]));
        let (a, b) = (order[0], order[500 - m - 1]);
        let raw = (logs[b] - logs[a]).exp();
        assert!((sw.weights[b] / sw.weights[a] - raw).abs() < 1e-9 * raw);
        // No smoothed weight exceeds what the raw maximum ratio would get
        // under the same normalization.
        let raw_max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cap = sw.weights[a] / (logs[a] - raw_max).exp();
        assert!(sw.weights.iter().all(|w| *w <= cap * (1.0 + 1e-12)));
    }

    #[test]
    fn efficiency_examples() {
        assert!((efficiency(&[1.0; 100]).unwrap() - 1.0).abs() < 1e-12);
        let mut r = vec![1e-300; 100];
        r[0] = 1.0;
        assert!((efficiency(&r).unwrap() - 0.01).abs() < 1e-12);
        assert!((efficiency(&[1.0, 1.0, 2.0]).unwrap() - 3.0 / 3.375).abs() < 1e-12);
        assert!(matches!(efficiency(&[0.0, 0.0]), Err(Error::AllZeroRatios)));
    }

    #[test]
    fn efficiency_is_scale_invariant() {
        let r = [0.3, 1.2, 5.0, 0.01];
        let a = efficiency(&r).unwrap();
        let scaled: Vec<f64> = r.iter().map(|x| x * 1e200).collect();
        assert!((a - efficiency(&scaled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn regime_thresholds() {
        assert_eq!(Regime::from_k(0.49), Regime::FastConvergence);
        assert_eq!(Regime::from_k(0.5), Regime::SlowConvergence);
        assert_eq!(Regime::from_k(0.99), Regime::SlowConvergence);
        assert_eq!(Regime::from_k(1.0), Regime::Unreliable);
    }
}
