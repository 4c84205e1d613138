use super::fit::{aggregate, fit_levels, log_likelihood, FitOptions, LevelCount};
use super::{PfFamily, PsychometricError, PsychometricFit, TrialRecord};
use crate::rng::replication_rng;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Refit failures tolerated by the bootstrap before giving up.
const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub sd_alpha: f64,
    pub sd_slope: f64,
    pub sd_threshold: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub deviance: f64,
    pub p_value: f64,
    /// Simulations that produced an identifiable refit.
    pub n_sim: usize,
}

fn simulate_counts<R: Rng>(fit: &PsychometricFit, levels: &[LevelCount], rng: &mut R) -> Vec<LevelCount> {
    levels
        .iter()
        .map(|l| {
            let p = fit.eval(l.stimulus).clamp(0.0, 1.0);
            let k = Binomial::new(u64::from(l.n), p)
                .map(|b| b.sample(rng) as u32)
                .unwrap_or(0);
            LevelCount {
                stimulus: l.stimulus,
                n: l.n,
                correct: k,
            }
        })
        .collect()
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Parametric bootstrap standard errors of the location and threshold slope.
///
/// Replication `r` draws from a generator seeded by `(seed, r)`, so the result does not depend on
/// how rayon schedules the refits.
pub fn bootstrap_se(
    fit: &PsychometricFit,
    trials: &[TrialRecord],
    n: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<BootstrapResult, PsychometricError> {
    bootstrap_se_levels(fit, &aggregate(trials), n, seed, options)
}

pub fn bootstrap_se_levels(
    fit: &PsychometricFit,
    levels: &[LevelCount],
    n: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<BootstrapResult, PsychometricError> {
    if n < 2 {
        return Err(PsychometricError::InvalidTrial(format!("bootstrap needs n >= 2, got {n}")));
    }
    let refit_opts = options.refit(fit);
    let draws: Vec<Option<(f64, f64, f64)>> = (0..n as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(seed, r);
            let sim = simulate_counts(fit, levels, &mut rng);
            let refit = fit_levels(&sim, fit.family, &refit_opts).ok()?;
            let threshold = refit.threshold75().ok()?;
            Some((refit.alpha, refit.slope_at_threshold(), threshold))
        })
        .collect();

    let ok: Vec<(f64, f64, f64)> = draws.iter().flatten().copied().collect();
    let failed = n - ok.len();
    if failed as f64 > MAX_FAILURE_FRACTION * n as f64 {
        return Err(PsychometricError::TooManyFailures { failed, total: n });
    }
    let alphas: Vec<f64> = ok.iter().map(|d| d.0).collect();
    let slopes: Vec<f64> = ok.iter().map(|d| d.1).collect();
    let thresholds: Vec<f64> = ok.iter().map(|d| d.2).collect();
    Ok(BootstrapResult {
        sd_alpha: sample_sd(&alphas),
        sd_slope: sample_sd(&slopes),
        sd_threshold: sample_sd(&thresholds),
        n_ok: ok.len(),
        n_failed: failed,
    })
}

/// `2 * (saturated log-likelihood - model log-likelihood)` over stimulus levels.
pub fn deviance(fit: &PsychometricFit, levels: &[LevelCount]) -> f64 {
    let saturated: f64 = levels
        .iter()
        .map(|l| {
            let (k, n) = (f64::from(l.correct), f64::from(l.n));
            let miss = n - k;
            let hit_term = if k > 0.0 { k * (k / n).ln() } else { 0.0 };
            let miss_term = if miss > 0.0 { miss * (miss / n).ln() } else { 0.0 };
            hit_term + miss_term
        })
        .sum();
    (2.0 * (saturated - log_likelihood(fit, levels))).max(0.0)
}

/// Monte-Carlo deviance goodness-of-fit test.
pub fn deviance_gof(
    fit: &PsychometricFit,
    trials: &[TrialRecord],
    n_sim: usize,
    seed: u64,
    options: &FitOptions,
) -> GofResult {
    deviance_gof_levels(fit, &aggregate(trials), n_sim, seed, options)
}

pub fn deviance_gof_levels(
    fit: &PsychometricFit,
    levels: &[LevelCount],
    n_sim: usize,
    seed: u64,
    options: &FitOptions,
) -> GofResult {
    let observed = deviance(fit, levels);
    let refit_opts = options.refit(fit);
    let simulated: Vec<f64> = (0..n_sim as u64)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = replication_rng(seed, r);
            let sim = simulate_counts(fit, levels, &mut rng);
            let refit = fit_levels(&sim, fit.family, &refit_opts).ok()?;
            Some(deviance(&refit, &sim))
        })
        .collect();
    let tol = 1e-9 * (1.0 + observed);
    let exceed = simulated.iter().filter(|&&d| d >= observed - tol).count();
    let p_value = if simulated.is_empty() {
        f64::NAN
    } else {
        exceed as f64 / simulated.len() as f64
    };
    GofResult {
        deviance: observed,
        p_value,
        n_sim: simulated.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedFamily {
    pub fit: PsychometricFit,
    pub gof: GofResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyComparison {
    /// Best first: p-value descending, ties broken by log-likelihood.
    pub ranking: Vec<RankedFamily>,
    pub failures: Vec<(PfFamily, PsychometricError)>,
}

/// Fits every family and ranks them by deviance p-value.
pub fn compare_families(
    trials: &[TrialRecord],
    families: &[PfFamily],
    n_sim: usize,
    seed: u64,
    options: &FitOptions,
) -> FamilyComparison {
    let levels = aggregate(trials);
    let mut ranking = Vec::new();
    let mut failures = Vec::new();
    for &family in families {
        match fit_levels(&levels, family, options) {
            Ok(fit) => {
                let gof = deviance_gof_levels(&fit, &levels, n_sim, seed, options);
                ranking.push(RankedFamily { fit, gof });
            }
            Err(e) => failures.push((family, e)),
        }
    }
    ranking.sort_by(|a, b| {
        b.gof
            .p_value
            .total_cmp(&a.gof.p_value)
            .then(b.fit.log_likelihood.total_cmp(&a.fit.log_likelihood))
    });
    FamilyComparison { ranking, failures }
}
