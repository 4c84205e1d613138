use super::{PfFamily, PsychometricError, PsychometricFit, TrialRecord, GUESS_RATE_2IFC, MAX_LAPSE};
use crate::optim::{self, Bounds, Settings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Binomial counts at one stimulus level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelCount {
    pub stimulus: f64,
    pub n: u32,
    pub correct: u32,
}

impl LevelCount {
    pub fn proportion(&self) -> f64 {
        f64::from(self.correct) / f64::from(self.n)
    }
}

/// Pools trials by stimulus level, sorted by stimulus.
pub fn aggregate(trials: &[TrialRecord]) -> Vec<LevelCount> {
    let mut levels: Vec<LevelCount> = Vec::new();
    let mut sorted: Vec<&TrialRecord> = trials.iter().collect();
    sorted.sort_by(|a, b| a.stimulus.total_cmp(&b.stimulus));
    for t in sorted {
        match levels.last_mut() {
            Some(l) if l.stimulus == t.stimulus => {
                l.n += 1;
                l.correct += u32::from(t.correct);
            }
            _ => levels.push(LevelCount {
                stimulus: t.stimulus,
                n: 1,
                correct: u32::from(t.correct),
            }),
        }
    }
    levels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LapsePolicy {
    /// Lapse rate held at the given value (0 by default).
    Fixed(f64),
    /// Lapse rate fitted inside `[0, MAX_LAPSE]`.
    Free,
}

impl Default for LapsePolicy {
    fn default() -> Self {
        LapsePolicy::Fixed(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub lapse: LapsePolicy,
    /// Number of starting points spread over the stimulus range.
    pub starts: usize,
    pub seed: u64,
    /// Extra starting point `(alpha, beta, lambda)`, e.g. a previous fit.
    pub initial: Option<(f64, f64, f64)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lapse: LapsePolicy::default(),
            starts: 10,
            seed: 0,
            initial: None,
        }
    }
}

impl FitOptions {
    /// Cheaper settings for Monte-Carlo refits, warm-started from `fit`.
    pub(crate) fn refit(&self, fit: &PsychometricFit) -> Self {
        Self {
            lapse: self.lapse,
            starts: 3,
            seed: self.seed,
            initial: Some((fit.alpha, fit.beta, fit.lambda)),
        }
    }
}

/// Maximum-likelihood fit of `family` to 2IFC trials (guess rate fixed at 0.5).
pub fn fit_pf(
    trials: &[TrialRecord],
    family: PfFamily,
    options: &FitOptions,
) -> Result<PsychometricFit, PsychometricError> {
    fit_levels(&aggregate(trials), family, options)
}

struct Problem<'a> {
    family: PfFamily,
    axis: Vec<f64>,
    levels: &'a [LevelCount],
    gamma: f64,
    fixed_lambda: Option<f64>,
}

impl Problem<'_> {
    /// Parameter vector: `[location on axis, ln beta, (lambda)]`.
    fn unpack(&self, theta: &[f64]) -> (f64, f64, f64) {
        let lambda = self.fixed_lambda.unwrap_or_else(|| theta[2]);
        (theta[0], theta[1].exp(), lambda)
    }

    fn negative_log_likelihood(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (a, beta, lambda) = self.unpack(theta);
        let span = 1.0 - self.gamma - lambda;
        let mut nll = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for (l, &t) in self.levels.iter().zip(&self.axis) {
            let k = f64::from(l.correct);
            let miss = f64::from(l.n - l.correct);
            let z = beta * (t - a);
            let g = self.family.base(z);
            let dg = self.family.base_density(z);
            let psi = (self.gamma + span * g).clamp(1e-300, 1.0 - 1e-16);
            nll -= k * psi.ln() + miss * (1.0 - psi).ln();
            let w = -(k / psi - miss / (1.0 - psi));
            grad[0] += w * span * (-beta * dg);
            grad[1] += w * span * (t - a) * dg * beta;
            if self.fixed_lambda.is_none() {
                grad[2] += w * (-g);
            }
        }
        (nll, grad)
    }
}

/// Maximum-likelihood fit on pooled counts.
pub fn fit_levels(
    levels: &[LevelCount],
    family: PfFamily,
    options: &FitOptions,
) -> Result<PsychometricFit, PsychometricError> {
    let levels: Vec<LevelCount> = levels.iter().copied().filter(|l| l.n > 0).collect();
    let mut distinct: Vec<f64> = levels.iter().map(|l| l.stimulus).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(PsychometricError::InsufficientLevels(distinct.len()));
    }
    let total: u32 = levels.iter().map(|l| l.n).sum();
    let correct: u32 = levels.iter().map(|l| l.correct).sum();
    if correct == 0 || correct == total {
        return Err(PsychometricError::NonIdentifiable);
    }
    if family.log_axis() && distinct[0] <= 0.0 {
        return Err(PsychometricError::InvalidTrial(format!(
            "{family} needs positive stimuli, got {}",
            distinct[0]
        )));
    }

    let axis: Vec<f64> = levels.iter().map(|l| family.axis(l.stimulus)).collect();
    let (t_min, t_max) = (family.axis(distinct[0]), family.axis(distinct[distinct.len() - 1]));
    let range = (t_max - t_min).max(1e-6);

    let fixed_lambda = match options.lapse {
        LapsePolicy::Fixed(v) => Some(v.clamp(0.0, MAX_LAPSE)),
        LapsePolicy::Free => None,
    };
    let problem = Problem {
        family,
        axis,
        levels: &levels,
        gamma: GUESS_RATE_2IFC,
        fixed_lambda,
    };

    let mut lower = vec![t_min - 2.0 * range, (1e-3 / range).ln()];
    let mut upper = vec![t_max + 2.0 * range, (1e3 / range).ln()];
    if fixed_lambda.is_none() {
        lower.push(0.0);
        upper.push(MAX_LAPSE);
    }
    let bounds = Bounds { lower, upper };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let lambda0 = fixed_lambda.map_or(0.01, |_| 0.0);
    let starts = options.starts.max(1);
    let mut candidates: Vec<Vec<f64>> = (0..starts)
        .map(|j| {
            let frac = if starts == 1 { 0.5 } else { j as f64 / (starts - 1) as f64 };
            let jitter: f64 = rng.random_range(-0.5..0.5);
            let mut theta = vec![t_min + frac * range, (4.0 / range).ln() + jitter];
            if fixed_lambda.is_none() {
                theta.push(lambda0);
            }
            theta
        })
        .collect();
    if let Some((alpha, beta, lambda)) = options.initial {
        let a = family.location(alpha);
        if a.is_finite() && beta > 0.0 {
            let mut theta = vec![a, beta.ln()];
            if fixed_lambda.is_none() {
                theta.push(lambda.clamp(0.0, MAX_LAPSE));
            }
            candidates.insert(0, theta);
        }
    }

    let settings = Settings::default();
    let best = candidates
        .iter()
        .map(|x0| optim::minimize(|th| problem.negative_log_likelihood(th), x0, &bounds, settings))
        .filter(|m| m.value.is_finite())
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .ok_or(PsychometricError::NonIdentifiable)?;

    let (a, beta, lambda) = problem.unpack(&best.x);
    let at_bound = {
        let loc_slope = Bounds {
            lower: bounds.lower[..2].to_vec(),
            upper: bounds.upper[..2].to_vec(),
        };
        loc_slope.touches(&best.x[..2])
    };
    Ok(PsychometricFit {
        family,
        alpha: family.axis_inverse(a),
        beta,
        gamma: GUESS_RATE_2IFC,
        lambda,
        log_likelihood: -best.value,
        n_trials: total,
        converged: best.converged,
        at_bound,
    })
}

/// Log-likelihood of `fit` on pooled counts (binomial coefficients omitted).
pub(crate) fn log_likelihood(fit: &PsychometricFit, levels: &[LevelCount]) -> f64 {
    levels
        .iter()
        .map(|l| {
            let psi = fit.eval(l.stimulus).clamp(1e-300, 1.0 - 1e-16);
            f64::from(l.correct) * psi.ln() + f64::from(l.n - l.correct) * (1.0 - psi).ln()
        })
        .sum()
}
