//! Psychometric functions for two-interval forced-choice (2IFC) discrimination data.
//!
//! A fitted function has the usual four-parameter form
//! `psi(x) = gamma + (1 - gamma - lambda) * F(x; alpha, beta)` where `F` is one of the
//! [`PfFamily`] sigmoids, `gamma` is the guess rate (0.5 for 2IFC) and `lambda` the lapse rate.
//!
//! Fitting is by maximum likelihood over the binomial counts at each stimulus level. Standard
//! errors come from a parametric bootstrap and goodness of fit from a Monte-Carlo deviance test.

mod fit;
mod io;
mod montecarlo;

pub use fit::{aggregate, fit_levels, fit_pf, FitOptions, LapsePolicy, LevelCount};
pub use io::{read_trials, read_trials_from, write_trials, write_trials_to, FitReport};
pub use montecarlo::{
    bootstrap_se, bootstrap_se_levels, compare_families, deviance, deviance_gof, deviance_gof_levels,
    BootstrapResult, FamilyComparison, GofResult, RankedFamily,
};

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::{FRAC_2_PI, FRAC_PI_2, SQRT_2};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Guess rate of a two-alternative forced-choice task.
pub const GUESS_RATE_2IFC: f64 = 0.5;
/// Upper limit on a freely fitted lapse rate.
pub const MAX_LAPSE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsychometricError {
    #[error("responses are all correct or all incorrect; the function is not identifiable")]
    NonIdentifiable,
    #[error("need at least 2 distinct stimulus levels, got {0}")]
    InsufficientLevels(usize),
    #[error("probability {p} is not strictly inside ({lower}, {upper})")]
    OutOfRange { p: f64, lower: f64, upper: f64 },
    #[error("{failed} of {total} simulated refits were not identifiable")]
    TooManyFailures { failed: usize, total: usize },
    #[error("invalid trial: {0}")]
    InvalidTrial(String),
    #[error("unknown psychometric family `{0}`")]
    UnknownFamily(String),
    #[error("trial file: {0}")]
    Io(String),
}

/// Sigmoid families with a location (`alpha`) and slope (`beta`) parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfFamily {
    Logistic,
    Weibull,
    Gumbel,
    CumulativeNormal,
    HyperbolicSecant,
}

impl PfFamily {
    pub const ALL: [PfFamily; 5] = [
        PfFamily::Logistic,
        PfFamily::Weibull,
        PfFamily::Gumbel,
        PfFamily::CumulativeNormal,
        PfFamily::HyperbolicSecant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PfFamily::Logistic => "logistic",
            PfFamily::Weibull => "weibull",
            PfFamily::Gumbel => "gumbel",
            PfFamily::CumulativeNormal => "cumulative_normal",
            PfFamily::HyperbolicSecant => "hyperbolic_secant",
        }
    }

    /// The Weibull is a Gumbel in log-stimulus; everything else works on the raw axis.
    pub(crate) fn log_axis(self) -> bool {
        matches!(self, PfFamily::Weibull)
    }

    /// Stimulus axis transform `t(x)`.
    pub(crate) fn axis(self, x: f64) -> f64 {
        if self.log_axis() {
            if x > 0.0 {
                x.ln()
            } else {
                f64::NEG_INFINITY
            }
        } else {
            x
        }
    }

    pub(crate) fn axis_inverse(self, t: f64) -> f64 {
        if self.log_axis() {
            t.exp()
        } else {
            t
        }
    }

    /// Location on the transformed axis.
    pub(crate) fn location(self, alpha: f64) -> f64 {
        self.axis(alpha)
    }

    /// Standardised sigmoid `G(z)`.
    pub(crate) fn base(self, z: f64) -> f64 {
        match self {
            PfFamily::Logistic => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            PfFamily::Weibull | PfFamily::Gumbel => -(-z.exp()).exp_m1(),
            PfFamily::CumulativeNormal => 0.5 * erfc(-z / SQRT_2),
            PfFamily::HyperbolicSecant => FRAC_2_PI * (FRAC_PI_2 * z).exp().atan(),
        }
    }

    /// Derivative `G'(z)`.
    pub(crate) fn base_density(self, z: f64) -> f64 {
        match self {
            PfFamily::Logistic => {
                let g = self.base(z);
                g * (1.0 - g)
            }
            PfFamily::Weibull | PfFamily::Gumbel => {
                if z > 700.0 {
                    0.0
                } else {
                    let e = z.exp();
                    (z - e).exp()
                }
            }
            PfFamily::CumulativeNormal => (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            PfFamily::HyperbolicSecant => 0.5 / (FRAC_PI_2 * z).cosh(),
        }
    }

    /// Inverse of `G` on (0, 1).
    pub(crate) fn base_inverse(self, f: f64) -> f64 {
        match self {
            PfFamily::Logistic => (f / (1.0 - f)).ln(),
            PfFamily::Weibull | PfFamily::Gumbel => (-(-f).ln_1p()).ln(),
            PfFamily::CumulativeNormal => -SQRT_2 * erfc_inv(2.0 * f),
            PfFamily::HyperbolicSecant => FRAC_2_PI * (FRAC_PI_2 * f).tan().ln(),
        }
    }

    /// `F(x; alpha, beta)`.
    pub fn cdf(self, x: f64, alpha: f64, beta: f64) -> f64 {
        let t = self.axis(x);
        if t == f64::NEG_INFINITY {
            return 0.0;
        }
        self.base(beta * (t - self.location(alpha)))
    }

    /// `dF/dx`.
    pub fn density(self, x: f64, alpha: f64, beta: f64) -> f64 {
        let t = self.axis(x);
        if t == f64::NEG_INFINITY {
            return 0.0;
        }
        let dt_dx = if self.log_axis() { 1.0 / x } else { 1.0 };
        beta * self.base_density(beta * (t - self.location(alpha))) * dt_dx
    }

    /// `x` such that `F(x; alpha, beta) = f`.
    pub fn quantile(self, f: f64, alpha: f64, beta: f64) -> f64 {
        self.axis_inverse(self.location(alpha) + self.base_inverse(f) / beta)
    }
}

impl fmt::Display for PfFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PfFamily {
    type Err = PsychometricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "logistic" | "l" => Ok(PfFamily::Logistic),
            "weibull" | "w" => Ok(PfFamily::Weibull),
            "gumbel" | "g" => Ok(PfFamily::Gumbel),
            "cumulative_normal" | "normal" | "cn" => Ok(PfFamily::CumulativeNormal),
            "hyperbolic_secant" | "hs" => Ok(PfFamily::HyperbolicSecant),
            _ => Err(PsychometricError::UnknownFamily(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PresentationOrder {
    PedestalFirst,
    VaryingFirst,
}

impl PresentationOrder {
    pub fn code(self) -> char {
        match self {
            PresentationOrder::PedestalFirst => 'P',
            PresentationOrder::VaryingFirst => 'V',
        }
    }
}

/// One 2IFC comparison between a pedestal and a varying stimulus (both in ppm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub stimulus: f64,
    pub pedestal: f64,
    pub correct: bool,
    pub order: PresentationOrder,
}

impl TrialRecord {
    pub fn new(
        stimulus: f64,
        pedestal: f64,
        correct: bool,
        order: PresentationOrder,
    ) -> Result<Self, PsychometricError> {
        if !stimulus.is_finite() || !pedestal.is_finite() {
            return Err(PsychometricError::InvalidTrial("non-finite concentration".into()));
        }
        if stimulus < pedestal {
            return Err(PsychometricError::InvalidTrial(format!(
                "stimulus {stimulus} ppm is below pedestal {pedestal} ppm"
            )));
        }
        Ok(Self {
            stimulus,
            pedestal,
            correct,
            order,
        })
    }

    /// Checks that both stimuli can be delivered by a display operating in `[c_min, c_max]`.
    pub fn check_range(&self, c_min: f64, c_max: f64) -> Result<(), PsychometricError> {
        let eps = 1e-9;
        for v in [self.stimulus, self.pedestal] {
            if v < c_min - eps || v > c_max + eps {
                return Err(PsychometricError::InvalidTrial(format!(
                    "{v} ppm is outside the device range [{c_min}, {c_max}]"
                )));
            }
        }
        Ok(())
    }
}

/// A fitted psychometric function plus fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsychometricFit {
    pub family: PfFamily,
    /// Location parameter in ppm.
    pub alpha: f64,
    /// Slope parameter (1/ppm on the family's axis).
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub log_likelihood: f64,
    pub n_trials: u32,
    #[serde(default)]
    pub converged: bool,
    /// Optimum sits on the search box for location or slope.
    #[serde(default)]
    pub at_bound: bool,
}

impl PsychometricFit {
    /// A function with explicit parameters and no data behind it.
    pub fn with_params(family: PfFamily, alpha: f64, beta: f64, gamma: f64, lambda: f64) -> Self {
        Self {
            family,
            alpha,
            beta,
            gamma,
            lambda,
            log_likelihood: f64::NAN,
            n_trials: 0,
            converged: true,
            at_bound: false,
        }
    }

    /// `psi(x)`; always inside `[gamma, 1 - lambda]`.
    pub fn eval(&self, x: f64) -> f64 {
        self.gamma + (1.0 - self.gamma - self.lambda) * self.family.cdf(x, self.alpha, self.beta)
    }

    /// `d psi / dx`.
    pub fn derivative(&self, x: f64) -> f64 {
        (1.0 - self.gamma - self.lambda) * self.family.density(x, self.alpha, self.beta)
    }

    /// Stimulus at which `psi` equals `p`.
    pub fn threshold_at(&self, p: f64) -> Result<f64, PsychometricError> {
        let (lower, upper) = (self.gamma, 1.0 - self.lambda);
        if !(p > lower && p < upper) {
            return Err(PsychometricError::OutOfRange { p, lower, upper });
        }
        let f = (p - self.gamma) / (1.0 - self.gamma - self.lambda);
        let mut x = self.family.quantile(f, self.alpha, self.beta);
        // the normal quantile goes through erfc_inv; a couple of Newton steps pin it down
        for _ in 0..3 {
            let r = self.eval(x) - p;
            if r.abs() < 1e-15 {
                break;
            }
            let d = self.derivative(x);
            if d <= 0.0 || !d.is_finite() {
                break;
            }
            let next = x - r / d;
            if (self.eval(next) - p).abs() < r.abs() {
                x = next;
            } else {
                break;
            }
        }
        Ok(x)
    }

    /// The 75%-correct point.
    pub fn threshold75(&self) -> Result<f64, PsychometricError> {
        self.threshold_at(0.75)
    }

    /// Slope of `psi` at the 75% threshold, in performance per ppm.
    pub fn slope_at_threshold(&self) -> f64 {
        match self.threshold75() {
            Ok(x) => self.derivative(x),
            Err(_) => f64::NAN,
        }
    }
}

/// Free-function form of [`PsychometricFit::eval`].
pub fn eval_pf(fit: &PsychometricFit, x: f64) -> f64 {
    fit.eval(x)
}

/// Free-function form of [`PsychometricFit::threshold_at`].
pub fn threshold_at(fit: &PsychometricFit, p: f64) -> Result<f64, PsychometricError> {
    fit.threshold_at(p)
}

/// Free-function form of [`PsychometricFit::slope_at_threshold`].
pub fn slope_at_threshold(fit: &PsychometricFit) -> f64 {
    fit.slope_at_threshold()
}
