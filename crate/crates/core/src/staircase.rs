//! Adaptive 2IFC protocol for locating successive JNDs over a display's concentration range.
//!
//! The first phases compare the lowest deliverable concentration against three fixed
//! sub-intervals in turn. Once a threshold is found, Weber's law predicts where the next
//! one should sit and a new, coarser stimulus set is laid out from the found threshold as
//! the new pedestal. The protocol ends when the prediction leaves the device range.

use crate::psychometric::{
    fit_pf, FitOptions, PfFamily, PresentationOrder, PsychometricFit, TrialRecord,
};
use crate::rng::{replication_rng, sub_seed};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StaircaseError {
    #[error("step {step} puts stimulus {value} above the device maximum {c_max}")]
    StepTooLarge { step: f64, value: f64, c_max: f64 },
    #[error("Weber inputs must be positive (pedestal {pedestal}, jnd {jnd})")]
    NonPositiveInput { pedestal: f64, jnd: f64 },
    #[error("the plan has no stimuli to schedule")]
    EmptyPlan,
    #[error("{answered} of {scheduled} scheduled trials answered")]
    IncompletePhase { answered: usize, scheduled: usize },
    #[error("invalid device range [{0}, {1}]")]
    InvalidRange(f64, f64),
}

/// Concentration range the display delivers accurately, in ppm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceRange {
    pub c_min: f64,
    pub c_max: f64,
}

impl Default for DeviceRange {
    fn default() -> Self {
        Self { c_min: 1.2, c_max: 11.2 }
    }
}

impl DeviceRange {
    pub fn new(c_min: f64, c_max: f64) -> Result<Self, StaircaseError> {
        if !(c_min.is_finite() && c_max.is_finite() && c_min < c_max) {
            return Err(StaircaseError::InvalidRange(c_min, c_max));
        }
        Ok(Self { c_min, c_max })
    }

    pub fn contains(&self, c: f64) -> bool {
        c >= self.c_min - EPS && c <= self.c_max + EPS
    }
}

/// Inter-trial interval and stimulus exposure duration, carried for hardware drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialTiming {
    pub iti_s: f64,
    pub sed_s: f64,
}

impl Default for TrialTiming {
    fn default() -> Self {
        Self { iti_s: 4.0, sed_s: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    /// One of the three fixed sub-intervals (1-based).
    Subinterval(u8),
    /// Weber-adapted stimulus set.
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircasePlan {
    pub pedestal: f64,
    pub stimuli: Vec<f64>,
    pub step: f64,
    pub trials_per_pair: u32,
    pub phase_index: u32,
    pub kind: PhaseKind,
    /// No deliverable stimulus set remains.
    pub terminal: bool,
    pub range: DeviceRange,
    pub timing: TrialTiming,
}

impl StaircasePlan {
    fn terminal(pedestal: f64, range: DeviceRange, phase_index: u32) -> Self {
        Self {
            pedestal,
            stimuli: Vec::new(),
            step: 0.0,
            trials_per_pair: 0,
            phase_index,
            kind: PhaseKind::Adapted,
            terminal: true,
            range,
            timing: TrialTiming::default(),
        }
    }

    pub fn max_stimulus(&self) -> Option<f64> {
        self.stimuli.last().copied()
    }
}

fn snap(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

/// The three fixed sub-intervals of eight stimuli each, starting at `c_min`, `c_min + 9s` and
/// `c_min + 17s` (4.8 and 8.0 ppm for the default range with `s = 0.4`).
pub fn initial_subintervals(range: DeviceRange, s: f64) -> Result<[Vec<f64>; 3], StaircaseError> {
    if s <= 0.0 || !s.is_finite() {
        return Err(StaircaseError::StepTooLarge {
            step: s,
            value: f64::NAN,
            c_max: range.c_max,
        });
    }
    let anchors = [range.c_min, snap(range.c_min + 9.0 * s), snap(range.c_min + 17.0 * s)];
    let mut out: [Vec<f64>; 3] = Default::default();
    for (slot, anchor) in out.iter_mut().zip(anchors) {
        *slot = (1..=8).map(|i| snap(anchor + f64::from(i) * s)).collect();
        if let Some(&last) = slot.last() {
            if last > range.c_max + EPS {
                return Err(StaircaseError::StepTooLarge {
                    step: s,
                    value: last,
                    c_max: range.c_max,
                });
            }
        }
    }
    Ok(out)
}

/// Plan for fixed sub-interval `which` (1..=3) against the `c_min` pedestal.
pub fn subinterval_plan(
    range: DeviceRange,
    s: f64,
    which: u8,
    trials_per_pair: u32,
    phase_index: u32,
) -> Result<StaircasePlan, StaircaseError> {
    let sets = initial_subintervals(range, s)?;
    let idx = usize::from(which.clamp(1, 3) - 1);
    Ok(StaircasePlan {
        pedestal: range.c_min,
        stimuli: sets[idx].clone(),
        step: s,
        trials_per_pair,
        phase_index,
        kind: PhaseKind::Subinterval(which.clamp(1, 3)),
        terminal: false,
        range,
        timing: TrialTiming::default(),
    })
}

/// Weber fraction `jnd / pedestal`.
pub fn weber_constant(pedestal: f64, jnd: f64) -> Result<f64, StaircaseError> {
    if !(pedestal > 0.0 && jnd > 0.0) {
        return Err(StaircaseError::NonPositiveInput { pedestal, jnd });
    }
    Ok(jnd / pedestal)
}

/// Stimulus predicted to be just noticeably stronger than `pedestal`.
pub fn weber_predict(pedestal: f64, k: f64) -> f64 {
    pedestal + k * pedestal
}

/// Stimulus set for the next phase, laid out so the Weber prediction is covered by at most
/// `max_stimuli` stimuli on a `grid`-aligned step. Stimuli above `c_max` collapse onto `c_max`.
pub fn adapted_phase_plan(
    pedestal: f64,
    k: f64,
    range: DeviceRange,
    max_stimuli: usize,
    grid: f64,
) -> StaircasePlan {
    adapted_plan_with(pedestal, k, range, max_stimuli, grid, 10, 0)
}

fn adapted_plan_with(
    pedestal: f64,
    k: f64,
    range: DeviceRange,
    max_stimuli: usize,
    grid: f64,
    trials_per_pair: u32,
    phase_index: u32,
) -> StaircasePlan {
    let prediction = weber_predict(pedestal, k);
    if !(prediction <= range.c_max + EPS) || pedestal >= range.c_max || max_stimuli < 2 {
        return StaircasePlan::terminal(pedestal, range, phase_index);
    }
    let gap = prediction - pedestal;
    let budget = (max_stimuli - 1) as f64;
    let mut m = 1u32;
    let step = loop {
        let step = snap(f64::from(m) * grid);
        if (gap / step - EPS).ceil() <= budget {
            break step;
        }
        m += 1;
    };
    let mut stimuli: Vec<f64> = Vec::with_capacity(max_stimuli);
    for i in 1..=max_stimuli {
        let v = snap(pedestal + i as f64 * step).min(range.c_max);
        if stimuli.last().is_none_or(|&last| v > last + EPS) {
            stimuli.push(v);
        }
    }
    StaircasePlan {
        pedestal,
        stimuli,
        step,
        trials_per_pair,
        phase_index,
        kind: PhaseKind::Adapted,
        terminal: false,
        range,
        timing: TrialTiming::default(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledTrial {
    pub stimulus: f64,
    pub order: PresentationOrder,
}

/// One observer working through the JND protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub plan: StaircasePlan,
    pub schedule: Vec<ScheduledTrial>,
    pub responses: Vec<TrialRecord>,
    pub found_thresholds: Vec<f64>,
    pub jnds: Vec<f64>,
    pub weber_k: Option<f64>,
    pub initial_step: f64,
    pub seed: u64,
    /// Completed phases, oldest first.
    pub history: Vec<PhaseOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub plan: StaircasePlan,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NextAction {
    Phase(StaircasePlan),
    Terminal,
}

fn build_schedule(plan: &StaircasePlan, seed: u64) -> Vec<ScheduledTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut schedule: Vec<ScheduledTrial> = plan
        .stimuli
        .iter()
        .flat_map(|&stimulus| std::iter::repeat_n(stimulus, plan.trials_per_pair as usize))
        .map(|stimulus| ScheduledTrial {
            stimulus,
            order: PresentationOrder::PedestalFirst,
        })
        .collect();
    for trial in &mut schedule {
        trial.order = if rng.random_bool(0.5) {
            PresentationOrder::PedestalFirst
        } else {
            PresentationOrder::VaryingFirst
        };
    }
    schedule.shuffle(&mut rng);
    schedule
}

/// Randomised trial schedule for `plan`: `trials_per_pair` trials per stimulus, each with a
/// fair-coin presentation order, in shuffled sequence.
pub fn schedule_trials(plan: &StaircasePlan, seed: u64) -> Result<SessionState, StaircaseError> {
    if plan.terminal || plan.stimuli.is_empty() || plan.trials_per_pair == 0 {
        return Err(StaircaseError::EmptyPlan);
    }
    Ok(SessionState {
        plan: plan.clone(),
        schedule: build_schedule(plan, seed),
        responses: Vec::new(),
        found_thresholds: Vec::new(),
        jnds: Vec::new(),
        weber_k: None,
        initial_step: plan.step,
        seed,
        history: Vec::new(),
    })
}

impl SessionState {
    /// Fresh protocol starting at sub-interval 1.
    pub fn start(range: DeviceRange, s: f64, trials_per_pair: u32, seed: u64) -> Result<Self, StaircaseError> {
        let plan = subinterval_plan(range, s, 1, trials_per_pair, 0)?;
        schedule_trials(&plan, sub_seed(seed, 0)).map(|mut st| {
            st.seed = seed;
            st
        })
    }

    pub fn next_trial(&self) -> Option<&ScheduledTrial> {
        self.schedule.get(self.responses.len())
    }

    pub fn is_phase_complete(&self) -> bool {
        self.responses.len() >= self.schedule.len()
    }

    /// Records the answer to the next scheduled trial.
    pub fn record_response(&mut self, correct: bool) -> Option<TrialRecord> {
        let trial = *self.next_trial()?;
        let record = TrialRecord {
            stimulus: trial.stimulus,
            pedestal: self.plan.pedestal,
            correct,
            order: trial.order,
        };
        self.responses.push(record);
        Some(record)
    }

    /// Fitted 75% point if it lies above the pedestal and within the current stimulus set.
    pub fn threshold_in_set(&self, fit: Option<&PsychometricFit>) -> Option<f64> {
        let fit = fit?;
        let threshold = fit.threshold75().ok()?;
        let top = self.plan.max_stimulus()?;
        (threshold.is_finite() && threshold > self.plan.pedestal && threshold <= top + EPS).then_some(threshold)
    }

    /// Moves to the next phase given the fit of the phase just completed (`None` when the fit
    /// was not identifiable).
    pub fn advance(&mut self, fit: Option<&PsychometricFit>) -> Result<NextAction, StaircaseError> {
        if !self.is_phase_complete() {
            return Err(StaircaseError::IncompletePhase {
                answered: self.responses.len(),
                scheduled: self.schedule.len(),
            });
        }
        let threshold = self.threshold_in_set(fit);
        self.history.push(PhaseOutcome {
            plan: self.plan.clone(),
            threshold,
        });
        let range = self.plan.range;
        let phase_index = self.plan.phase_index + 1;
        let tpp = self.plan.trials_per_pair;

        let next = match (threshold, self.plan.kind) {
            (Some(t), _) => {
                let jnd = t - self.plan.pedestal;
                self.found_thresholds.push(t);
                self.jnds.push(jnd);
                // k comes from the first JND and is reused for every later prediction
                let k = match self.weber_k {
                    Some(k) => k,
                    None => {
                        let k = weber_constant(self.plan.pedestal, jnd)?;
                        self.weber_k = Some(k);
                        k
                    }
                };
                adapted_plan_with(t, k, range, 10, 0.1, tpp, phase_index)
            }
            (None, PhaseKind::Subinterval(which)) if which < 3 => {
                subinterval_plan(range, self.initial_step, which + 1, tpp, phase_index)?
            }
            (None, _) => StaircasePlan::terminal(self.plan.pedestal, range, phase_index),
        };

        if next.terminal {
            self.plan = next;
            self.schedule.clear();
            self.responses.clear();
            return Ok(NextAction::Terminal);
        }
        self.schedule = build_schedule(&next, sub_seed(self.seed, u64::from(phase_index)));
        self.responses.clear();
        self.plan = next.clone();
        Ok(NextAction::Phase(next))
    }
}

/// Simulated observer obeying Weber's law with a logistic psychometric function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeberObserver {
    pub k: f64,
    /// `beta * JND`, held constant across pedestals (1.12 * 2.30 by default).
    pub slope_jnd_product: f64,
}

impl WeberObserver {
    pub fn new(k: f64) -> Self {
        Self {
            k,
            slope_jnd_product: 1.12 * 2.30,
        }
    }

    pub fn true_jnd(&self, pedestal: f64) -> f64 {
        self.k * pedestal
    }

    pub fn psychometric(&self, pedestal: f64) -> PsychometricFit {
        let jnd = self.true_jnd(pedestal);
        PsychometricFit::with_params(PfFamily::Logistic, pedestal + jnd, self.slope_jnd_product / jnd, 0.5, 0.0)
    }

    pub fn respond<R: Rng>(&self, pedestal: f64, stimulus: f64, rng: &mut R) -> bool {
        rng.random_bool(self.psychometric(pedestal).eval(stimulus).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub range: DeviceRange,
    pub initial_step: f64,
    /// Pooled trials per comparison pair (participants x trials each).
    pub trials_per_pair: u32,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            range: DeviceRange::default(),
            initial_step: 0.4,
            trials_per_pair: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPhase {
    pub plan: StaircasePlan,
    pub fit: Option<PsychometricFit>,
    pub threshold: Option<f64>,
    /// Observer's true JND at this phase's pedestal.
    pub true_jnd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub phases: Vec<SimulatedPhase>,
    pub jnds: Vec<f64>,
    pub weber_k: Option<f64>,
}

impl SimulationReport {
    /// Every found JND lies within one step of the observer's true JND at that pedestal.
    pub fn jnds_within_one_step(&self) -> bool {
        let found: Vec<&SimulatedPhase> = self.phases.iter().filter(|p| p.threshold.is_some()).collect();
        !found.is_empty()
            && found.iter().all(|p| {
                let jnd = p.threshold.unwrap() - p.plan.pedestal;
                (jnd - p.true_jnd).abs() <= p.plan.step + EPS
            })
    }
}

/// Runs the whole protocol end to end against a synthetic observer.
pub fn simulate_session(observer: &WeberObserver, config: &SimulationConfig) -> Result<SimulationReport, StaircaseError> {
    let mut session = SessionState::start(config.range, config.initial_step, config.trials_per_pair, config.seed)?;
    let mut phases = Vec::new();
    for phase in 0..16u64 {
        let mut rng = replication_rng(sub_seed(config.seed, 1_000 + phase), 0);
        let pedestal = session.plan.pedestal;
        while let Some(trial) = session.next_trial().copied() {
            let correct = observer.respond(pedestal, trial.stimulus, &mut rng);
            session.record_response(correct);
        }
        let opts = FitOptions {
            seed: config.seed,
            ..FitOptions::default()
        };
        let fit = fit_pf(&session.responses, PfFamily::Logistic, &opts).ok();
        let threshold = session.threshold_in_set(fit.as_ref());
        phases.push(SimulatedPhase {
            plan: session.plan.clone(),
            fit: fit.clone(),
            threshold,
            true_jnd: observer.true_jnd(pedestal),
        });
        if session.advance(fit.as_ref())? == NextAction::Terminal {
            break;
        }
    }
    Ok(SimulationReport {
        phases,
        jnds: session.jnds.clone(),
        weber_k: session.weber_k,
    })
}
