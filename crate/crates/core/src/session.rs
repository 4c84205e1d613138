//! Budget-allocation trials: the slider state machine, sessions of randomised trials,
//! the event trace and its on-disk store.
//!
//! Store layout: one JSON object per line (`header` lines open a session, `event` lines follow
//! it), closed by a single `checksum sha256 <hex>` line over every byte before it.

use crate::allocation::{AllocationRecord, BudgetScale};
use crate::cost::{Budget, CostCatalog, CostError, Modality};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

/// Tolerance for every budget comparison.
pub const BUDGET_EPS: f64 = 1e-9;

/// Scenarios presented in an allocation session.
pub const SESSION_SCENARIOS: [&str; 3] = ["Bathroom", "Car", "Kitchen"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("smell costs {cost} but the budget is {budget}")]
    SmellUnaffordable { cost: f64, budget: f64 },
    #[error("session has no trials left")]
    SessionComplete,
    #[error("corrupt log: {0}")]
    CorruptLog(String),
    #[error("replay diverged at event {index}: {detail}")]
    ReplayMismatch { index: usize, detail: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialState {
    pub budget: Budget,
    pub scenario: String,
    pub visual_idx: usize,
    pub audio_idx: usize,
    pub smell_on: bool,
    pub dependent_mode: bool,
    pub spent: f64,
    pub remaining: f64,
}

impl TrialState {
    pub fn index(&self, modality: Modality) -> usize {
        match modality {
            Modality::Visual => self.visual_idx,
            Modality::Audio => self.audio_idx,
        }
    }

    fn index_mut(&mut self, modality: Modality) -> &mut usize {
        match modality {
            Modality::Visual => &mut self.visual_idx,
            Modality::Audio => &mut self.audio_idx,
        }
    }

    fn reprice(&mut self, catalog: &CostCatalog) -> Result<(), SessionError> {
        let smell = if self.smell_on {
            catalog.smell.get(&self.scenario)?
        } else {
            0.0
        };
        self.spent = catalog.visual.cost_at(self.visual_idx)? + catalog.audio.cost_at(self.audio_idx)? + smell;
        self.remaining = self.budget.value - self.spent;
        Ok(())
    }

    pub fn within_budget(&self) -> bool {
        self.spent <= self.budget.value + BUDGET_EPS
    }
}

/// Fresh trial: null stimuli and smell off, except that the largest budget starts both sliders at
/// the highest levels costing at most half of its surplus over the unit budget.
pub fn new_trial(catalog: &CostCatalog, budget_label: &str, scenario: &str) -> Result<TrialState, SessionError> {
    let budget = catalog.budget(budget_label)?.clone();
    let scenario = catalog.smell.canonical(scenario)?;
    let surplus = catalog
        .budgets
        .iter()
        .filter(|b| b.value < budget.value)
        .map(|b| b.value)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let start = match surplus {
        Some(below) if budget.value > 1.0 + BUDGET_EPS => {
            let half = 0.5 * (budget.value - below);
            (
                catalog.visual.highest_within(half + BUDGET_EPS),
                catalog.audio.highest_within(half + BUDGET_EPS),
            )
        }
        _ => (0, 0),
    };
    let mut state = TrialState {
        budget,
        scenario,
        visual_idx: start.0,
        audio_idx: start.1,
        smell_on: false,
        dependent_mode: false,
        spent: 0.0,
        remaining: 0.0,
    };
    state.reprice(catalog)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelOutcome {
    Applied,
    /// Applied after lowering the other slider.
    Compensated,
    /// Over budget; state unchanged apart from the mode flag.
    Rejected,
}

pub fn set_level(
    catalog: &CostCatalog,
    state: &TrialState,
    modality: Modality,
    new_idx: usize,
) -> Result<(TrialState, LevelOutcome), SessionError> {
    let ladder = catalog.ladder(modality);
    let new_cost = ladder.cost_at(new_idx)?;
    let mut next = state.clone();
    *next.index_mut(modality) = new_idx;
    next.reprice(catalog)?;
    if next.within_budget() {
        return Ok((next, LevelOutcome::Applied));
    }
    if !state.dependent_mode {
        let mut rejected = state.clone();
        rejected.dependent_mode = true;
        return Ok((rejected, LevelOutcome::Rejected));
    }
    let smell = if state.smell_on {
        catalog.smell.get(&state.scenario)?
    } else {
        0.0
    };
    let allowance = state.budget.value - smell - new_cost;
    if allowance < -BUDGET_EPS {
        return Ok((state.clone(), LevelOutcome::Rejected));
    }
    let other = modality.other();
    *next.index_mut(other) = catalog.ladder(other).highest_within(allowance + BUDGET_EPS);
    next.reprice(catalog)?;
    Ok((next, LevelOutcome::Compensated))
}

/// Switches smell on or off. Switching on lowers audio, then visual, until the rest fits.
pub fn set_smell(catalog: &CostCatalog, state: &TrialState, on: bool) -> Result<TrialState, SessionError> {
    let mut next = state.clone();
    next.smell_on = on;
    if on && !state.smell_on {
        let smell = catalog.smell.get(&state.scenario)?;
        if smell > state.budget.value + BUDGET_EPS {
            return Err(SessionError::SmellUnaffordable {
                cost: smell,
                budget: state.budget.value,
            });
        }
        let visual = catalog.visual.cost_at(state.visual_idx)?;
        let room = state.budget.value - smell;
        if visual + catalog.audio.cost_at(state.audio_idx)? > room + BUDGET_EPS {
            if visual <= room + BUDGET_EPS {
                next.audio_idx = catalog.audio.highest_within(room - visual + BUDGET_EPS);
            } else {
                next.audio_idx = 0;
                next.visual_idx = catalog.visual.highest_within(room + BUDGET_EPS);
            }
        }
    }
    next.reprice(catalog)?;
    Ok(next)
}

pub fn toggle_smell(catalog: &CostCatalog, state: &TrialState) -> Result<TrialState, SessionError> {
    set_smell(catalog, state, !state.smell_on)
}

/// Final state as percentages of the trial budget.
pub fn to_record(catalog: &CostCatalog, state: &TrialState) -> Result<AllocationRecord, SessionError> {
    let value = state.budget.value;
    Ok(AllocationRecord::new(
        &state.budget.label,
        BudgetScale::PercentOfReference.regressor(&state.budget),
        &state.scenario,
        state.smell_on,
        100.0 * catalog.visual.cost_at(state.visual_idx)? / value,
        100.0 * catalog.audio.cost_at(state.audio_idx)? / value,
    ))
}

/// Olfactory display timing attached to smell-on events for hardware drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmellDelivery {
    pub burst_ms: u32,
    pub onset_compensation_ms: u32,
    pub purge_bursts: u32,
    pub purge_interval_ms: u32,
}

impl Default for SmellDelivery {
    fn default() -> Self {
        Self {
            burst_ms: 1000,
            onset_compensation_ms: 240,
            purge_bursts: 5,
            purge_interval_ms: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    StartTrial {
        budget: String,
        scenario: String,
    },
    SetLevel {
        modality: Modality,
        index: usize,
        outcome: LevelOutcome,
    },
    SetSmell {
        on: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delivery: Option<SmellDelivery>,
    },
    Commit {
        record: AllocationRecord,
    },
}

/// One transition with the state it produced (`None` once the session is finished).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub t_ms: u64,
    #[serde(flatten)]
    pub action: Action,
    pub state: Option<TrialState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session_id: String,
    pub participant_id: String,
    pub seed: u64,
    /// Presentation order of (budget, scenario) combinations.
    pub order: Vec<(String, String)>,
    pub catalog: CostCatalog,
    pub events: Vec<SessionEvent>,
}

impl SessionLog {
    /// Committed records in commit order.
    pub fn records(&self) -> Vec<AllocationRecord> {
        self.events
            .iter()
            .filter_map(|e| match &e.action {
                Action::Commit { record } => Some(record.clone()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Wall,
    /// Deterministic timestamps: `start`, `start + step`, ...
    Manual { next: u64, step: u64 },
}

impl Clock {
    fn tick(&mut self) -> u64 {
        match self {
            Clock::Wall => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            Clock::Manual { next, step } => {
                let t = *next;
                *next += *step;
                t
            }
        }
    }
}

/// Every budget crossed with every scenario, shuffled by `seed`.
pub fn presentation_order(catalog: &CostCatalog, scenarios: &[&str], seed: u64) -> Vec<(String, String)> {
    let mut order: Vec<(String, String)> = catalog
        .budgets
        .iter()
        .flat_map(|b| scenarios.iter().map(move |s| (b.label.clone(), s.to_string())))
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// A participant's run through all combinations; the single writer of its log.
#[derive(Debug, Clone)]
pub struct Session {
    log: SessionLog,
    current: Option<TrialState>,
    position: usize,
    clock: Clock,
}

impl Session {
    pub fn new(session_id: &str, participant_id: &str, catalog: CostCatalog, seed: u64) -> Result<Self, SessionError> {
        let order = presentation_order(&catalog, &SESSION_SCENARIOS, seed);
        Self::with_order(session_id, participant_id, catalog, seed, order, Clock::Wall)
    }

    pub fn with_order(
        session_id: &str,
        participant_id: &str,
        catalog: CostCatalog,
        seed: u64,
        order: Vec<(String, String)>,
        clock: Clock,
    ) -> Result<Self, SessionError> {
        let mut session = Self {
            log: SessionLog {
                session_id: session_id.to_string(),
                participant_id: participant_id.to_string(),
                seed,
                order,
                catalog,
                events: Vec::new(),
            },
            current: None,
            position: 0,
            clock,
        };
        session.start_trial()?;
        Ok(session)
    }

    /// Resumes a stored session after checking its trace replays cleanly.
    pub fn from_log(log: SessionLog, clock: Clock) -> Result<Self, SessionError> {
        let states = replay(&log)?;
        let position = log.events.iter().filter(|e| matches!(e.action, Action::Commit { .. })).count();
        let mut session = Self {
            current: None,
            position,
            clock,
            log,
        };
        if position < session.log.order.len() {
            match states.last() {
                Some(Some(state)) if !matches!(session.log.events.last().map(|e| &e.action), Some(Action::Commit { .. })) => {
                    session.current = Some(state.clone());
                }
                // a trace cut between a commit and the next start
                _ => session.start_trial()?,
            }
        }
        Ok(session)
    }

    pub fn set_clock(&mut self, clock: Clock) {
        self.clock = clock;
    }

    fn start_trial(&mut self) -> Result<(), SessionError> {
        let Some((budget, scenario)) = self.log.order.get(self.position).cloned() else {
            self.current = None;
            return Ok(());
        };
        let state = new_trial(&self.log.catalog, &budget, &scenario)?;
        self.push(Action::StartTrial { budget, scenario }, Some(state));
        Ok(())
    }

    fn push(&mut self, action: Action, state: Option<TrialState>) {
        let t_ms = self.clock.tick();
        self.current = state.clone();
        self.log.events.push(SessionEvent { t_ms, action, state });
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn catalog(&self) -> &CostCatalog {
        &self.log.catalog
    }

    pub fn current(&self) -> Option<&TrialState> {
        self.current.as_ref()
    }

    /// Zero-based index of the active trial.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn total_trials(&self) -> usize {
        self.log.order.len()
    }

    pub fn is_complete(&self) -> bool {
        self.current.is_none()
    }

    fn active(&self) -> Result<&TrialState, SessionError> {
        self.current.as_ref().ok_or(SessionError::SessionComplete)
    }

    pub fn set_level(&mut self, modality: Modality, index: usize) -> Result<(TrialState, LevelOutcome), SessionError> {
        let (next, outcome) = set_level(&self.log.catalog, self.active()?, modality, index)?;
        self.push(
            Action::SetLevel {
                modality,
                index,
                outcome,
            },
            Some(next.clone()),
        );
        Ok((next, outcome))
    }

    pub fn set_smell(&mut self, on: bool) -> Result<TrialState, SessionError> {
        let next = set_smell(&self.log.catalog, self.active()?, on)?;
        let delivery = on.then(SmellDelivery::default);
        self.push(Action::SetSmell { on, delivery }, Some(next.clone()));
        Ok(next)
    }

    pub fn toggle_smell(&mut self) -> Result<TrialState, SessionError> {
        let on = !self.active()?.smell_on;
        self.set_smell(on)
    }

    pub fn commit(&mut self) -> Result<AllocationRecord, SessionError> {
        let record = to_record(&self.log.catalog, self.active()?)?;
        let finished = self.current.clone();
        self.push(Action::Commit { record: record.clone() }, finished);
        self.position += 1;
        self.start_trial()?;
        Ok(record)
    }

    pub fn records(&self) -> Vec<AllocationRecord> {
        self.log.records()
    }
}

/// Re-runs a log's actions and checks every recorded state. Returns the reproduced states.
pub fn replay(log: &SessionLog) -> Result<Vec<Option<TrialState>>, SessionError> {
    let catalog = &log.catalog;
    let mut current: Option<TrialState> = None;
    let mut position = 0usize;
    let mut states = Vec::with_capacity(log.events.len());
    let mismatch = |index: usize, detail: String| SessionError::ReplayMismatch { index, detail };
    for (i, event) in log.events.iter().enumerate() {
        let produced = match &event.action {
            Action::StartTrial { budget, scenario } => {
                if log.order.get(position) != Some(&(budget.clone(), scenario.clone())) {
                    return Err(mismatch(i, format!("trial {position} is not ({budget}, {scenario})")));
                }
                Some(new_trial(catalog, budget, scenario)?)
            }
            Action::SetLevel {
                modality,
                index,
                outcome,
            } => {
                let state = current.as_ref().ok_or_else(|| mismatch(i, "no active trial".into()))?;
                let (next, got) = set_level(catalog, state, *modality, *index)?;
                if got != *outcome {
                    return Err(mismatch(i, format!("outcome {got:?}, logged {outcome:?}")));
                }
                Some(next)
            }
            Action::SetSmell { on, .. } => {
                let state = current.as_ref().ok_or_else(|| mismatch(i, "no active trial".into()))?;
                Some(set_smell(catalog, state, *on)?)
            }
            Action::Commit { record } => {
                let state = current.as_ref().ok_or_else(|| mismatch(i, "no active trial".into()))?;
                if to_record(catalog, state)? != *record {
                    return Err(mismatch(i, "committed record differs".into()));
                }
                position += 1;
                Some(state.clone())
            }
        };
        if produced != event.state {
            return Err(mismatch(i, "state differs from the logged one".into()));
        }
        current = produced;
        states.push(current.clone());
    }
    Ok(states)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header {
        session_id: String,
        participant_id: String,
        seed: u64,
        order: Vec<(String, String)>,
        catalog: CostCatalog,
    },
    Event {
        session_id: String,
        #[serde(flatten)]
        event: SessionEvent,
    },
}

const CHECKSUM_PREFIX: &str = "checksum sha256 ";

fn checksum_line(body: &str) -> String {
    format!("{CHECKSUM_PREFIX}{}\n", hex::encode(Sha256::digest(body.as_bytes())))
}

fn encode_log(log: &SessionLog) -> String {
    let mut body = String::new();
    let header = Line::Header {
        session_id: log.session_id.clone(),
        participant_id: log.participant_id.clone(),
        seed: log.seed,
        order: log.order.clone(),
        catalog: log.catalog.clone(),
    };
    body.push_str(&serde_json::to_string(&header).expect("plain data"));
    body.push('\n');
    for event in &log.events {
        let line = Line::Event {
            session_id: log.session_id.clone(),
            event: event.clone(),
        };
        body.push_str(&serde_json::to_string(&line).expect("plain data"));
        body.push('\n');
    }
    body
}

/// Store text for the given sessions, in order.
pub fn encode_store(logs: &[SessionLog]) -> String {
    let body: String = logs.iter().map(encode_log).collect();
    let mut out = body.clone();
    out.push_str(&checksum_line(&body));
    out
}

/// Verifies the checksum and splits the store back into sessions.
pub fn decode_store(text: &str) -> Result<Vec<SessionLog>, SessionError> {
    let corrupt = |m: String| SessionError::CorruptLog(m);
    let trimmed = text.strip_suffix('\n').ok_or_else(|| corrupt("missing final newline".into()))?;
    let (body, last) = match trimmed.rfind('\n') {
        Some(i) => (&text[..=i], &trimmed[i + 1..]),
        None => ("", trimmed),
    };
    let expected = last
        .strip_prefix(CHECKSUM_PREFIX)
        .ok_or_else(|| corrupt("missing checksum line".into()))?;
    if checksum_line(body).trim_end() != last || expected.len() != 64 {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut logs: Vec<SessionLog> = Vec::new();
    for (n, raw) in body.lines().enumerate() {
        let line: Line = serde_json::from_str(raw).map_err(|e| corrupt(format!("line {}: {e}", n + 1)))?;
        match line {
            Line::Header {
                session_id,
                participant_id,
                seed,
                order,
                catalog,
            } => logs.push(SessionLog {
                session_id,
                participant_id,
                seed,
                order,
                catalog,
                events: Vec::new(),
            }),
            Line::Event { session_id, event } => match logs.last_mut() {
                Some(log) if log.session_id == session_id => log.events.push(event),
                _ => return Err(corrupt(format!("line {}: event outside its session", n + 1))),
            },
        }
    }
    Ok(logs)
}

fn io_err(e: std::io::Error) -> SessionError {
    SessionError::Io(e.to_string())
}

/// Writes a store holding exactly `logs`.
pub fn persist(path: &Path, logs: &[SessionLog]) -> Result<(), SessionError> {
    std::fs::write(path, encode_store(logs)).map_err(io_err)
}

/// Adds a session after the existing ones, re-sealing the checksum. A missing file is created.
pub fn append(path: &Path, log: &SessionLog) -> Result<(), SessionError> {
    let mut logs = if path.exists() { load(path)? } else { Vec::new() };
    logs.push(log.clone());
    persist(path, &logs)
}

pub fn load(path: &Path) -> Result<Vec<SessionLog>, SessionError> {
    decode_store(&std::fs::read_to_string(path).map_err(io_err)?)
}
