//! Budget-split models.
//!
//! Each model has three linear components in the budget regressor `b`:
//! the log-odds of switching smell on, and the visual and audio shares of the budget (percent).
//! `M1` ignores the scenario; `M2` adds a per-scenario offset to each component's intercept,
//! keeping only the offsets that pass a Wald test. Percentage components are fitted by
//! ordinary least squares and the smell component by logistic regression (IRLS).

use crate::cost::Budget;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocationError {
    #[error("model M2 needs a scenario")]
    ScenarioRequired,
    #[error("scenario `{0}` is not part of the model")]
    UnknownScenario(String),
    #[error("budget regressor must be positive, got {0}")]
    InvalidBudget(f64),
    #[error("design matrix is singular ({0})")]
    Collinear(String),
    #[error("logistic fit did not converge: outcomes are (quasi-)separated")]
    SeparationDetected,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no records to group")]
    EmptyGroup,
    #[error("records: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    M1,
    M2,
}

impl std::str::FromStr for ModelKind {
    type Err = AllocationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(ModelKind::M1),
            "m2" => Ok(ModelKind::M2),
            _ => Err(AllocationError::Io(format!("unknown model kind `{s}`"))),
        }
    }
}

/// How a [`Budget`] becomes the model's regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetScale {
    /// `100 * value`, i.e. percent of the unit budget.
    #[default]
    PercentOfReference,
    /// The budget's reference level count.
    LevelCount,
}

impl BudgetScale {
    pub fn regressor(self, budget: &Budget) -> f64 {
        match self {
            BudgetScale::PercentOfReference => budget.value * 100.0,
            BudgetScale::LevelCount => f64::from(budget.level_count),
        }
    }
}

/// One row of the coefficient matrix: intercept, budget slope and kept scenario offsets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Component {
    pub beta_i: f64,
    pub beta_b: f64,
    #[serde(default)]
    pub gamma: BTreeMap<String, f64>,
}

impl Component {
    pub fn new(beta_i: f64, beta_b: f64) -> Self {
        Self {
            beta_i,
            beta_b,
            gamma: BTreeMap::new(),
        }
    }

    pub fn with_offset(mut self, scenario: &str, gamma: f64) -> Self {
        self.gamma.insert(scenario.to_string(), gamma);
        self
    }

    fn eval(&self, b: f64, scenario: Option<&str>) -> f64 {
        let offset = scenario.and_then(|s| self.gamma.get(s)).copied().unwrap_or(0.0);
        self.beta_i + self.beta_b * b + offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCoefficients {
    pub model: ModelKind,
    /// Scenario without offsets.
    pub baseline: String,
    /// Scenarios the model accepts (M2 only).
    #[serde(default)]
    pub scenarios: Vec<String>,
    pub smell: Component,
    pub visual: Component,
    pub audio: Component,
}

impl ModelCoefficients {
    /// Scenario-free estimates.
    pub fn m1_reference() -> Self {
        Self {
            model: ModelKind::M1,
            baseline: "Bathroom".into(),
            scenarios: Vec::new(),
            smell: Component::new(-1.31, 0.03),
            visual: Component::new(84.89, -0.25),
            audio: Component::new(4.72, 0.32),
        }
    }

    /// Scenario-aware estimates; offsets that failed significance are absent.
    pub fn m2_reference() -> Self {
        Self {
            model: ModelKind::M2,
            baseline: "Bathroom".into(),
            scenarios: vec!["Bathroom".into(), "Car".into(), "Kitchen".into()],
            smell: Component::new(-1.35, 0.04)
                .with_offset("Car", 0.72)
                .with_offset("Kitchen", -1.10),
            visual: Component::new(87.33, -0.25).with_offset("Car", -7.29),
            audio: Component::new(4.72, 0.32),
        }
    }

    pub fn reference(kind: ModelKind) -> Self {
        match kind {
            ModelKind::M1 => Self::m1_reference(),
            ModelKind::M2 => Self::m2_reference(),
        }
    }

    pub fn component(&self, which: ComponentKind) -> &Component {
        match which {
            ComponentKind::Smell => &self.smell,
            ComponentKind::Visual => &self.visual,
            ComponentKind::Audio => &self.audio,
        }
    }

    fn resolve_scenario(&self, scenario: Option<&str>) -> Result<Option<String>, AllocationError> {
        match self.model {
            ModelKind::M1 => Ok(None),
            ModelKind::M2 => {
                let s = scenario.ok_or(AllocationError::ScenarioRequired)?;
                self.scenarios
                    .iter()
                    .find(|k| k.eq_ignore_ascii_case(s))
                    .cloned()
                    .map(Some)
                    .ok_or_else(|| AllocationError::UnknownScenario(s.to_string()))
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("coefficients are plain data")
    }

    pub fn from_json(text: &str) -> Result<Self, AllocationError> {
        serde_json::from_str(text).map_err(|e| AllocationError::Io(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Smell,
    Visual,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub smell_logit: f64,
    pub smell_prob: f64,
    pub smell_on: bool,
    pub visual_pct: f64,
    pub audio_pct: f64,
    /// A percentage fell outside [0, 100] and was clamped.
    pub clamped: bool,
}

/// Evaluates all three components. M1 ignores `scenario`; M2 requires one it knows.
pub fn predict(
    coeffs: &ModelCoefficients,
    budget_regressor: f64,
    scenario: Option<&str>,
) -> Result<PredictionResult, AllocationError> {
    if !(budget_regressor > 0.0) {
        return Err(AllocationError::InvalidBudget(budget_regressor));
    }
    predict_unchecked(coeffs, budget_regressor, scenario)
}

fn predict_unchecked(
    coeffs: &ModelCoefficients,
    b: f64,
    scenario: Option<&str>,
) -> Result<PredictionResult, AllocationError> {
    let scenario = coeffs.resolve_scenario(scenario)?;
    let s = scenario.as_deref();
    let smell_logit = coeffs.smell.eval(b, s);
    let raw_visual = coeffs.visual.eval(b, s);
    let raw_audio = coeffs.audio.eval(b, s);
    let visual_pct = raw_visual.clamp(0.0, 100.0);
    let audio_pct = raw_audio.clamp(0.0, 100.0);
    Ok(PredictionResult {
        smell_logit,
        smell_prob: logistic(smell_logit),
        smell_on: smell_logit > 0.0,
        visual_pct,
        audio_pct,
        clamped: visual_pct != raw_visual || audio_pct != raw_audio,
    })
}

/// Smell on iff the log-odds are strictly positive.
pub fn smell_decision(
    coeffs: &ModelCoefficients,
    budget_regressor: f64,
    scenario: Option<&str>,
) -> Result<bool, AllocationError> {
    Ok(predict(coeffs, budget_regressor, scenario)?.smell_on)
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One committed allocation, as a share of the trial's budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub budget_label: String,
    pub budget_regressor: f64,
    pub scenario: String,
    pub smell_on: bool,
    pub visual_pct: f64,
    pub audio_pct: f64,
    /// Frequency weight; 1 for an individual trial.
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl AllocationRecord {
    pub fn new(
        budget_label: &str,
        budget_regressor: f64,
        scenario: &str,
        smell_on: bool,
        visual_pct: f64,
        audio_pct: f64,
    ) -> Self {
        Self {
            budget_label: budget_label.to_string(),
            budget_regressor,
            scenario: scenario.to_string(),
            smell_on,
            visual_pct,
            audio_pct,
            weight: 1.0,
        }
    }
}

pub fn read_records_from<R: Read>(reader: R) -> Result<Vec<AllocationRecord>, AllocationError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .map(|r| r.map_err(|e: csv::Error| AllocationError::Io(e.to_string())))
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<AllocationRecord>, AllocationError> {
    let file = std::fs::File::open(path).map_err(|e| AllocationError::Io(e.to_string()))?;
    read_records_from(file)
}

pub fn write_records_to<W: Write>(writer: W, records: &[AllocationRecord]) -> Result<(), AllocationError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(r).map_err(|e| AllocationError::Io(e.to_string()))?;
    }
    wtr.flush().map_err(|e| AllocationError::Io(e.to_string()))
}

/// Wald test of one scenario offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermTest {
    pub component: ComponentKind,
    pub scenario: String,
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub coefficients: ModelCoefficients,
    /// Every offset test performed during backward elimination, in order.
    pub tests: Vec<TermTest>,
}

struct Estimate {
    coef: Vec<f64>,
    std_err: Vec<f64>,
}

fn design(records: &[AllocationRecord], offsets: &[String]) -> DMatrix<f64> {
    DMatrix::from_fn(records.len(), 2 + offsets.len(), |r, c| match c {
        0 => 1.0,
        1 => records[r].budget_regressor,
        _ => f64::from(u8::from(records[r].scenario == offsets[c - 2])),
    })
}

fn invert_gram(gram: DMatrix<f64>) -> Result<DMatrix<f64>, AllocationError> {
    let scale = gram.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| AllocationError::Collinear("normal equations are not positive definite".into()))?;
    let l_diag_min = chol.l().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if l_diag_min * l_diag_min < 1e-12 * scale {
        return Err(AllocationError::Collinear("near-singular normal equations".into()));
    }
    Ok(chol.inverse())
}

fn weighted_ols(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Result<Estimate, AllocationError> {
    let xtw = DMatrix::from_fn(x.ncols(), x.nrows(), |c, r| x[(r, c)] * w[r]);
    let inv = invert_gram(&xtw * x)?;
    let coef = &inv * (&xtw * y);
    let resid = y - x * &coef;
    let sse: f64 = resid.iter().zip(w.iter()).map(|(r, wi)| wi * r * r).sum();
    let dof = (w.sum() - x.ncols() as f64).max(1.0);
    let sigma2 = sse / dof;
    let std_err = (0..x.ncols()).map(|i| (sigma2 * inv[(i, i)]).max(0.0).sqrt()).collect();
    Ok(Estimate {
        coef: coef.iter().copied().collect(),
        std_err,
    })
}

fn weighted_logistic(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Result<Estimate, AllocationError> {
    let on: f64 = y.iter().zip(w.iter()).map(|(yi, wi)| yi * wi).sum();
    let total = w.sum();
    if on <= 0.0 || on >= total {
        return Err(AllocationError::SeparationDetected);
    }
    let p = x.ncols();
    let mut beta = DVector::<f64>::zeros(p);
    beta[0] = (on / (total - on)).ln();
    for _ in 0..100 {
        let eta = x * &beta;
        if eta.iter().any(|e| e.abs() > 35.0) {
            return Err(AllocationError::SeparationDetected);
        }
        let mu = eta.map(logistic);
        let irls_w = DVector::from_fn(x.nrows(), |r, _| w[r] * (mu[r] * (1.0 - mu[r])).max(1e-12));
        let z = DVector::from_fn(x.nrows(), |r, _| eta[r] + (y[r] - mu[r]) / (mu[r] * (1.0 - mu[r])).max(1e-12));
        let xtw = DMatrix::from_fn(p, x.nrows(), |c, r| x[(r, c)] * irls_w[r]);
        let inv = invert_gram(&xtw * x)?;
        let next = &inv * (&xtw * z);
        let delta = (&next - &beta).amax();
        beta = next;
        if delta < 1e-11 * (1.0 + beta.amax()) {
            let eta = x * &beta;
            let mu = eta.map(logistic);
            let fisher_w = DVector::from_fn(x.nrows(), |r, _| w[r] * mu[r] * (1.0 - mu[r]));
            let xtw = DMatrix::from_fn(p, x.nrows(), |c, r| x[(r, c)] * fisher_w[r]);
            let cov = invert_gram(&xtw * x)?;
            return Ok(Estimate {
                coef: beta.iter().copied().collect(),
                std_err: (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
            });
        }
    }
    Err(AllocationError::SeparationDetected)
}

/// Two-sided normal p-value of `estimate / std_error`.
fn wald_p(estimate: f64, std_error: f64) -> f64 {
    if std_error > 0.0 {
        erfc((estimate / std_error).abs() / std::f64::consts::SQRT_2)
    } else if estimate == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn fit_component(
    which: ComponentKind,
    records: &[AllocationRecord],
    candidates: &[String],
    alpha: f64,
    tests: &mut Vec<TermTest>,
) -> Result<Component, AllocationError> {
    let y = DVector::from_iterator(
        records.len(),
        records.iter().map(|r| match which {
            ComponentKind::Smell => f64::from(u8::from(r.smell_on)),
            ComponentKind::Visual => r.visual_pct,
            ComponentKind::Audio => r.audio_pct,
        }),
    );
    let w = DVector::from_iterator(records.len(), records.iter().map(|r| r.weight));
    let mut offsets: Vec<String> = candidates.to_vec();
    loop {
        let x = design(records, &offsets);
        let est = match which {
            ComponentKind::Smell => weighted_logistic(&x, &y, &w)?,
            _ => weighted_ols(&x, &y, &w)?,
        };
        // backward elimination: drop the least significant offset, refit, repeat
        let worst = offsets
            .iter()
            .enumerate()
            .map(|(j, s)| (j, s, wald_p(est.coef[2 + j], est.std_err[2 + j])))
            .max_by(|a, b| a.2.total_cmp(&b.2));
        match worst {
            Some((j, s, p)) if p > alpha => {
                tests.push(TermTest {
                    component: which,
                    scenario: s.clone(),
                    estimate: est.coef[2 + j],
                    std_error: est.std_err[2 + j],
                    p_value: p,
                    kept: false,
                });
                offsets.remove(j);
            }
            _ => {
                let mut component = Component::new(est.coef[0], est.coef[1]);
                for (j, s) in offsets.iter().enumerate() {
                    tests.push(TermTest {
                        component: which,
                        scenario: s.clone(),
                        estimate: est.coef[2 + j],
                        std_error: est.std_err[2 + j],
                        p_value: wald_p(est.coef[2 + j], est.std_err[2 + j]),
                        kept: true,
                    });
                    component.gamma.insert(s.clone(), est.coef[2 + j]);
                }
                return Ok(component);
            }
        }
    }
}

/// Fits a model from per-trial (or weighted) records.
pub fn fit(records: &[AllocationRecord], kind: ModelKind, alpha: f64) -> Result<ModelCoefficients, AllocationError> {
    fit_detailed(records, kind, alpha, "Bathroom").map(|m| m.coefficients)
}

/// Like [`fit`], also returning every offset test. `baseline` is the scenario without an offset
/// (falls back to the alphabetically first scenario present).
pub fn fit_detailed(
    records: &[AllocationRecord],
    kind: ModelKind,
    alpha: f64,
    baseline: &str,
) -> Result<FittedModel, AllocationError> {
    if records.len() < 3 {
        return Err(AllocationError::InsufficientData(format!("{} records", records.len())));
    }
    let mut budgets: Vec<f64> = records.iter().map(|r| r.budget_regressor).collect();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    if budgets.len() < 2 {
        return Err(AllocationError::Collinear("fewer than 2 distinct budgets".into()));
    }
    let mut scenarios: Vec<String> = records.iter().map(|r| r.scenario.clone()).collect();
    scenarios.sort();
    scenarios.dedup();
    let baseline = scenarios
        .iter()
        .find(|s| s.eq_ignore_ascii_case(baseline))
        .or(scenarios.first())
        .cloned()
        .unwrap_or_default();
    let candidates: Vec<String> = match kind {
        ModelKind::M1 => Vec::new(),
        ModelKind::M2 => {
            if scenarios.len() < 2 {
                return Err(AllocationError::InsufficientData("M2 needs at least 2 scenarios".into()));
            }
            scenarios.iter().filter(|s| **s != baseline).cloned().collect()
        }
    };
    let mut tests = Vec::new();
    let smell = fit_component(ComponentKind::Smell, records, &candidates, alpha, &mut tests)?;
    let visual = fit_component(ComponentKind::Visual, records, &candidates, alpha, &mut tests)?;
    let audio = fit_component(ComponentKind::Audio, records, &candidates, alpha, &mut tests)?;
    Ok(FittedModel {
        coefficients: ModelCoefficients {
            model: kind,
            baseline,
            scenarios: if kind == ModelKind::M2 { scenarios } else { Vec::new() },
            smell,
            visual,
            audio,
        },
        tests,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub budget_label: String,
    pub scenario: String,
    pub visual_abs_error: f64,
    pub audio_abs_error: f64,
    pub smell_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    /// Mean absolute error in percentage points.
    pub visual_mae: f64,
    pub audio_mae: f64,
    /// Mean |predicted probability - observed on-proportion|.
    pub smell_mae: f64,
    pub per_budget_smell_error: BTreeMap<String, f64>,
    pub groups: Vec<GroupError>,
}

struct Group<'a> {
    budget_label: &'a str,
    scenario: &'a str,
    members: Vec<&'a AllocationRecord>,
}

fn group_records(records: &[AllocationRecord]) -> Vec<Group<'_>> {
    let mut groups: Vec<Group<'_>> = Vec::new();
    for r in records {
        match groups
            .iter_mut()
            .find(|g| g.budget_label == r.budget_label && g.scenario == r.scenario)
        {
            Some(g) => g.members.push(r),
            None => groups.push(Group {
                budget_label: &r.budget_label,
                scenario: &r.scenario,
                members: vec![r],
            }),
        }
    }
    groups.sort_by(|a, b| (a.budget_label, a.scenario).cmp(&(b.budget_label, b.scenario)));
    groups
}

fn weighted_mean<'a>(members: &[&'a AllocationRecord], f: impl Fn(&'a AllocationRecord) -> f64) -> f64 {
    let total: f64 = members.iter().map(|r| r.weight).sum();
    members.iter().map(|r| r.weight * f(r)).sum::<f64>() / total
}

/// Compares predictions with observed group means per (budget, scenario).
/// `scenario_map` redirects scenarios the model lacks (e.g. an unseen room to a similar one).
pub fn validate(
    coeffs: &ModelCoefficients,
    records: &[AllocationRecord],
    scenario_map: &BTreeMap<String, String>,
) -> Result<ValidationSummary, AllocationError> {
    let groups = group_records(records);
    if groups.is_empty() {
        return Err(AllocationError::EmptyGroup);
    }
    let mut errors = Vec::with_capacity(groups.len());
    for g in &groups {
        let scenario = scenario_map.get(g.scenario).map_or(g.scenario, String::as_str);
        let b = weighted_mean(&g.members, |r| r.budget_regressor);
        let pred = predict_unchecked(coeffs, b, Some(scenario))?;
        errors.push(GroupError {
            budget_label: g.budget_label.to_string(),
            scenario: g.scenario.to_string(),
            visual_abs_error: (pred.visual_pct - weighted_mean(&g.members, |r| r.visual_pct)).abs(),
            audio_abs_error: (pred.audio_pct - weighted_mean(&g.members, |r| r.audio_pct)).abs(),
            smell_abs_error: (pred.smell_prob - weighted_mean(&g.members, |r| f64::from(u8::from(r.smell_on)))).abs(),
        });
    }
    let n = errors.len() as f64;
    let mut per_budget: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for e in &errors {
        let slot = per_budget.entry(e.budget_label.clone()).or_default();
        slot.0 += e.smell_abs_error;
        slot.1 += 1;
    }
    Ok(ValidationSummary {
        visual_mae: errors.iter().map(|e| e.visual_abs_error).sum::<f64>() / n,
        audio_mae: errors.iter().map(|e| e.audio_abs_error).sum::<f64>() / n,
        smell_mae: errors.iter().map(|e| e.smell_abs_error).sum::<f64>() / n,
        per_budget_smell_error: per_budget.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        groups: errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    /// Half-width of the 95% t interval; absent with fewer than 2 records.
    pub half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub budget_label: String,
    pub scenario: String,
    pub n: usize,
    pub visual: MeanCi,
    pub audio: MeanCi,
    pub smell_on_proportion: f64,
}

fn mean_ci(values: &[f64]) -> MeanCi {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let half_width = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        t * (var / n as f64).sqrt()
    });
    MeanCi { mean, half_width }
}

/// Per (budget, scenario) means with 95% t intervals and the smell-on proportion.
pub fn summarize(records: &[AllocationRecord]) -> Result<Vec<GroupSummary>, AllocationError> {
    let groups = group_records(records);
    if groups.is_empty() {
        return Err(AllocationError::EmptyGroup);
    }
    Ok(groups
        .iter()
        .map(|g| {
            let visual: Vec<f64> = g.members.iter().map(|r| r.visual_pct).collect();
            let audio: Vec<f64> = g.members.iter().map(|r| r.audio_pct).collect();
            let on = g.members.iter().filter(|r| r.smell_on).count();
            GroupSummary {
                budget_label: g.budget_label.to_string(),
                scenario: g.scenario.to_string(),
                n: g.members.len(),
                visual: mean_ci(&visual),
                audio: mean_ci(&audio),
                smell_on_proportion: on as f64 / g.members.len() as f64,
            }
        })
        .collect())
}

/// Collapses records to one unit-weight entry per (budget, scenario) cell carrying the cell's
/// mean percentages; the weight is split between smell on and off by the observed proportion.
/// Fitting these gives the cell-means analysis instead of the per-trial one.
pub fn group_means(records: &[AllocationRecord]) -> Vec<AllocationRecord> {
    let mut cells: BTreeMap<(String, String), Vec<&AllocationRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.budget_label.clone(), r.scenario.clone())).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((label, scenario), rs) in cells {
        let total: f64 = rs.iter().map(|r| r.weight).sum();
        if !(total > 0.0) {
            continue;
        }
        let mean = |f: fn(&AllocationRecord) -> f64| rs.iter().map(|r| r.weight * f(r)).sum::<f64>() / total;
        let on = rs.iter().filter(|r| r.smell_on).map(|r| r.weight).sum::<f64>() / total;
        let b = mean(|r| r.budget_regressor);
        let (v, a) = (mean(|r| r.visual_pct), mean(|r| r.audio_pct));
        for (smell_on, weight) in [(true, on), (false, 1.0 - on)] {
            if weight > 0.0 {
                let mut rec = AllocationRecord::new(&label, b, &scenario, smell_on, v, a);
                rec.weight = weight;
                out.push(rec);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn m1_at_full_budget() {
        let p = predict(&ModelCoefficients::m1_reference(), 100.0, None).unwrap();
        assert_abs_diff_eq!(p.smell_logit, 1.69, epsilon = 1e-9);
        assert_abs_diff_eq!(p.smell_prob, 1.0 / (1.0 + (-1.69f64).exp()), epsilon = 1e-12);
        assert!(p.smell_on);
        assert_abs_diff_eq!(p.visual_pct, 59.89, epsilon = 1e-9);
        assert_abs_diff_eq!(p.audio_pct, 36.72, epsilon = 1e-9);
        assert!(!p.clamped);
    }

    #[test]
    fn m2_kitchen_drops_excluded_offsets() {
        let p = predict(&ModelCoefficients::m2_reference(), 100.0, Some("Kitchen")).unwrap();
        assert_abs_diff_eq!(p.smell_logit, 1.55, epsilon = 1e-9);
        assert_abs_diff_eq!(p.visual_pct, 62.33, epsilon = 1e-9);
        assert_abs_diff_eq!(p.audio_pct, 36.72, epsilon = 1e-9);
    }

    #[test]
    fn m2_needs_known_scenario() {
        let m2 = ModelCoefficients::m2_reference();
        assert_eq!(predict(&m2, 50.0, None), Err(AllocationError::ScenarioRequired));
        assert!(matches!(predict(&m2, 50.0, Some("Kitti")), Err(AllocationError::UnknownScenario(_))));
        assert!(predict(&m2, 50.0, Some("car")).is_ok());
        assert!(predict(&m2, 0.0, Some("car")).is_err());
    }

    #[test]
    fn smell_threshold_of_m1() {
        let m1 = ModelCoefficients::m1_reference();
        assert!(!smell_decision(&m1, 43.0, None).unwrap());
        assert!(smell_decision(&m1, 44.0, None).unwrap());
    }

    #[test]
    fn zero_logit_is_off() {
        let mut m = ModelCoefficients::m1_reference();
        m.smell = Component::new(-1.0, 0.5);
        assert!(!smell_decision(&m, 2.0, None).unwrap());
    }

    #[test]
    fn clamping_is_flagged() {
        let p = predict(&ModelCoefficients::m1_reference(), 400.0, None).unwrap();
        assert_eq!(p.visual_pct, 0.0);
        assert!(p.clamped);
    }

    #[test]
    fn all_on_is_separation() {
        let records: Vec<AllocationRecord> = [6.25, 25.0, 100.0]
            .iter()
            .map(|&b| AllocationRecord::new("B", b, "Car", true, 50.0, 30.0))
            .collect();
        assert_eq!(fit(&records, ModelKind::M1, 0.05), Err(AllocationError::SeparationDetected));
    }

    #[test]
    fn single_budget_is_collinear() {
        let records: Vec<AllocationRecord> = (0..4)
            .map(|i| AllocationRecord::new("B1", 6.25, "Car", i % 2 == 0, 50.0, 30.0))
            .collect();
        assert!(matches!(fit(&records, ModelKind::M1, 0.05), Err(AllocationError::Collinear(_))));
    }

    #[test]
    fn two_group_mae() {
        let coeffs = ModelCoefficients {
            model: ModelKind::M1,
            baseline: "Bathroom".into(),
            scenarios: Vec::new(),
            smell: Component::new(0.0, 0.0),
            visual: Component::new(8.0, 4.0),
            audio: Component::new(0.0, 0.0),
        };
        // predictions 12 at b=1 and 16 at b=2; observed means 10 and 20
        let records = vec![
            AllocationRecord::new("X1", 1.0, "Car", false, 8.0, 0.0),
            AllocationRecord::new("X1", 1.0, "Car", false, 12.0, 0.0),
            AllocationRecord::new("X2", 2.0, "Car", true, 20.0, 0.0),
        ];
        let v = validate(&coeffs, &records, &BTreeMap::new()).unwrap();
        assert_eq!(v.visual_mae, 3.0);
        assert_eq!(v.audio_mae, 0.0);
        assert_eq!(v.smell_mae, 0.5);
        assert!(validate(&coeffs, &[], &BTreeMap::new()).is_err());
    }

    #[test]
    fn summary_intervals() {
        let records = vec![
            AllocationRecord::new("B1", 6.25, "Car", true, 50.0, 10.0),
            AllocationRecord::new("B1", 6.25, "Car", true, 60.0, 10.0),
        ];
        let s = summarize(&records).unwrap();
        assert_eq!(s.len(), 1);
        assert_abs_diff_eq!(s[0].visual.mean, 55.0, epsilon = 1e-12);
        // t_{0.975, 1} = 12.7062047..., sd = sqrt(50)
        let expected = 12.706_204_736_174_7 * (50.0f64).sqrt() / 2.0f64.sqrt();
        assert_abs_diff_eq!(s[0].visual.half_width.unwrap(), expected, epsilon = 1e-6);
        assert_eq!(s[0].audio.half_width, Some(0.0));
        assert_eq!(s[0].smell_on_proportion, 1.0);
    }

    #[test]
    fn coefficients_json_round_trip() {
        let m2 = ModelCoefficients::m2_reference();
        let text = m2.to_json();
        assert!(text.contains("\"beta_i\"") && text.contains("\"gamma\""));
        assert_eq!(ModelCoefficients::from_json(&text).unwrap(), m2);
    }

    #[test]
    fn records_csv_round_trip() {
        let records = vec![AllocationRecord::new("B4", 100.0, "Car", true, 60.0, 37.0)];
        let mut buf = Vec::new();
        write_records_to(&mut buf, &records).unwrap();
        assert_eq!(read_records_from(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn group_means_split_smell_weight() {
        let rs = vec![
            AllocationRecord::new("B1", 6.25, "Car", true, 70.0, 10.0),
            AllocationRecord::new("B1", 6.25, "Car", false, 80.0, 20.0),
            AllocationRecord::new("B1", 6.25, "Car", false, 90.0, 0.0),
            AllocationRecord::new("B2", 11.0, "Car", true, 60.0, 30.0),
        ];
        let g = group_means(&rs);
        assert_eq!(g.len(), 3);
        assert_eq!((g[0].smell_on, g[0].visual_pct, g[0].audio_pct), (true, 80.0, 10.0));
        assert!((g[0].weight - 1.0 / 3.0).abs() < 1e-12);
        assert!((g[1].weight - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((g[2].budget_label.as_str(), g[2].weight), ("B2", 1.0));
    }
}
