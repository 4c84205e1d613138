//! Normalised computational costs for the three senses and the budget catalogue.
//!
//! Visual quality is image resolution: level `k` of 240 renders at `16k x 9k` pixels and costs
//! `(k/240)^2`. Audio quality is the impulse-response sampling rate `f_k` with cost `f_k / f_max`.
//! Smell is binary; its cost is the coarse-mesh to fine-mesh simulation time ratio per scenario.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Highest RIR sampling rate, Hz.
pub const MAX_AUDIO_RATE_HZ: f64 = 352_800.0;
/// Number of rendered levels before perceptual filtering.
pub const SOURCE_LEVELS: u32 = 240;
/// Levels kept after perceptual filtering.
pub const LADDER_LEVELS: usize = 80;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("level index {index} outside 1..={max}")]
    IndexOutOfRange { index: u64, max: u64 },
    #[error("{0} is outside the valid range")]
    OutOfRange(f64),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown budget `{0}`")]
    UnknownBudget(String),
    #[error("invalid ladder: {0}")]
    InvalidLadder(String),
    #[error("config: {0}")]
    Config(String),
}

/// `(k/n)^2` for `1 <= k <= n`.
pub fn visual_cost(k: u32, n: u32) -> Result<f64, CostError> {
    if k == 0 || k > n {
        return Err(CostError::IndexOutOfRange {
            index: u64::from(k),
            max: u64::from(n),
        });
    }
    let r = f64::from(k) / f64::from(n);
    Ok(r * r)
}

/// `f_k / f_max` for `0 < f_k <= f_max`.
pub fn audio_cost(f_k: f64, f_max: f64) -> Result<f64, CostError> {
    if !(f_k > 0.0 && f_k <= f_max) {
        return Err(CostError::OutOfRange(f_k));
    }
    Ok(f_k / f_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Visual => Modality::Audio,
            Modality::Audio => Modality::Visual,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "visual" | "vision" | "graphics" => Ok(Modality::Visual),
            "audio" | "acoustics" | "sound" => Ok(Modality::Audio),
            _ => Err(CostError::Config(format!("unknown modality `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityLevel {
    /// Index into the unfiltered 240-level source sequence.
    pub index: u32,
    pub descriptor: String,
    pub cost: f64,
}

/// Selectable quality levels for one modality. Slider position 0 is the null stimulus
/// (grey image or silence, cost 0); position `i >= 1` selects `levels[i - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityLadder {
    pub modality: Modality,
    pub levels: Vec<QualityLevel>,
}

/// 80 distinct source indices, log-spaced from 1 to 240 and bumped to stay strictly increasing.
pub fn log_spaced_indices(count: usize, max: u32) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(count);
    let ln_max = f64::from(max).ln();
    for j in 0..count {
        let raw = (ln_max * j as f64 / (count - 1).max(1) as f64).exp().round() as u32;
        let v = match out.last() {
            Some(&prev) if raw <= prev => prev + 1,
            _ => raw.max(1),
        };
        out.push(v);
    }
    out
}

impl QualityLadder {
    pub fn new(modality: Modality, levels: Vec<QualityLevel>) -> Result<Self, CostError> {
        if levels.is_empty() {
            return Err(CostError::InvalidLadder("no levels".into()));
        }
        for w in levels.windows(2) {
            if w[1].cost <= w[0].cost {
                return Err(CostError::InvalidLadder(format!(
                    "costs must increase strictly ({} then {})",
                    w[0].cost, w[1].cost
                )));
            }
        }
        if levels[0].cost <= 0.0 {
            return Err(CostError::InvalidLadder("costs must be positive".into()));
        }
        let top = levels[levels.len() - 1].cost;
        if (top - 1.0).abs() > 1e-12 {
            return Err(CostError::InvalidLadder(format!("top level costs {top}, expected 1")));
        }
        Ok(Self { modality, levels })
    }

    /// Ladder over the given source indices with the modality's cost law.
    pub fn from_indices(modality: Modality, indices: &[u32]) -> Result<Self, CostError> {
        let levels = indices
            .iter()
            .map(|&k| {
                let (descriptor, cost) = match modality {
                    Modality::Visual => (format!("{}x{}", 16 * k, 9 * k), visual_cost(k, SOURCE_LEVELS)?),
                    Modality::Audio => {
                        let f = MAX_AUDIO_RATE_HZ * f64::from(k) / f64::from(SOURCE_LEVELS);
                        (format!("{f} Hz"), audio_cost(f, MAX_AUDIO_RATE_HZ)?)
                    }
                };
                Ok(QualityLevel {
                    index: k,
                    descriptor,
                    cost,
                })
            })
            .collect::<Result<Vec<_>, CostError>>()?;
        Self::new(modality, levels)
    }

    pub fn default_visual() -> Self {
        Self::from_indices(Modality::Visual, &log_spaced_indices(LADDER_LEVELS, SOURCE_LEVELS))
            .expect("default visual ladder is well formed")
    }

    pub fn default_audio() -> Self {
        Self::from_indices(Modality::Audio, &log_spaced_indices(LADDER_LEVELS, SOURCE_LEVELS))
            .expect("default audio ladder is well formed")
    }

    /// Number of non-null levels.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Highest slider position.
    pub fn top(&self) -> usize {
        self.levels.len()
    }

    pub fn cost_at(&self, position: usize) -> Result<f64, CostError> {
        match position {
            0 => Ok(0.0),
            p if p <= self.levels.len() => Ok(self.levels[p - 1].cost),
            p => Err(CostError::IndexOutOfRange {
                index: p as u64,
                max: self.levels.len() as u64,
            }),
        }
    }

    pub fn descriptor_at(&self, position: usize) -> &str {
        match position {
            0 => "null",
            p => self.levels.get(p - 1).map_or("invalid", |l| l.descriptor.as_str()),
        }
    }

    /// Highest position whose cost does not exceed `allowance` (0 if none does).
    pub fn highest_within(&self, allowance: f64) -> usize {
        self.levels.partition_point(|l| l.cost <= allowance)
    }

    pub fn cheapest(&self) -> f64 {
        self.levels[0].cost
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub label: String,
    pub value: f64,
    /// Reference level count; informational only.
    pub level_count: u32,
}

/// Budgets B1..B5.
pub fn budget_catalogue() -> Vec<Budget> {
    [("B1", 0.0625, 28), ("B2", 0.11, 38), ("B3", 0.25, 48), ("B4", 1.0, 80), ("B5", 1.12, 48)]
        .into_iter()
        .map(|(label, value, level_count)| Budget {
            label: label.to_string(),
            value,
            level_count,
        })
        .collect()
}

pub fn find_budget<'a>(budgets: &'a [Budget], label: &str) -> Result<&'a Budget, CostError> {
    budgets
        .iter()
        .find(|b| b.label.eq_ignore_ascii_case(label))
        .ok_or_else(|| CostError::UnknownBudget(label.to_string()))
}

/// Budget halfway between two catalogued ones (used for validation budgets).
pub fn midpoint(a: &Budget, b: &Budget, label: &str) -> Budget {
    Budget {
        label: label.to_string(),
        value: 0.5 * (a.value + b.value),
        level_count: 0,
    }
}

/// Ladder levels that fit in `budget` once the other senses take `floor_costs`.
pub fn affordable_level_count(ladder: &QualityLadder, budget: &Budget, floor_costs: f64) -> usize {
    ladder.highest_within(budget.value - floor_costs + 1e-9)
}

/// Normalised smell cost per scenario (coarse-mesh simulation time over fine-mesh time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmellCostTable {
    pub costs: BTreeMap<String, f64>,
}

impl Default for SmellCostTable {
    fn default() -> Self {
        let costs = [("Bathroom", 0.037), ("Car", 0.029), ("Kitchen", 0.040), ("Kitti", 0.032)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self { costs }
    }
}

impl SmellCostTable {
    pub fn new(costs: BTreeMap<String, f64>) -> Result<Self, CostError> {
        for (name, &c) in &costs {
            if !(c > 0.0 && c < 1.0) {
                return Err(CostError::Config(format!("smell cost for {name} must be in (0, 1), got {c}")));
            }
        }
        Ok(Self { costs })
    }

    /// Canonical scenario name (case-insensitive, `bath` accepted for Bathroom).
    pub fn canonical(&self, scenario: &str) -> Result<String, CostError> {
        let wanted = if scenario.eq_ignore_ascii_case("bath") { "bathroom" } else { scenario };
        self.costs
            .keys()
            .find(|k| k.eq_ignore_ascii_case(wanted))
            .cloned()
            .ok_or_else(|| CostError::UnknownScenario(scenario.to_string()))
    }

    pub fn get(&self, scenario: &str) -> Result<f64, CostError> {
        let name = self.canonical(scenario)?;
        Ok(self.costs[&name])
    }
}

/// Smell cost from the default table.
pub fn smell_cost(scenario: &str) -> Result<f64, CostError> {
    SmellCostTable::default().get(scenario)
}

/// Everything an allocation trial needs to price a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCatalog {
    pub visual: QualityLadder,
    pub audio: QualityLadder,
    pub smell: SmellCostTable,
    pub budgets: Vec<Budget>,
}

impl Default for CostCatalog {
    fn default() -> Self {
        Self {
            visual: QualityLadder::default_visual(),
            audio: QualityLadder::default_audio(),
            smell: SmellCostTable::default(),
            budgets: budget_catalogue(),
        }
    }
}

/// On-disk form; every section optional and defaulted.
#[derive(Debug, Default, Deserialize)]
struct CatalogFile {
    visual_indices: Option<Vec<u32>>,
    audio_indices: Option<Vec<u32>>,
    smell_costs: Option<BTreeMap<String, f64>>,
    budgets: Option<Vec<Budget>>,
}

impl CostCatalog {
    pub fn ladder(&self, modality: Modality) -> &QualityLadder {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    pub fn budget(&self, label: &str) -> Result<&Budget, CostError> {
        find_budget(&self.budgets, label)
    }

    /// Parses a TOML catalogue (`visual_indices`, `audio_indices`, `[smell_costs]`, `[[budgets]]`).
    pub fn from_toml_str(text: &str) -> Result<Self, CostError> {
        let file: CatalogFile = toml::from_str(text).map_err(|e| CostError::Config(e.to_string()))?;
        let defaults = Self::default();
        let visual = match file.visual_indices {
            Some(ix) => QualityLadder::from_indices(Modality::Visual, &ix)?,
            None => defaults.visual,
        };
        let audio = match file.audio_indices {
            Some(ix) => QualityLadder::from_indices(Modality::Audio, &ix)?,
            None => defaults.audio,
        };
        let smell = match file.smell_costs {
            Some(c) => SmellCostTable::new(c)?,
            None => defaults.smell,
        };
        let budgets = file.budgets.unwrap_or(defaults.budgets);
        if let Some(b) = budgets.iter().find(|b| !(b.value > 0.0)) {
            return Err(CostError::Config(format!("budget {} must be positive", b.label)));
        }
        Ok(Self {
            visual,
            audio,
            smell,
            budgets,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path).map_err(|e| CostError::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn visual_cost_substitutions() {
        assert_eq!(visual_cost(240, 240).unwrap(), 1.0);
        assert_eq!(visual_cost(120, 240).unwrap(), 0.25);
        assert_abs_diff_eq!(visual_cost(1, 240).unwrap(), 1.0 / 57_600.0, epsilon = 1e-15);
        assert!(visual_cost(0, 240).is_err());
        assert!(visual_cost(241, 240).is_err());
    }

    #[test]
    fn audio_cost_substitutions() {
        assert_eq!(audio_cost(352_800.0, MAX_AUDIO_RATE_HZ).unwrap(), 1.0);
        assert_eq!(audio_cost(176_400.0, MAX_AUDIO_RATE_HZ).unwrap(), 0.5);
        assert!(audio_cost(352_801.0, MAX_AUDIO_RATE_HZ).is_err());
        assert!(audio_cost(0.0, MAX_AUDIO_RATE_HZ).is_err());
    }

    #[test]
    fn catalogue_lookups() {
        let b = budget_catalogue();
        let b4 = find_budget(&b, "B4").unwrap();
        assert_eq!((b4.value, b4.level_count), (1.0, 80));
        let b5 = find_budget(&b, "b5").unwrap();
        assert_eq!((b5.value, b5.level_count), (1.12, 48));
        let nb1 = midpoint(find_budget(&b, "B1").unwrap(), find_budget(&b, "B2").unwrap(), "NB1");
        assert_abs_diff_eq!(nb1.value, 0.086_25, epsilon = 1e-15);
        assert!(find_budget(&b, "B9").is_err());
    }

    #[test]
    fn default_ladders_are_well_formed() {
        let ix = log_spaced_indices(80, 240);
        assert_eq!(ix.len(), 80);
        assert_eq!(ix[0], 1);
        assert_eq!(*ix.last().unwrap(), 240);
        assert!(ix.windows(2).all(|w| w[1] > w[0]));
        let v = QualityLadder::default_visual();
        assert_eq!(v.len(), 80);
        assert_eq!(v.cost_at(80).unwrap(), 1.0);
        assert_eq!(v.cost_at(0).unwrap(), 0.0);
        assert!(v.cost_at(81).is_err());
        assert_eq!(v.descriptor_at(80), "3840x2160");
        assert_eq!(QualityLadder::default_audio().descriptor_at(80), "352800 Hz");
    }

    fn squares_ladder() -> QualityLadder {
        let levels = (1..=10)
            .map(|i| QualityLevel {
                index: i,
                descriptor: i.to_string(),
                cost: (f64::from(i) / 10.0).powi(2),
            })
            .collect();
        QualityLadder::new(Modality::Visual, levels).unwrap()
    }

    #[test]
    fn affordable_count_brute_force() {
        let ladder = squares_ladder();
        let budget = Budget {
            label: "t".into(),
            value: 0.25,
            level_count: 0,
        };
        let brute = (1..=10).filter(|&i| (f64::from(i) / 10.0).powi(2) <= 0.25).count();
        assert_eq!(affordable_level_count(&ladder, &budget, 0.0), brute);
        assert_eq!(brute, 5);
        let rich = Budget { value: 2.0, ..budget.clone() };
        assert_eq!(affordable_level_count(&ladder, &rich, 0.5), 10);
        let poor = Budget { value: 0.005, ..budget };
        assert_eq!(affordable_level_count(&ladder, &poor, 0.0), 0);
    }

    #[test]
    fn ladder_rejects_non_increasing_costs() {
        let levels = vec![
            QualityLevel { index: 1, descriptor: "a".into(), cost: 0.5 },
            QualityLevel { index: 2, descriptor: "b".into(), cost: 0.5 },
            QualityLevel { index: 3, descriptor: "c".into(), cost: 1.0 },
        ];
        assert!(QualityLadder::new(Modality::Audio, levels).is_err());
    }

    #[test]
    fn smell_costs() {
        assert_eq!(smell_cost("Car").unwrap(), 0.029);
        assert_eq!(smell_cost("kitchen").unwrap(), 0.040);
        assert_eq!(smell_cost("Bath").unwrap(), 0.037);
        assert_eq!(smell_cost("Garage"), Err(CostError::UnknownScenario("Garage".into())));
    }

    #[test]
    fn catalog_from_toml_overrides_sections() {
        let cat = CostCatalog::from_toml_str(
            "visual_indices = [60, 120, 240]\n[smell_costs]\nGarage = 0.05\n",
        )
        .unwrap();
        assert_eq!(cat.visual.len(), 3);
        assert_eq!(cat.audio.len(), 80);
        assert_eq!(cat.smell.get("garage").unwrap(), 0.05);
        assert!(cat.smell.get("Car").is_err());
        assert!(CostCatalog::from_toml_str("visual_indices = [10, 5]").is_err());
    }
}
