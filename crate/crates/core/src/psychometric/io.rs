//! Trial CSV (`stimulus_ppm,pedestal_ppm,correct,order`) and the fit report document.

use super::{BootstrapResult, GofResult, PresentationOrder, PsychometricError, PsychometricFit, TrialRecord};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    stimulus_ppm: f64,
    pedestal_ppm: f64,
    correct: u8,
    order: String,
}

fn io_err(e: impl std::fmt::Display) -> PsychometricError {
    PsychometricError::Io(e.to_string())
}

pub fn read_trials_from<R: Read>(reader: R) -> Result<Vec<TrialRecord>, PsychometricError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(io_err)?.clone();
    let expected = ["stimulus_ppm", "pedestal_ppm", "correct", "order"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(io_err(format!("expected header {expected:?}, found {headers:?}")));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(io_err)?;
        let correct = match row.correct {
            0 => false,
            1 => true,
            other => return Err(io_err(format!("row {}: correct must be 0 or 1, got {other}", line + 1))),
        };
        let order = match row.order.as_str() {
            "P" => PresentationOrder::PedestalFirst,
            "V" => PresentationOrder::VaryingFirst,
            other => return Err(io_err(format!("row {}: order must be P or V, got {other:?}", line + 1))),
        };
        out.push(TrialRecord::new(row.stimulus_ppm, row.pedestal_ppm, correct, order)?);
    }
    Ok(out)
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialRecord>, PsychometricError> {
    read_trials_from(std::fs::File::open(path).map_err(io_err)?)
}

pub fn write_trials_to<W: Write>(writer: W, trials: &[TrialRecord]) -> Result<(), PsychometricError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for t in trials {
        wtr.serialize(Row {
            stimulus_ppm: t.stimulus,
            pedestal_ppm: t.pedestal,
            correct: u8::from(t.correct),
            order: t.order.code().to_string(),
        })
        .map_err(io_err)?;
    }
    wtr.flush().map_err(io_err)
}

pub fn write_trials(path: &Path, trials: &[TrialRecord]) -> Result<(), PsychometricError> {
    write_trials_to(std::fs::File::create(path).map_err(io_err)?, trials)
}

/// Flat summary of a fit, its bootstrap and its goodness of fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub family: String,
    pub alpha_ppm: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub threshold75_ppm: f64,
    pub slope_at_threshold: f64,
    pub sd_alpha: Option<f64>,
    pub sd_slope: Option<f64>,
    pub deviance: Option<f64>,
    pub p_value: Option<f64>,
}

impl FitReport {
    pub fn new(fit: &PsychometricFit, bootstrap: Option<&BootstrapResult>, gof: Option<&GofResult>) -> Self {
        Self {
            family: fit.family.name().to_string(),
            alpha_ppm: fit.alpha,
            beta: fit.beta,
            gamma: fit.gamma,
            lambda: fit.lambda,
            threshold75_ppm: fit.threshold75().unwrap_or(f64::NAN),
            slope_at_threshold: fit.slope_at_threshold(),
            sd_alpha: bootstrap.map(|b| b.sd_alpha),
            sd_slope: bootstrap.map(|b| b.sd_slope),
            deviance: gof.map(|g| g.deviance),
            p_value: gof.map(|g| g.p_value),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_and_writes_trial_csv() {
        let text = "stimulus_ppm,pedestal_ppm,correct,order\n1.6,1.2,1,P\n2.0,1.2,0,V\n";
        let trials = read_trials_from(text.as_bytes()).unwrap();
        assert_eq!(trials.len(), 2);
        assert!(trials[0].correct && !trials[1].correct);
        assert_eq!(trials[1].order, PresentationOrder::VaryingFirst);
        let mut buf = Vec::new();
        write_trials_to(&mut buf, &trials).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }

    #[test]
    fn rejects_missing_header_and_bad_codes() {
        assert!(read_trials_from("1.6,1.2,1,P\n".as_bytes()).is_err());
        let bad = "stimulus_ppm,pedestal_ppm,correct,order\n1.6,1.2,2,P\n";
        assert!(read_trials_from(bad.as_bytes()).is_err());
        let bad = "stimulus_ppm,pedestal_ppm,correct,order\n1.6,1.2,1,X\n";
        assert!(read_trials_from(bad.as_bytes()).is_err());
    }

    #[test]
    fn report_uses_expected_field_names() {
        let fit = PsychometricFit::with_params(super::super::PfFamily::Logistic, 3.5, 1.12, 0.5, 0.0);
        let json: serde_json::Value = serde_json::from_str(&FitReport::new(&fit, None, None).to_json()).unwrap();
        for key in [
            "family",
            "alpha_ppm",
            "beta",
            "gamma",
            "lambda",
            "threshold75_ppm",
            "slope_at_threshold",
            "sd_alpha",
            "sd_slope",
            "deviance",
            "p_value",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
