use std::collections::BTreeMap;

use proptest::prelude::*;
use trimodal_core::allocation::{
    fit, predict, read_records, summarize, validate, write_records_to, AllocationRecord, Component,
    ModelCoefficients, ModelKind,
};
use trimodal_core::cost::{
    affordable_level_count, audio_cost, budget_catalogue, smell_cost, visual_cost, Budget, QualityLadder,
    MAX_AUDIO_RATE_HZ, SOURCE_LEVELS,
};

proptest! {
    #[test]
    fn visual_cost_is_strictly_convex(k in 2u32..240) {
        let c = |k| visual_cost(k, SOURCE_LEVELS).unwrap();
        prop_assert!(c(k + 1) > c(k));
        prop_assert!(c(k + 1) - c(k) > c(k) - c(k - 1));
    }

    #[test]
    fn audio_cost_is_linear(f in 1.0f64..MAX_AUDIO_RATE_HZ, g in 1.0f64..MAX_AUDIO_RATE_HZ) {
        let (a, b) = (audio_cost(f, MAX_AUDIO_RATE_HZ).unwrap(), audio_cost(g, MAX_AUDIO_RATE_HZ).unwrap());
        prop_assert!(((a - b) - (f - g) / MAX_AUDIO_RATE_HZ).abs() < 1e-12);
    }

    #[test]
    fn affordable_count_is_monotone(v1 in 0.0f64..1.5, v2 in 0.0f64..1.5, floor in 0.0f64..0.2) {
        let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
        let budget = |value| Budget { label: "x".into(), value, level_count: 0 };
        for ladder in [QualityLadder::default_visual(), QualityLadder::default_audio()] {
            prop_assert!(
                affordable_level_count(&ladder, &budget(lo), floor) <= affordable_level_count(&ladder, &budget(hi), floor)
            );
        }
    }

    #[test]
    fn smell_decision_is_consistent(b in 0.01f64..200.0, scenario in prop::sample::select(vec!["Bathroom", "Car", "Kitchen"])) {
        for coeffs in [ModelCoefficients::m1_reference(), ModelCoefficients::m2_reference()] {
            let p = predict(&coeffs, b, Some(scenario)).unwrap();
            prop_assert_eq!(p.smell_on, p.smell_prob > 0.5);
            prop_assert_eq!(p.smell_on, p.smell_logit > 0.0);
        }
    }

    #[test]
    fn trends_follow_slope_signs(b in 0.5f64..150.0, db in 0.01f64..50.0) {
        let m1 = ModelCoefficients::m1_reference();
        let (p, q) = (predict(&m1, b, None).unwrap(), predict(&m1, b + db, None).unwrap());
        prop_assume!(!p.clamped && !q.clamped);
        prop_assert!(q.visual_pct < p.visual_pct);
        prop_assert!(q.audio_pct > p.audio_pct);
        prop_assert!(q.smell_prob > p.smell_prob);
    }

    #[test]
    fn m2_without_offsets_is_m1(
        si in -3.0f64..3.0, sb in -0.1f64..0.1,
        vi in 50.0f64..95.0, vb in -0.3f64..0.0,
        ai in 0.0f64..10.0, ab in 0.0f64..0.4,
        b in 1.0f64..120.0,
        scenario in prop::sample::select(vec!["Bathroom", "Car", "Kitchen"]),
    ) {
        let m1 = ModelCoefficients {
            model: ModelKind::M1,
            baseline: "Bathroom".into(),
            scenarios: Vec::new(),
            smell: Component::new(si, sb),
            visual: Component::new(vi, vb),
            audio: Component::new(ai, ab),
        };
        let mut m2 = m1.clone();
        m2.model = ModelKind::M2;
        m2.scenarios = vec!["Bathroom".into(), "Car".into(), "Kitchen".into()];
        prop_assert_eq!(predict(&m1, b, None).unwrap(), predict(&m2, b, Some(scenario)).unwrap());
    }
}

#[test]
fn catalogue_constraints() {
    for b in budget_catalogue() {
        if b.label != "B4" && b.label != "B5" {
            assert!(b.value < 1.0, "{}", b.label);
        }
    }
    assert_eq!(smell_cost("Kitchen").unwrap(), 0.040);
    assert_eq!(smell_cost("Car").unwrap(), 0.029);
    assert!(smell_cost("Garage").is_err());
    assert_eq!(visual_cost(240, 240).unwrap(), 1.0);
}

#[test]
fn car_threshold_is_lower_under_m2() {
    // budget at which the smell log-odds cross zero
    let crossing = |c: &ModelCoefficients, s: Option<&str>| {
        let off = s.and_then(|s| c.smell.gamma.get(s)).copied().unwrap_or(0.0);
        -(c.smell.beta_i + off) / c.smell.beta_b
    };
    let m1 = crossing(&ModelCoefficients::m1_reference(), None);
    let car = crossing(&ModelCoefficients::m2_reference(), Some("Car"));
    assert!(car < m1, "car {car} vs m1 {m1}");
    let m2 = ModelCoefficients::m2_reference();
    assert!(!predict(&m2, car - 0.5, Some("Car")).unwrap().smell_on);
    assert!(predict(&m2, car + 0.5, Some("Car")).unwrap().smell_on);
}

fn generated(coeffs: &ModelCoefficients) -> Vec<AllocationRecord> {
    let mut out = Vec::new();
    for (label, b) in [("B1", 6.25), ("B2", 11.0), ("B3", 25.0), ("B4", 100.0), ("B5", 112.0)] {
        for scenario in ["Bathroom", "Car", "Kitchen"] {
            let sc = (coeffs.model == ModelKind::M2).then_some(scenario);
            let p = predict(coeffs, b, sc).unwrap();
            for on in [true, false] {
                let mut r = AllocationRecord::new(label, b, scenario, on, p.visual_pct, p.audio_pct);
                r.weight = 1000.0 * if on { p.smell_prob } else { 1.0 - p.smell_prob };
                out.push(r);
            }
        }
    }
    out
}

#[test]
fn noiseless_m1_round_trip() {
    let truth = ModelCoefficients::m1_reference();
    let records = generated(&truth);
    let fitted = fit(&records, ModelKind::M1, 0.05).unwrap();
    for r in &records {
        let (a, b) = (
            predict(&truth, r.budget_regressor, None).unwrap(),
            predict(&fitted, r.budget_regressor, None).unwrap(),
        );
        assert!((a.visual_pct - b.visual_pct).abs() < 1e-6);
        assert!((a.audio_pct - b.audio_pct).abs() < 1e-6);
        assert!((a.smell_prob - b.smell_prob).abs() < 1e-6);
    }
}

#[test]
fn validation_of_generator_is_exact() {
    let truth = ModelCoefficients::m2_reference();
    let records: Vec<AllocationRecord> = generated(&truth)
        .into_iter()
        .filter(|r| r.smell_on)
        .map(|mut r| {
            r.weight = 1.0;
            r
        })
        .collect();
    let summary = validate(&truth, &records, &BTreeMap::new()).unwrap();
    assert!(summary.visual_mae < 1e-9);
    assert!(summary.audio_mae < 1e-9);
}

#[test]
fn records_file_round_trip_and_summary() {
    let records = vec![
        AllocationRecord::new("B3", 25.0, "Car", true, 50.0, 30.0),
        AllocationRecord::new("B3", 25.0, "Car", false, 60.0, 40.0),
        AllocationRecord::new("B1", 6.25, "Kitchen", false, 80.0, 5.0),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    write_records_to(std::fs::File::create(&path).unwrap(), &records).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);

    let groups = summarize(&records).unwrap();
    let car = groups.iter().find(|g| g.scenario == "Car").unwrap();
    assert_eq!(car.visual.mean, 55.0);
    // t(0.975, 1) * sd / sqrt(2), sd = 7.0710678
    let expected = 12.706_204_736_174_7 * (50f64).sqrt() / 2f64.sqrt();
    assert!((car.visual.half_width.unwrap() - expected).abs() < 1e-6);
    assert_eq!(car.smell_on_proportion, 0.5);
    let kitchen = groups.iter().find(|g| g.scenario == "Kitchen").unwrap();
    assert_eq!(kitchen.visual.half_width, None);
}
