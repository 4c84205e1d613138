use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use trimodal_core::psychometric::{
    aggregate, bootstrap_se, compare_families, deviance, deviance_gof, eval_pf, fit_pf, read_trials, threshold_at,
    write_trials, FitOptions, LapsePolicy, PfFamily, PresentationOrder, PsychometricError, PsychometricFit,
    TrialRecord,
};
use trimodal_core::rng::replication_rng;

const LEVELS: [f64; 8] = [1.6, 2.0, 2.4, 2.8, 3.2, 3.6, 4.0, 4.4];

fn observer() -> PsychometricFit {
    PsychometricFit::with_params(PfFamily::Logistic, 3.5, 1.12, 0.5, 0.0)
}

fn synth(truth: &PsychometricFit, per_level: usize, rng: &mut impl Rng) -> Vec<TrialRecord> {
    LEVELS
        .iter()
        .flat_map(|&x| {
            let p = truth.eval(x);
            (0..per_level)
                .map(|i| {
                    let order = if i % 2 == 0 { PresentationOrder::PedestalFirst } else { PresentationOrder::VaryingFirst };
                    TrialRecord::new(x, 1.2, rng.random_bool(p), order).unwrap()
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn family() -> impl Strategy<Value = PfFamily> {
    prop::sample::select(PfFamily::ALL.to_vec())
}

proptest! {
    #[test]
    fn psi_is_monotone_and_bounded(
        fam in family(),
        alpha in 1.5f64..10.0,
        beta in 0.3f64..6.0,
        lambda in 0.0f64..0.05,
        x1 in 0.01f64..20.0,
        dx in 0.0f64..5.0,
    ) {
        let fit = PsychometricFit::with_params(fam, alpha, beta, 0.5, lambda);
        let (a, b) = (eval_pf(&fit, x1), eval_pf(&fit, x1 + dx));
        prop_assert!(a <= b + 1e-15);
        prop_assert!((0.5..=1.0 - lambda + 1e-15).contains(&a));
    }

    #[test]
    fn threshold_inverts_eval(
        fam in family(),
        alpha in 1.5f64..10.0,
        beta in 0.3f64..6.0,
        lambda in 0.0f64..0.05,
        q in 0.02f64..0.98,
    ) {
        let fit = PsychometricFit::with_params(fam, alpha, beta, 0.5, lambda);
        let p = 0.5 + q * (0.5 - lambda);
        let x = threshold_at(&fit, p).unwrap();
        prop_assert!((eval_pf(&fit, x) - p).abs() < 1e-9);
    }

    #[test]
    fn threshold_rejects_asymptotes(fam in family(), lambda in 0.0f64..0.05) {
        let fit = PsychometricFit::with_params(fam, 3.0, 1.0, 0.5, lambda);
        let lower_is_out_of_range = matches!(threshold_at(&fit, 0.5), Err(PsychometricError::OutOfRange { .. }));
        prop_assert!(lower_is_out_of_range);
        prop_assert!(threshold_at(&fit, 1.0 - lambda).is_err());
    }

    #[test]
    fn deviance_is_non_negative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trials = synth(&observer(), 10, &mut rng);
        if let Ok(fit) = fit_pf(&trials, PfFamily::Logistic, &FitOptions::default()) {
            prop_assert!(deviance(&fit, &aggregate(&trials)) >= 0.0);
        }
    }
}

#[test]
fn logistic_reference_points() {
    let f = PsychometricFit::with_params(PfFamily::Logistic, 3.5, 1.0, 0.5, 0.0);
    assert_eq!(eval_pf(&f, 3.5), 0.75);
    assert!((eval_pf(&f, -1e3) - 0.5).abs() < 1e-15);
    let lapsing = PsychometricFit::with_params(PfFamily::Logistic, 3.5, 1.0, 0.5, 0.02);
    assert!((eval_pf(&lapsing, 1e3) - 0.98).abs() < 1e-12);
    assert!((threshold_at(&f, 0.75).unwrap() - 3.5).abs() < 1e-12);
}

#[test]
fn slope_examples() {
    let s = |beta: f64| PsychometricFit::with_params(PfFamily::Logistic, 3.5, beta, 0.5, 0.0).slope_at_threshold();
    assert!((s(1.12) - 0.14).abs() < 1e-12);
    assert!((s(2.24) - 2.0 * s(1.12)).abs() < 1e-12);
    assert!((s(0.56) - 0.07).abs() < 1e-12);
}

#[test]
fn degenerate_inputs() {
    let all_correct: Vec<TrialRecord> = LEVELS
        .iter()
        .map(|&x| TrialRecord::new(x, 1.2, true, PresentationOrder::PedestalFirst).unwrap())
        .collect();
    assert!(matches!(
        fit_pf(&all_correct, PfFamily::Logistic, &FitOptions::default()),
        Err(PsychometricError::NonIdentifiable)
    ));
    let one_level: Vec<TrialRecord> = (0..10)
        .map(|i| TrialRecord::new(2.0, 1.2, i % 2 == 0, PresentationOrder::PedestalFirst).unwrap())
        .collect();
    assert!(matches!(
        fit_pf(&one_level, PfFamily::Logistic, &FitOptions::default()),
        Err(PsychometricError::InsufficientLevels(1))
    ));
}

#[test]
fn recovery_over_many_replications() {
    // mean fitted location within 2 bootstrap SDs of the truth
    let alphas: Vec<f64> = (0..1000u64)
        .into_par_iter()
        .filter_map(|r| {
            let trials = synth(&observer(), 10, &mut replication_rng(5, r));
            fit_pf(&trials, PfFamily::Logistic, &FitOptions::default()).ok().map(|f| f.alpha)
        })
        .collect();
    assert!(alphas.len() >= 950);
    let mean = alphas.iter().sum::<f64>() / alphas.len() as f64;
    let trials = synth(&observer(), 10, &mut replication_rng(5, 0));
    let fit = fit_pf(&trials, PfFamily::Logistic, &FitOptions::default()).unwrap();
    let boot = bootstrap_se(&fit, &trials, 400, 1, &FitOptions::default()).unwrap();
    assert!((mean - 3.5).abs() < 2.0 * boot.sd_alpha, "mean {mean}, sd {}", boot.sd_alpha);
}

#[test]
fn mle_is_a_local_optimum() {
    let mut interior = 0;
    for seed in 0..30u64 {
        let trials = synth(&observer(), 10, &mut replication_rng(17, seed));
        let Ok(fit) = fit_pf(&trials, PfFamily::Logistic, &FitOptions::default()) else {
            continue;
        };
        // a fit pinned to the box is only a constrained optimum
        if fit.at_bound {
            continue;
        }
        interior += 1;
        let levels = aggregate(&trials);
        let ll = |f: &PsychometricFit| {
            levels
                .iter()
                .map(|l| {
                    let p = f.eval(l.stimulus);
                    f64::from(l.correct) * p.ln() + f64::from(l.n - l.correct) * (1.0 - p).ln()
                })
                .sum::<f64>()
        };
        let base = ll(&fit);
        assert!((base - fit.log_likelihood).abs() < 1e-9);
        for (da, db) in [(1.01, 1.0), (0.99, 1.0), (1.0, 1.01), (1.0, 0.99)] {
            let moved = PsychometricFit::with_params(fit.family, fit.alpha * da, fit.beta * db, 0.5, fit.lambda);
            assert!(ll(&moved) <= base + 1e-9, "seed {seed}: perturbation improved the likelihood");
        }
    }
    assert!(interior >= 20, "only {interior} interior fits");
}

#[test]
fn bootstrap_is_deterministic_and_scales() {
    let small = synth(&observer(), 10, &mut replication_rng(8, 0));
    let opts = FitOptions::default();
    let fit = fit_pf(&small, PfFamily::Logistic, &opts).unwrap();
    let a = bootstrap_se(&fit, &small, 300, 42, &opts).unwrap();
    let b = bootstrap_se(&fit, &small, 300, 42, &opts).unwrap();
    assert_eq!(a, b);

    // ten times the trials: standard errors shrink by about sqrt(10)
    // (only once the sample is large enough for the fit to be near-normal)
    let sd = |per_level: usize| {
        (0..4u64)
            .map(|d| {
                let trials = synth(&observer(), per_level, &mut replication_rng(9, per_level as u64 * 10 + d));
                let fit = fit_pf(&trials, PfFamily::Logistic, &opts).unwrap();
                bootstrap_se(&fit, &trials, 400, 3, &opts).unwrap().sd_alpha
            })
            .sum::<f64>()
            / 4.0
    };
    let ratio = sd(200) / sd(2000);
    assert!((10f64.sqrt() * 0.8..=10f64.sqrt() * 1.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn gof_p_values_are_calibrated() {
    let p: Vec<f64> = (0..500u64)
        .into_par_iter()
        .filter_map(|r| {
            let trials = synth(&observer(), 10, &mut replication_rng(21, r));
            let opts = FitOptions::default();
            let fit = fit_pf(&trials, PfFamily::Logistic, &opts).ok()?;
            Some(deviance_gof(&fit, &trials, 100, r, &opts).p_value)
        })
        .collect();
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "mean p {mean}");
}

#[test]
fn perfect_fit_has_unit_p_value() {
    // two levels: the fit passes through both observed proportions
    let trials: Vec<TrialRecord> = [(2.0, 6), (4.0, 9)]
        .iter()
        .flat_map(|&(x, k)| {
            (0..10).map(move |i| TrialRecord::new(x, 1.2, i < k, PresentationOrder::PedestalFirst).unwrap())
        })
        .collect();
    let opts = FitOptions::default();
    let fit = fit_pf(&trials, PfFamily::Logistic, &opts).unwrap();
    let gof = deviance_gof(&fit, &trials, 50, 0, &opts);
    assert!(gof.deviance < 1e-9);
    assert_eq!(gof.p_value, 1.0);
}

#[test]
fn logistic_data_usually_ranks_logistic_first() {
    // levels spanning chance to ceiling; over a narrow mid-range the
    // families cannot be told apart at any practical n
    let truth = PsychometricFit::with_params(PfFamily::Logistic, 3.5, 2.0, 0.5, 0.0);
    let firsts = (0..200u64)
        .into_par_iter()
        .filter(|&r| {
            let mut rng = replication_rng(33, r);
            let trials: Vec<TrialRecord> = (0..12)
                .flat_map(|i| {
                    let x = 1.0 + 0.5 * f64::from(i);
                    let p = truth.eval(x);
                    (0..2000)
                        .map(|_| TrialRecord::new(x, 0.5, rng.random_bool(p), PresentationOrder::PedestalFirst).unwrap())
                        .collect::<Vec<_>>()
                })
                .collect();
            let c = compare_families(&trials, &PfFamily::ALL, 100, r, &FitOptions::default());
            c.ranking.first().map(|f| f.fit.family) == Some(PfFamily::Logistic)
        })
        .count();
    println!("logistic first in {firsts}/200");
    assert!(firsts >= 120, "logistic first in only {firsts}/200");
}

#[test]
fn free_lapse_fit_respects_cap() {
    let truth = PsychometricFit::with_params(PfFamily::Logistic, 3.0, 2.0, 0.5, 0.04);
    let trials = synth(&truth, 60, &mut replication_rng(2, 0));
    let opts = FitOptions {
        lapse: LapsePolicy::Free,
        ..FitOptions::default()
    };
    let fit = fit_pf(&trials, PfFamily::Logistic, &opts).unwrap();
    assert!((0.0..=0.05).contains(&fit.lambda));
}

#[test]
fn trial_file_round_trip() {
    let trials = synth(&observer(), 3, &mut replication_rng(1, 1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trials.csv");
    write_trials(&path, &trials).unwrap();
    assert_eq!(read_trials(&path).unwrap(), trials);
}
