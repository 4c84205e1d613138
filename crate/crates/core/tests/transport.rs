use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimodal_core::transport::{
    build_mesh, builtin_scene, cost_ratio, curve_max_diff, perceptual_equivalence, simulate, ConcentrationSeries,
    InletPatch, JndCurve, Mesh, Region, SceneSpec, Transport, TransportError, VelocityField,
};

fn random_scene(seed: u64) -> (SceneSpec, Mesh) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = [0, 1, 2].map(|_| rng.random_range(0.5..4.0));
    let corner = [0, 1, 2].map(|a| rng.random_range(0.0..0.7) * extent[a]);
    let size = [0, 1, 2].map(|a| rng.random_range(0.05..0.3) * extent[a]);
    let velocity_field = match rng.random_range(0..3) {
        0 => VelocityField::Uniform {
            velocity: [0, 1, 2].map(|_| rng.random_range(-0.3..0.3)),
        },
        1 => VelocityField::PrescribedAnalytic,
        _ => VelocityField::BuoyancyPlume {
            delta_t: rng.random_range(0.0..40.0),
        },
    };
    let scene = SceneSpec {
        name: "random".into(),
        extent,
        inlets: vec![InletPatch {
            region: Region {
                min: [corner[0], 0.0, corner[2]],
                max: [corner[0] + size[0], size[1], corner[2] + size[2]],
            },
            velocity: rng.random_range(0.0..0.5),
            concentration: rng.random_range(0.0..30.0),
            release_s: rng.random_bool(0.5).then(|| rng.random_range(0.0..20.0)),
        }],
        outlets: vec![Region {
            min: [extent[0] * 0.8, extent[1] * 0.8, extent[2] * 0.8],
            max: extent,
        }],
        velocity_field,
        ambient_pressure: 101_325.0,
        ambient_temperature: 293.15,
        molecular_diffusivity: 8.23e-5,
        eddy_diffusivity: rng.random_range(0.0..5e-3),
        probe: None,
    };
    let mesh = Mesh::new(extent, [0, 1, 2].map(|_| rng.random_range(3..12)), 0).unwrap();
    (scene, mesh)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fields_stay_non_negative_and_balanced(seed in any::<u64>(), frac in 0.05f64..1.0) {
        let (scene, mesh) = random_scene(seed);
        let t = Transport::new(&scene, &mesh).unwrap();
        let dt = frac * t.max_stable_dt();
        let mut f = t.initial_field();
        for _ in 0..100 {
            let (next, report) = t.step(&f, dt).unwrap();
            prop_assert!(next.concentration.iter().all(|&c| c >= 0.0 && c.is_finite()));
            let scale = report.mass_after.abs().max(report.inflow + report.outflow + report.injected).max(1e-300);
            prop_assert!(report.imbalance().abs() <= 1e-8 * scale, "imbalance {}", report.imbalance());
            f = next;
        }
    }

    #[test]
    fn cell_counts_multiply(nx in 1usize..10, ny in 1usize..10, nz in 1usize..10, factor in 1usize..4) {
        let mesh = Mesh::new([1.0, 2.0, 3.0], [nx, ny, nz], 0).unwrap();
        prop_assert_eq!(mesh.total_cells, nx * ny * nz);
        let fine = mesh.refine(factor);
        prop_assert_eq!(fine.resolution, [nx * factor, ny * factor, nz * factor]);
        prop_assert_eq!(fine.total_cells, mesh.total_cells * factor.pow(3));
    }
}

#[test]
fn unstable_steps_are_refused() {
    let (scene, mesh) = random_scene(3);
    let t = Transport::new(&scene, &mesh).unwrap();
    let dt = 3.0 * t.max_stable_dt();
    assert!(matches!(t.step(&t.initial_field(), dt), Err(TransportError::UnstableStep { .. })));
}

#[test]
fn reruns_are_bit_identical() {
    let scene = builtin_scene("car").unwrap();
    let mesh = build_mesh(&scene, 4096).unwrap();
    let probe = scene.probe.unwrap();
    let a = simulate(&scene, &mesh, 60.0, 4.0, probe).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| simulate(&scene, &mesh, 60.0, 4.0, probe).unwrap());
    assert_eq!(a.series, b.series);
    assert_eq!(a.series.samples.len(), 241);
    assert_eq!(a.series.samples[1].0, 0.25);
}

#[test]
fn series_csv_has_header_and_rows() {
    let series = ConcentrationSeries {
        probe_position: [0.0; 3],
        sample_rate: 4.0,
        samples: vec![(0.0, 0.0), (0.25, 1.5)],
    };
    let mut out = Vec::new();
    series.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap(), vec!["t_s", "c_ppm"]);
    let rows: Vec<(f64, f64)> = rdr.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows, series.samples);
}

#[test]
fn series_comparisons() {
    let s = |v: &[f64]| ConcentrationSeries {
        probe_position: [0.0; 3],
        sample_rate: 4.0,
        samples: v.iter().enumerate().map(|(i, &c)| (i as f64 * 0.25, c)).collect(),
    };
    let (a, b) = (s(&[0.0, 1.0, 2.0]), s(&[0.5, 1.0, 4.0]));
    assert_eq!(curve_max_diff(&a, &b).unwrap(), 2.0);
    assert!(perceptual_equivalence(&a, &b, &JndCurve::default()).unwrap());
    let c = s(&[0.0, 1.0, 5.0]);
    assert!(!perceptual_equivalence(&a, &c, &JndCurve::default()).unwrap());
    assert!(curve_max_diff(&a, &s(&[0.0])).is_err());
}

#[test]
fn cost_ratios() {
    let r = cost_ratio(&BTreeMap::from([(0, 10.0), (1, 40.0), (2, 200.0)])).unwrap();
    assert_eq!(r.ratios[&2], 1.0);
    assert_eq!(r.ratios[&0], 0.05);
    assert!(r.is_monotone());
    assert!(matches!(cost_ratio(&BTreeMap::new()), Err(TransportError::EmptyReport)));
    assert!(matches!(cost_ratio(&BTreeMap::from([(0, 0.0), (1, 1.0)])), Err(TransportError::ZeroTime(0))));
}

#[test]
fn scene_files_are_validated() {
    for name in ["bathroom", "car", "kitchen", "kitti"] {
        builtin_scene(name).unwrap();
    }
    let no_inlet = r#"
name = "empty"
extent = [1.0, 1.0, 1.0]
inlets = []
[velocity_field]
kind = "prescribed_analytic"
"#;
    assert!(SceneSpec::from_toml_str(no_inlet).is_err());
    let outside = r#"
name = "bad"
extent = [1.0, 1.0, 1.0]
[velocity_field]
kind = "uniform"
velocity = [0.0, 0.0, 0.0]
[[inlets]]
region = { min = [0.5, 0.5, 0.5], max = [1.5, 0.6, 0.6] }
velocity = 0.1
concentration = 1.0
"#;
    assert!(SceneSpec::from_toml_str(outside).is_err());
}
