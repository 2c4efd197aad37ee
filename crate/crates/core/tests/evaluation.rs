use leocsi::autodiff::Tensor;
use leocsi::beamform::{mrt, sum_rate, BeamformingMatrix, LinkConfig};
use leocsi::channel::{CsiTensor, ScenarioConfig};
use leocsi::dataset::{build_dataset, DatasetSpec, SnrPolicy, SpeedPolicy};
use leocsi::evaluation::{
    ar_baseline, evaluate, nmse_linear, nmse_metric, nmse_per_slot, persistence_baseline,
    run_sweep, split_by_speed, Entry, Predictor, SweepKind, SweepPoint,
};
use leocsi::models::{csi_to_planes, LlmModel, ModelConfig, Task};
use leocsi::training::{bf_loss, nmse_loss};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario() -> ScenarioConfig {
    ScenarioConfig {
        num_devices: 2,
        n_x: 2,
        n_y: 2,
        compensate_sat_doppler: true,
        ..Default::default()
    }
}

fn random_csi(seed: u64, shape: [usize; 3]) -> CsiTensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
        .collect();
    CsiTensor::new(shape, data, 5e-4, 0).unwrap()
}

fn planes(c: &CsiTensor) -> Tensor {
    let p = csi_to_planes(c);
    let mut shape = vec![1];
    shape.extend_from_slice(p.shape());
    p.reshaped(&shape).unwrap()
}

proptest! {
    #[test]
    fn nmse_metric_agrees_with_training_loss(seed in 0u64..100_000) {
        let truth = random_csi(seed, [2, 2, 4]);
        let pred = random_csi(seed + 1, [2, 2, 4]);
        let m = nmse_metric(&[pred.clone()], &[truth.clone()]).unwrap().linear;
        let l = nmse_loss(&planes(&pred), &planes(&truth)).unwrap();
        prop_assert!((m - l).abs() < 1e-9);
        prop_assert!((m - nmse_linear(&pred, &truth).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn bf_loss_agrees_with_sum_rate(seed in 0u64..100_000) {
        let h = random_csi(seed, [3, 2, 4]);
        let w = random_csi(seed + 1, [3, 2, 4]);
        let mut mean = 0.0;
        for t in 0..3 {
            let bm = BeamformingMatrix::new(2, 4, w.slot(t).to_vec()).unwrap();
            mean += sum_rate(h.slot(t), &bm, 0.1).unwrap() / 3.0;
        }
        let loss = bf_loss(&planes(&w), &planes(&h), 0.1).unwrap();
        prop_assert!((loss + mean).abs() < 1e-9);
    }
}

#[test]
fn nmse_reference_points() {
    let truth = random_csi(1, [2, 2, 4]);
    let zero = CsiTensor::zeros([2, 2, 4], 5e-4);
    let n = nmse_metric(&[truth.clone()], &[truth.clone()]).unwrap();
    assert_eq!(n.linear, 0.0);
    assert_eq!(n.db(), None);
    let z = nmse_metric(&[zero.clone()], &[truth.clone()]).unwrap();
    assert!(z.db().unwrap().abs() < 1e-12);
    let mut double = truth.clone();
    double.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    assert!(nmse_metric(&[double], &[truth.clone()]).unwrap().db().unwrap().abs() < 1e-12);
    assert!(nmse_metric(&[truth.clone()], &[zero]).is_err());
}

#[test]
fn aggregation_is_linear_before_db() {
    let truth = random_csi(2, [1, 2, 4]);
    let good = truth.clone();
    let zero = CsiTensor::zeros([1, 2, 4], 5e-4);
    let n = nmse_metric(&[good, zero], &[truth.clone(), truth]).unwrap();
    assert!((n.linear - 0.5).abs() < 1e-15);
}

#[test]
fn baselines_on_static_channels_hit_the_floor() {
    let sc = ScenarioConfig {
        sat_speed_mps: 0.0,
        ..scenario()
    };
    let mut spec = DatasetSpec::test(sc, 10, 8, 2, 3);
    spec.speed_policy = SpeedPolicy::Discrete {
        speeds_kmh: vec![0.0],
    };
    spec.snr_policy = SnrPolicy::Clean;
    let d = build_dataset(&spec).unwrap();
    let link = LinkConfig::default();
    let p = evaluate(Predictor::Persistence, &d, 2, link).unwrap();
    assert_eq!(p.linear, 0.0);
    assert_eq!(p.reported, None);
    for s in &d.samples {
        let out = persistence_baseline(&s.past, 2).unwrap();
        for t in 0..2 {
            assert_eq!(out.slot(t), s.past.slot(7));
        }
        let ar = ar_baseline(&s.past, 2, 2).unwrap();
        assert!(nmse_linear(&ar, &s.future).unwrap() < 1e-10);
    }
}

#[test]
fn ar_extrapolates_rotating_phasors() {
    let w = [0.3, -1.1];
    let data: Vec<Complex64> = (0..10)
        .flat_map(|t| w.map(|x| Complex64::from_polar(1.5, x * t as f64)))
        .collect();
    let full = CsiTensor::new([10, 1, 2], data, 5e-4, 0).unwrap();
    let past = full.slice_slots(0, 6).unwrap();
    let pred = ar_baseline(&past, 1, 4).unwrap();
    for (a, b) in pred.data().iter().zip(full.slice_slots(6, 10).unwrap().data()) {
        assert!((a - b).norm() < 1e-6);
    }
    assert!(ar_baseline(&past, 6, 1).is_err());
}

#[test]
fn velocity_sweep_persistence_trend() {
    let spec = DatasetSpec::test(scenario(), 400, 8, 2, 4);
    let d = build_dataset(&spec).unwrap();
    let parts = split_by_speed(&d);
    assert_eq!(parts.len(), 10);
    let link = LinkConfig::default();
    let points: Vec<SweepPoint> = parts
        .into_iter()
        .map(|(v, data)| SweepPoint {
            value: v,
            data,
            t_f: 2,
            link,
            entries: vec![
                Entry {
                    label: "persistence".into(),
                    predictor: Predictor::Persistence,
                },
                Entry {
                    label: "mrt_outdated".into(),
                    predictor: Predictor::MrtOutdated,
                },
            ],
        })
        .collect();
    let r = run_sweep(SweepKind::Velocity, &points, 4, serde_json::json!({"k": 2})).unwrap();
    assert_eq!(r.sweep_var, "velocity_kmh");
    assert_eq!(r.points, (1..=10).map(|i| 10.0 * i as f64).collect::<Vec<_>>());
    assert_eq!(r.rows.len(), 20);
    assert!(r.is_non_decreasing("persistence"), "{:?}", r.series("persistence"));
    let again = run_sweep(SweepKind::Velocity, &points, 4, serde_json::json!({"k": 2})).unwrap();
    assert_eq!(again, r);

    let dir = tempfile::tempdir().unwrap();
    r.write_csv(&dir.path().join("r.csv")).unwrap();
    r.write_json(&dir.path().join("r.json")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("label,sweep_var,value,metric,seed"));
    assert!(lines.next().unwrap().starts_with("persistence,10,"));
    let back: leocsi::evaluation::ExperimentResult =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn snr_sweep_reuses_one_model() {
    let mut c = ModelConfig::tiny();
    c.t_p = 8;
    let m = LlmModel::new(c, 5).unwrap();
    let link = LinkConfig::default();
    let points: Vec<SweepPoint> = [0.0, 15.0, 30.0]
        .iter()
        .map(|&snr| {
            let mut spec = DatasetSpec::test(scenario(), 20, 8, 2, 6);
            spec.snr_policy = SnrPolicy::FixedPast { snr_db: snr };
            SweepPoint {
                value: snr,
                data: build_dataset(&spec).unwrap(),
                t_f: 2,
                link,
                entries: vec![
                    Entry {
                        label: "model".into(),
                        predictor: Predictor::Csi(&m),
                    },
                    Entry {
                        label: "persistence".into(),
                        predictor: Predictor::Persistence,
                    },
                ],
            }
        })
        .collect();
    let r = run_sweep(SweepKind::Snr, &points, 6, serde_json::Value::Null).unwrap();
    assert_eq!(r.series("model").len(), 3);
    assert!(r.is_non_increasing("persistence"));
}

#[test]
fn incompatible_points_are_reported() {
    let m = LlmModel::new(ModelConfig::tiny(), 7).unwrap();
    let d = build_dataset(&DatasetSpec::test(scenario(), 10, 8, 2, 8)).unwrap();
    let point = SweepPoint {
        value: 1.0,
        data: d,
        t_f: 2,
        link: LinkConfig::default(),
        entries: vec![Entry {
            label: "wrong".into(),
            predictor: Predictor::Csi(&m),
        }],
    };
    assert!(run_sweep(SweepKind::History, &[point], 0, serde_json::Value::Null).is_err());
}

#[test]
fn beamforming_references_are_consistent() {
    let d = build_dataset(&DatasetSpec::test(scenario(), 30, 8, 2, 9)).unwrap();
    let link = LinkConfig::default();
    let mrt_rate = evaluate(Predictor::MrtOutdated, &d, 2, link).unwrap().linear;
    let upper = evaluate(Predictor::WmmsePerfect, &d, 2, link).unwrap().linear;
    assert!(mrt_rate > 0.0 && upper > mrt_rate);
    let mut manual = 0.0;
    for s in &d.samples {
        let w = mrt(s.past.slot(7), 2, link.total_power).unwrap();
        for t in 0..2 {
            manual += sum_rate(s.future.slot(t), &w, link.noise_power).unwrap();
        }
    }
    manual /= 60.0;
    assert!((manual - mrt_rate).abs() < 1e-9);

    let mut c = ModelConfig::tiny();
    c.t_p = 8;
    c.task = Task::Beamforming;
    let m = LlmModel::new(c, 10).unwrap();
    let r = evaluate(Predictor::Beamformer(&m), &d, 2, link).unwrap();
    assert!(r.linear > 0.0 && r.reported == Some(r.linear));
    assert_eq!(Predictor::Beamformer(&m).metric(), "sum_rate");
    assert!(evaluate(Predictor::Csi(&m), &d, 2, link).is_err());
}

#[test]
fn per_slot_error_of_persistence_grows() {
    let mut spec = DatasetSpec::test(scenario(), 50, 8, 4, 11);
    spec.speed_policy = SpeedPolicy::Discrete {
        speeds_kmh: vec![30.0],
    };
    spec.snr_policy = SnrPolicy::Clean;
    let d = build_dataset(&spec).unwrap();
    let preds: Vec<CsiTensor> = d
        .samples
        .iter()
        .map(|s| persistence_baseline(&s.past, 4).unwrap())
        .collect();
    let truths: Vec<CsiTensor> = d.samples.iter().map(|s| s.future.clone()).collect();
    let per = nmse_per_slot(&preds, &truths).unwrap();
    assert_eq!(per.len(), 4);
    assert!(per.windows(2).all(|w| w[1] >= w[0]), "{per:?}");
}
