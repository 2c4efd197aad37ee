use leocsi::autodiff::{BlobType, Graph};
use leocsi::channel::{CsiTensor, ScenarioConfig};
use leocsi::dataset::{build_dataset, DatasetSpec};
use leocsi::models::{
    is_backbone_base, FreezePolicy, LlmModel, ModelConfig, ModelInput, PeMode, Task,
};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn history(seed: u64, t: usize, k: usize, n: usize, origin: usize) -> CsiTensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..t * k * n)
        .map(|_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
        .collect();
    CsiTensor::new([t, k, n], data, 5e-4, origin).unwrap()
}

fn tiny_past(seed: u64) -> CsiTensor {
    let c = ModelConfig::tiny();
    history(seed, c.t_p, c.num_devices, c.num_antennas, 3)
}

#[test]
fn fresh_adapters_leave_the_backbone_unchanged() {
    let mut with = ModelConfig::tiny();
    with.lora_rank = 8;
    let mut without = with.clone();
    without.lora_rank = 0;
    let a = LlmModel::new(with, 1).unwrap();
    let mut b = LlmModel::new(without, 2).unwrap();
    let copied = b.load_from(&a.params, &["enc.", "llm.", "dec."]).unwrap();
    assert_eq!(copied, b.params.len());
    let past = tiny_past(4);
    assert_eq!(a.cpllm_predict(&past).unwrap(), b.cpllm_predict(&past).unwrap());
}

#[test]
fn parallel_and_autoregressive_agree_for_one_slot() {
    let mut c = ModelConfig::tiny();
    c.t_f = 1;
    let m = LlmModel::new(c, 5).unwrap();
    for seed in 0..5 {
        let past = tiny_past(seed);
        assert_eq!(
            m.autoregressive_predict(&past, 1).unwrap(),
            m.cpllm_predict(&past).unwrap()
        );
    }
}

#[test]
fn autoregressive_calls_backbone_once_per_slot() {
    let mut c = ModelConfig::tiny();
    c.t_f = 1;
    let m = LlmModel::new(c, 6).unwrap();
    let past = tiny_past(7);
    for t_f in [1, 2, 4] {
        m.reset_backbone_calls();
        let out = m.autoregressive_predict(&past, t_f).unwrap();
        assert_eq!(out.slots(), t_f);
        assert_eq!(m.backbone_calls(), t_f);
        assert_eq!(out.origin_slot, past.origin_slot + past.slots());
    }
    m.reset_backbone_calls();
    m.cpllm_predict(&past).unwrap();
    assert_eq!(m.backbone_calls(), 1);
    let multi = LlmModel::new(ModelConfig::tiny(), 6).unwrap();
    assert!(multi.autoregressive_predict(&past, 2).is_err());
}

#[test]
fn batched_forward_matches_single_pipeline() {
    let m = LlmModel::new(ModelConfig::tiny(), 8).unwrap();
    let pasts: Vec<CsiTensor> = (0..3).map(tiny_past).collect();
    let input = ModelInput::from_histories(pasts.iter()).unwrap();
    let mut g = Graph::new();
    let y = m.forward(&mut g, &input).unwrap();
    let per = m.config.t_f * m.config.slot_width();
    for (p, block) in pasts.iter().zip(g.value(y).data().chunks(per)) {
        let single = m.cpllm_predict(p).unwrap();
        let kn = m.config.num_devices * m.config.num_antennas;
        for t in 0..m.config.t_f {
            for i in 0..kn {
                let z = single.slot(t)[i];
                let base = t * 2 * kn;
                assert!((z.re - block[base + i]).abs() < 1e-10);
                assert!((z.im - block[base + kn + i]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn beamformers_meet_the_power_budget() {
    let mut c = ModelConfig::tiny();
    c.task = Task::Beamforming;
    c.total_power = 2.5;
    let m = LlmModel::new(c, 9).unwrap();
    for seed in 0..10 {
        for w in m.bfllm_predict(&tiny_past(seed)).unwrap() {
            assert!((w.power() - 2.5).abs() <= 1e-6 * 2.5);
        }
    }
}

#[test]
fn history_scale_carries_to_predictions() {
    let m = LlmModel::new(ModelConfig::tiny(), 10).unwrap();
    let past = tiny_past(11);
    let mut scaled = past.clone();
    scaled.data_mut().iter_mut().for_each(|z| *z *= 7.0);
    let a = m.cpllm_predict(&past).unwrap();
    let b = m.cpllm_predict(&scaled).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x * 7.0 - y).norm() < 1e-9 * y.norm().max(1.0));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = LlmModel::new(ModelConfig::tiny(), 12).unwrap();
    m.apply_freeze(FreezePolicy::Adapters);
    m.save(dir.path(), BlobType::F64).unwrap();
    let back = LlmModel::load(dir.path()).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.params, m.params);

    // f32 files are exact once values are f32-representable
    let once = tempfile::tempdir().unwrap();
    m.save(once.path(), BlobType::F32).unwrap();
    let a = LlmModel::load(once.path()).unwrap();
    let twice = tempfile::tempdir().unwrap();
    a.save(twice.path(), BlobType::F32).unwrap();
    assert_eq!(LlmModel::load(twice.path()).unwrap().params, a.params);
}

#[test]
fn checkpoint_with_wrong_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = LlmModel::new(ModelConfig::tiny(), 13).unwrap();
    m.save(dir.path(), BlobType::F64).unwrap();
    let mut c = ModelConfig::tiny();
    c.d_llm = 32;
    std::fs::write(dir.path().join("model.json"), serde_json::to_string(&c).unwrap()).unwrap();
    assert!(LlmModel::load(dir.path()).is_err());
}

#[test]
fn trainable_counts_match_closed_form() {
    for r in [0, 2, 8] {
        let mut c = ModelConfig::desk();
        c.lora_rank = r;
        let mut m = LlmModel::new(c.clone(), 14).unwrap();
        m.apply_freeze(FreezePolicy::Adapters);
        assert_eq!(m.params.num_trainable(), c.adapter_trainable_count());
        assert_eq!(
            c.adapter_trainable_count(),
            c.encoder_param_count() + c.decoder_param_count() + 2 * r * 64 * 3 * 2
        );
        let base: usize = m
            .params
            .iter()
            .filter(|(n, _)| is_backbone_base(n))
            .map(|(_, p)| p.value.data().len())
            .sum();
        assert_eq!(base, c.backbone_base_count());
        m.apply_freeze(FreezePolicy::None);
        assert_eq!(m.params.num_trainable(), m.params.num_elements());
    }
}

#[test]
fn reference_scale_trainable_fraction() {
    let c = ModelConfig::default();
    let trainable = c.adapter_trainable_count();
    let total = trainable + c.backbone_base_count();
    let frac = trainable as f64 / total as f64;
    assert_eq!(c.adapter_trainable_count() - c.encoder_param_count() - c.decoder_param_count(), 2 * 8 * 1024 * 3 * 24);
    // the head is T_P·d_llm wide, so it dominates the trainable set
    assert!(frac > 0.15 && frac < 0.3, "{frac}");
}

#[test]
fn relative_positions_ignore_the_origin() {
    let mut c = ModelConfig::tiny();
    c.pe_mode = PeMode::Relative;
    let m = LlmModel::new(c, 15).unwrap();
    let a = tiny_past(16);
    let mut b = a.clone();
    b.origin_slot = 40;
    assert_eq!(m.cpllm_predict(&a).unwrap().data(), m.cpllm_predict(&b).unwrap().data());
    let abs = LlmModel::new(ModelConfig::tiny(), 15).unwrap();
    assert_ne!(abs.cpllm_predict(&a).unwrap().data(), abs.cpllm_predict(&b).unwrap().data());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let m = LlmModel::new(ModelConfig::tiny(), 17).unwrap();
    assert!(m.cpllm_predict(&history(1, 5, 2, 4, 0)).is_err());
    assert!(m.cpllm_predict(&history(1, 4, 3, 4, 0)).is_err());
    let mut bad = ModelConfig::tiny();
    bad.patch = 3;
    assert!(LlmModel::new(bad, 0).is_err());
}

#[test]
fn works_on_simulated_data() {
    let sc = ScenarioConfig {
        num_devices: 2,
        n_x: 2,
        n_y: 2,
        ..Default::default()
    };
    let d = build_dataset(&DatasetSpec::test(sc, 10, 4, 2, 1)).unwrap();
    let m = LlmModel::new(ModelConfig::tiny(), 18).unwrap();
    for s in &d.samples {
        let p = m.cpllm_predict(&s.past).unwrap();
        assert_eq!(p.shape(), s.future.shape());
        assert!(p.data().iter().all(|z| z.re.is_finite() && z.im.is_finite()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]
    #[test]
    fn predictions_are_deterministic(seed in 0u64..500) {
        let m = LlmModel::new(ModelConfig::tiny(), seed).unwrap();
        let past = tiny_past(seed + 1);
        prop_assert_eq!(m.cpllm_predict(&past).unwrap(), m.cpllm_predict(&past).unwrap());
        let again = LlmModel::new(ModelConfig::tiny(), seed).unwrap();
        prop_assert_eq!(again.params, m.params);
    }
}
