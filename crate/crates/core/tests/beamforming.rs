use leocsi::beamform::{
    mrt, sinr, sum_rate, wmmse, zero_forcing, zero_forcing_with, BeamformingMatrix, LinkConfig,
    WmmseOptions, ZfPower,
};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_channel(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<Complex64> {
    (0..k * n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) / 2f64.sqrt()
        })
        .collect()
}

fn e(n: usize, i: usize) -> Vec<Complex64> {
    (0..n)
        .map(|j| Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0))
        .collect()
}

#[test]
fn wmmse_trace_is_monotone_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let link = LinkConfig::new(0.1, 1.0).unwrap();
    for inst in 0..100 {
        let h = random_channel(&mut rng, 4, 8);
        let init = mrt(&h, 4, link.total_power).unwrap();
        let (w, trace) = wmmse(&h, link, &init, WmmseOptions::default()).unwrap();
        for pair in trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "instance {inst}: {trace:?}");
        }
        let p = w.power();
        assert!((p - link.total_power).abs() <= 1e-6 * link.total_power);
        let mrt_rate = sum_rate(&h, &init, link.noise_power).unwrap();
        assert!(*trace.last().unwrap() >= mrt_rate - 1e-9);
    }
}

#[test]
fn wmmse_single_user_reaches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let h = random_channel(&mut rng, 1, 8);
        let link = LinkConfig::new(0.1, 1.0).unwrap();
        // deliberately poor start
        let init = BeamformingMatrix::new(1, 8, e(8, 0)).unwrap();
        let opts = WmmseOptions {
            tol: 1e-12,
            max_iter: 200,
        };
        let (_, trace) = wmmse(&h, link, &init, opts).unwrap();
        let gain: f64 = h.iter().map(|z| z.norm_sqr()).sum();
        let oracle = (1.0 + link.total_power * gain / link.noise_power).log2();
        assert!((trace.last().unwrap() - oracle).abs() < 1e-6, "{trace:?} vs {oracle}");
    }
}

#[test]
fn wmmse_orthogonal_two_users_matches_grid_search() {
    let mut h = e(2, 0);
    h.extend(e(2, 1));
    let link = LinkConfig::new(1.0, 2.0).unwrap();
    // brute-force power split oracle
    let best = (0..=2000)
        .map(|i| {
            let p1 = 2.0 * i as f64 / 2000.0;
            (1.0 + p1).log2() + (1.0 + 2.0 - p1).log2()
        })
        .fold(f64::MIN, f64::max);
    assert!((best - 2.0).abs() < 1e-12);
    let skewed = BeamformingMatrix::new(
        2,
        2,
        vec![
            Complex64::new(0.9, 0.1),
            Complex64::new(0.2, 0.0),
            Complex64::new(0.0, 0.1),
            Complex64::new(0.3, -0.2),
        ],
    )
    .unwrap();
    let (w, trace) = wmmse(&h, link, &skewed, WmmseOptions::default()).unwrap();
    assert!((trace.last().unwrap() - 2.0).abs() < 1e-4, "{trace:?}");
    assert!((w.power() - 2.0).abs() < 1e-6 * 2.0);
}

#[test]
fn mrt_and_zf_meet_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let h = random_channel(&mut rng, 4, 8);
        let m = mrt(&h, 4, 1.0).unwrap();
        assert!((m.power() - 1.0).abs() < 1e-9);
        let z = zero_forcing(&h, 4, 1.0).unwrap();
        assert!((z.power() - 1.0).abs() < 1e-9);
        for k in 0..4 {
            assert!((z.row(k).iter().map(|v| v.norm_sqr()).sum::<f64>() - 0.25).abs() < 1e-12);
        }
        let wf = zero_forcing_with(&h, 4, LinkConfig::new(0.1, 1.0).unwrap(), ZfPower::WaterFilling)
            .unwrap();
        assert!((wf.power() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zf_nulls_interference() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = random_channel(&mut rng, 3, 6);
    let w = zero_forcing(&h, 3, 1.0).unwrap();
    for j in 0..3 {
        for k in 0..3 {
            let g: Complex64 = h[j * 6..(j + 1) * 6]
                .iter()
                .zip(w.row(k))
                .map(|(a, b)| a.conj() * b)
                .sum();
            if j != k {
                assert!(g.norm() < 1e-8, "h_{j}^H w_{k} = {g}");
            } else {
                assert!(g.norm() > 1e-3);
            }
        }
    }
}

#[test]
fn zf_equals_mrt_on_orthonormal_channels() {
    let s = 0.5f64.sqrt();
    let h = vec![
        Complex64::new(s, 0.0),
        Complex64::new(0.0, s),
        Complex64::new(0.0, s),
        Complex64::new(s, 0.0),
    ];
    let z = zero_forcing(&h, 2, 1.0).unwrap();
    let m = mrt(&h, 2, 1.0).unwrap();
    for (a, b) in z.data().iter().zip(m.data()) {
        assert!((a - b).norm() < 1e-12, "{a} vs {b}");
    }
}

proptest! {
    #[test]
    fn rate_invariant_to_row_phase(seed in 0u64..1000, k in 0usize..3, phase in 0.0f64..6.283) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_channel(&mut rng, 3, 4);
        let w = BeamformingMatrix::new(3, 4, random_channel(&mut rng, 3, 4)).unwrap();
        let mut rotated = w.clone();
        let r = Complex64::from_polar(1.0, phase);
        rotated.row_mut(k).iter_mut().for_each(|z| *z *= r);
        let a = sinr(&h, &w, 0.1).unwrap();
        let b = sinr(&h, &rotated, 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn sinr_nonnegative_and_power_scaling_helps(seed in 0u64..1000, c in 1.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_channel(&mut rng, 2, 4);
        let w = BeamformingMatrix::new(2, 4, random_channel(&mut rng, 2, 4)).unwrap();
        let mut louder = w.clone();
        louder.scale_to_power(w.power() * c).unwrap();
        let a = sinr(&h, &w, 0.1).unwrap();
        let b = sinr(&h, &louder, 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(*x >= 0.0);
            prop_assert!(*y >= *x - 1e-12);
        }
    }
}
