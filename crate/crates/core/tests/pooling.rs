use lsepool_core::graph::Graph;
use lsepool_core::pooling::{
    nor_log_complement, pool_avg, pool_gm, pool_lse, pool_lse_lba, pool_max, pool_nor, pool_nor_log, PoolingSpec,
};
use lsepool_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// mpmath at 50 digits: 4096 · ln(0.99)
const LOG_COMPLEMENT_4096_AT_001: f64 = -41.166_175_655_941_903;
// mpmath at 50 digits: 0.99^4096
const PRODUCT_4096_AT_001: f64 = 1.323_600_954_164_523e-18;

fn map(min_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, min_len..64)
}

fn non_constant(s: &[f64]) -> bool {
    s.iter().any(|&v| v != s[0])
}

proptest! {
    #[test]
    fn lse_lba_lies_between_mean_and_max(s in map(1), r0 in 0.0f64..20.0, beta in -3.0f64..3.0) {
        let p = pool_lse_lba(&s, r0, beta).unwrap().p;
        let avg = pool_avg(&s).unwrap().p;
        let max = pool_max(&s).unwrap().p;
        prop_assert!(p >= avg - 1e-12, "p {p} < avg {avg}");
        prop_assert!(p <= max + 1e-12, "p {p} > max {max}");
    }

    #[test]
    fn weights_form_a_distribution(s in map(1), r0 in 0.0f64..20.0, beta in -3.0f64..3.0) {
        let w = pool_lse_lba(&s, r0, beta).unwrap().grad_s;
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn sharper_pooling_is_larger(s in map(2), r0 in 0.0f64..10.0, beta in -2.0f64..2.0, dr in 0.5f64..5.0) {
        prop_assume!(non_constant(&s));
        let lo = pool_lse_lba(&s, r0, beta).unwrap().p;
        let hi = pool_lse_lba(&s, r0 + dr, beta).unwrap().p;
        prop_assert!(hi > lo, "r0 {r0} -> {}: {lo} !< {hi}", r0 + dr);
        let hb = pool_lse_lba(&s, r0, beta + 0.5).unwrap().p;
        prop_assert!(hb > lo);
    }

    #[test]
    fn beta_gradient_is_non_negative(s in map(1), r0 in 0.0f64..10.0, beta in -2.0f64..2.0) {
        // p is non-decreasing in r, and r is increasing in beta
        let g = pool_lse_lba(&s, r0, beta).unwrap().grad_beta.unwrap();
        prop_assert!(g >= -1e-15);
    }

    #[test]
    fn permutation_does_not_change_the_pool(s in map(2), seed in any::<u64>(), r0 in 0.0f64..10.0) {
        let mut shuffled = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = pool_lse_lba(&s, r0, 0.0).unwrap().p;
        let b = pool_lse_lba(&shuffled, r0, 0.0).unwrap().p;
        prop_assert!((a - b).abs() <= 1e-14);
    }

    #[test]
    fn output_is_a_probability(s in map(1), r0 in 0.0f64..1e3, beta in -10.0f64..10.0) {
        let p = pool_lse_lba(&s, r0, beta).unwrap().p;
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn beta_gradient_matches_central_difference(s in map(2), r0 in 0.0f64..10.0, beta in -2.0f64..2.0) {
        let h = 1e-5;
        let g = pool_lse_lba(&s, r0, beta).unwrap().grad_beta.unwrap();
        let fd = (pool_lse_lba(&s, r0, beta + h).unwrap().p - pool_lse_lba(&s, r0, beta - h).unwrap().p) / (2.0 * h);
        prop_assert!((g - fd).abs() <= 1e-7 + 1e-5 * g.abs(), "{g} vs {fd}");
    }
}

#[test]
fn boundary_maps_pool_to_themselves() {
    for r0 in [0.0f64, 5.0, 10.0] {
        for beta in [-2.0f64, 0.0, 2.0] {
            assert!(pool_lse_lba(&[0.0; 256], r0, beta).unwrap().p.abs() <= 1e-12);
            assert!((pool_lse_lba(&[1.0; 256], r0, beta).unwrap().p - 1.0).abs() <= 1e-12);
            for c in [0.013, 0.5, 0.97] {
                assert!((pool_lse_lba(&[c; 256], r0, beta).unwrap().p - c).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn limits_recover_mean_and_max() {
    let s = [0.1f64, 0.7, 0.3, 0.9, 0.2];
    let mean = 0.44;
    assert!((pool_lse(&s, 1e-6).unwrap().p - mean).abs() < 1e-6);
    // p ≥ max − ln(n)/r
    let p = pool_lse(&s, 1e4).unwrap().p;
    assert!(p <= 0.9 && p >= 0.9 - (5f64).ln() / 1e4);
}

#[test]
fn lse_lba_equals_lse_at_its_effective_sharpness() {
    let s = [0.05, 0.6, 0.33, 0.81];
    let spec = PoolingSpec::LseLba { r0: 5.0, beta: 0.7 };
    let r = spec.effective_sharpness().unwrap();
    assert!((r - (5.0 + 0.7f64.exp())).abs() < 1e-15);
    assert_eq!(spec.pool(&s).unwrap().p, pool_lse(&s, r).unwrap().p);
}

#[test]
fn out_of_range_inputs_are_rejected() {
    assert!(pool_lse_lba(&[0.5, 1.2], 5.0, 0.0).is_err());
    assert!(pool_lse_lba(&[0.5, f64::NAN], 5.0, 0.0).is_err());
    assert!(pool_lse_lba::<f64>(&[], 5.0, 0.0).is_err());
    assert!(pool_lse_lba(&[0.5], -1.0, 0.0).is_err());
    assert!(pool_gm(&[0.5], 0.0).is_err());
}

#[test]
fn naive_generalized_mean_underflows() {
    // the true value of the mean of a constant map is the constant itself
    let tiny = vec![1e-9f64; 64];
    assert_eq!(pool_gm(&tiny, 40.0).unwrap().p, 0.0);
    let small = vec![1e-4f32; 64];
    assert_eq!(pool_gm(&small, 40.0).unwrap().p, 0.0);

    let lse = pool_lse_lba(&small, 39.0, 0.0).unwrap();
    assert!((lse.p - 1e-4).abs() <= 1e-4 * 1e-5);
    assert!(lse.grad_s.iter().all(|g| g.is_finite()));
}

#[test]
fn naive_noisy_or_saturates() {
    let s = vec![0.01f64; 4096];
    assert_eq!(pool_nor(&s).unwrap().p, 1.0);

    let log_c = nor_log_complement(&s).unwrap();
    assert!((log_c - LOG_COMPLEMENT_4096_AT_001).abs() <= 1e-12 * LOG_COMPLEMENT_4096_AT_001.abs());
    assert!((log_c.exp() - PRODUCT_4096_AT_001).abs() <= 1e-12 * PRODUCT_4096_AT_001);
    // 1 − 1.3e-18 rounds to 1 either way; only the log form keeps the complement
    assert_eq!(1.0 - pool_nor(&s).unwrap().p, 0.0);
    assert_eq!(pool_nor_log(&s).unwrap(), 1.0);
    assert!((pool_lse_lba(&s, 5.0, 0.0).unwrap().p - 0.01).abs() <= 1e-12);
}

#[test]
fn large_map_with_sharp_pooling_stays_finite() {
    let side = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for r0 in [150.0, 1e3] {
        let s = Tensor::<f64>::uniform([1, 1, side, side], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let sv = g.param(s);
        let beta = g.param(Tensor::full([1, 1, 1, 1], 8f64.ln()));
        let p = g.pool_lse_lba(sv, r0, beta).unwrap();
        let loss = g.sum(p);
        let value = g.value(p).data()[0];
        let r = r0 + 8.0;
        let max = g.value(sv).data().iter().copied().fold(0.0, f64::max);
        assert!(value.is_finite() && value <= max && value >= max - ((side * side) as f64).ln() / r);
        let grads = g.backward(loss).unwrap();
        let gs = grads.get(sv).unwrap();
        assert!(gs.is_finite());
        assert!((gs.sum() - 1.0).abs() <= 1e-10);
        assert!(grads.get(beta).unwrap().is_finite());
    }
}

#[test]
fn f32_and_f64_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
    let s32: Vec<f32> = s.iter().map(|&v| v as f32).collect();
    let a = pool_lse_lba(&s, 5.0, 0.3).unwrap();
    let b = pool_lse_lba(&s32, 5.0, 0.3).unwrap();
    assert!((a.p - b.p as f64).abs() < 1e-5);
    assert!((a.grad_beta.unwrap() - b.grad_beta.unwrap() as f64).abs() < 1e-5);
}
