//! Property tests of numerical invariants.

use candle_core::{Device, Tensor};
use proptest::prelude::*;
use vidistill::consistency::{ema_update, Parametrization};
use vidistill::discriminator::{d_hinge_loss, g_hinge_loss, pixel_shuffle};
use vidistill::distill::huber_d;
use vidistill::nn::ParamSet;
use vidistill::samplers::{build_schedule, Spacing};

fn set(v: &[f32]) -> ParamSet {
    let mut s = ParamSet::new();
    s.insert("p", &Tensor::new(v, &Device::Cpu).unwrap()).unwrap();
    s
}

fn values(s: &ParamSet) -> Vec<f32> {
    s.get("p").unwrap().as_tensor().to_vec1::<f32>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ema_is_a_contraction_toward_theta(
        pairs in prop::collection::vec((-100f32..100f32, -100f32..100f32), 1..16),
        decay in 0f64..1f64,
    ) {
        let (s0, th): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let shadow = set(&s0);
        ema_update(decay, &shadow, &set(&th)).unwrap();
        for ((a, b), t) in s0.iter().zip(values(&shadow)).zip(&th) {
            let before = (a - t).abs() as f64;
            let after = (b - t).abs() as f64;
            prop_assert!(after <= decay * before + 1e-4 * (1.0 + before));
        }
    }

    #[test]
    fn hinge_losses_are_non_negative(real in -10f32..10f32, fake in -10f32..10f32) {
        let r = Tensor::new(&[real], &Device::Cpu).unwrap();
        let f = Tensor::new(&[fake], &Device::Cpu).unwrap();
        prop_assert!(d_hinge_loss(&r, &f).unwrap().to_scalar::<f32>().unwrap() >= 0.0);
        prop_assert!(g_hinge_loss(&f).unwrap().to_scalar::<f32>().unwrap() >= 0.0);
    }

    #[test]
    fn huber_is_non_negative_symmetric_and_below_euclidean(
        xs in prop::collection::vec((-5f64..5f64, -5f64..5f64), 1..12),
        c in 1e-4f64..1.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
        let x = Tensor::new(a.as_slice(), &Device::Cpu).unwrap();
        let y = Tensor::new(b.as_slice(), &Device::Cpu).unwrap();
        let d = huber_d(&x, &y, c).unwrap().to_scalar::<f64>().unwrap();
        let e = huber_d(&y, &x, c).unwrap().to_scalar::<f64>().unwrap();
        let l2 = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d >= 0.0);
        prop_assert!((d - e).abs() < 1e-12);
        prop_assert!(d <= l2 + 1e-12);
    }

    #[test]
    fn pixel_shuffle_preserves_elements(n in 1usize..3, c in 1usize..3, r in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let total = n * c * r * r * h * w;
        let x = Tensor::arange(0f32, total as f32, &Device::Cpu).unwrap().reshape((n, c * r * r, h, w)).unwrap();
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.dims(), &[n, c, h * r, w * r]);
        let mut v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        v.sort_by(|a, b| a.total_cmp(b));
        prop_assert!(v.iter().enumerate().all(|(i, &x)| x == i as f32));
    }

    #[test]
    fn schedules_interleave(k in 1usize..64, rho in 1f64..10f64) {
        for spacing in [Spacing::Uniform, Spacing::Power { rho }] {
            let s = build_schedule(k, spacing, 0.002, 80.0).unwrap();
            prop_assert!(s.is_interleaved());
            prop_assert_eq!(s.coarse.len(), k + 1);
        }
    }

    #[test]
    fn skip_and_out_coefficients_stay_bounded(t in 0.002f64..80.0) {
        let p = Parametrization::default();
        let s = p.c_skip(t);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!(p.c_out(t) >= 0.0 && p.c_out(t) <= p.sigma_data + 1e-12);
    }
}

#[test]
fn zero_decay_copies_and_unit_decay_freezes() {
    let shadow = set(&[1.0, 2.0]);
    ema_update(1.0, &shadow, &set(&[5.0, 6.0])).unwrap();
    assert_eq!(values(&shadow), vec![1.0, 2.0]);
    ema_update(0.0, &shadow, &set(&[5.0, 6.0])).unwrap();
    assert_eq!(values(&shadow), vec![5.0, 6.0]);
}
