//! Entropy regularizers: bounds over random mask fields and their equality
//! cases, plus the weighted total.

mod common;

use ocmae_core::autograd::Tape;
use ocmae_core::losses::{loss_object_entropy, loss_pixel_entropy, objective, Ablation, LossWeights};
use ocmae_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn entropies(masks: Tensor<f64>) -> (f64, f64) {
    let mut t = Tape::new();
    let m = t.constant(masks);
    let p = loss_pixel_entropy(&mut t, m).unwrap();
    let o = loss_object_entropy(&mut t, m).unwrap();
    (t.value(p).item(), t.value(o).item())
}

#[test]
fn entropies_are_bounded_by_log_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for case in 0..1000 {
        let (masks, k) = common::random_mask_field(&mut rng);
        let (pix, obj) = entropies(masks);
        let log_k = (k as f64).ln();
        assert!((0.0..=log_k + 1e-12).contains(&pix), "case {case}: pixel {pix} vs {log_k}");
        assert!((0.0..=log_k + 1e-12).contains(&obj), "case {case}: object {obj} vs {log_k}");
    }
}

#[test]
fn one_hot_and_uniform_fields_hit_the_bounds() {
    for k in 1..=8 {
        let (b, p) = (2, 12);
        let log_k = (k as f64).ln();
        let uniform = Tensor::full(&[b, k, p], 1.0 / k as f64);
        let (pix, obj) = entropies(uniform);
        assert!((pix - log_k).abs() <= 1e-6 && (obj - log_k).abs() <= 1e-6);

        // every pixel owned by slot 0: both entropies vanish
        let mut single = Tensor::zeros(&[b, k, p]);
        for bi in 0..b {
            for px in 0..p {
                single.data_mut()[(bi * k) * p + px] = 1.0;
            }
        }
        let (pix, obj) = entropies(single);
        assert!(pix.abs() <= 1e-6 && obj.abs() <= 1e-6);

        // one-hot pixels spread evenly over slots: certain pixels, uniform usage
        let p = 3 * k;
        let mut spread = Tensor::zeros(&[b, k, p]);
        for bi in 0..b {
            for px in 0..p {
                spread.data_mut()[(bi * k + px % k) * p + px] = 1.0;
            }
        }
        let (pix, obj) = entropies(spread);
        assert!(pix.abs() <= 1e-6 && (obj - log_k).abs() <= 1e-6);
    }
}

#[test]
fn single_precision_entropies_stay_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let (masks, k) = common::random_mask_field(&mut rng);
        let mut t = Tape::<f32>::new();
        let m = t.constant(masks.cast());
        let p = loss_pixel_entropy(&mut t, m).unwrap();
        let o = loss_object_entropy(&mut t, m).unwrap();
        let log_k = (k as f32).ln();
        for v in [t.value(p).item(), t.value(o).item()] {
            assert!(v.is_finite() && v >= 0.0 && v <= log_k + 1e-5, "{v}");
        }
    }
}

#[test]
fn objective_weights_and_ablations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (masks, _) = common::random_mask_field(&mut rng);
    let (b, p) = (masks.shape()[0], masks.shape()[2]);
    let composed: Tensor<f64> = Tensor::new(&[b, p, 3], (0..b * p * 3).map(|_| rng.gen()).collect()).unwrap();
    let target: Tensor<f64> = Tensor::new(&[b, p, 3], (0..b * p * 3).map(|_| rng.gen()).collect()).unwrap();
    let rec_want: f64 =
        composed.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (b * p * 3) as f64;
    let (pix, obj) = entropies(masks.clone());
    let w = LossWeights { lambda_pixel: 3e-3, lambda_object: 1e-2 };
    let run = |ablation: Ablation| {
        let mut t = Tape::new();
        let m = t.constant(masks.clone());
        let c = t.constant(composed.clone());
        objective(&mut t, m, c, &target, w, ablation).unwrap().breakdown(&t)
    };
    let full = run(Ablation::default());
    assert!((full.rec - rec_want).abs() < 1e-12);
    assert!((full.total - (rec_want + 3e-3 * pix + 1e-2 * obj)).abs() < 1e-12);
    let none = run(Ablation { no_pixel_entropy: true, no_object_entropy: true, ..Default::default() });
    assert_eq!((none.pixel, none.object), (0.0, 0.0));
    assert_eq!(none.total, none.rec);
}
