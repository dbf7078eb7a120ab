//! AdamW against an elementwise reference and its degenerate settings.

use ocmae_core::nn::ParamStore;
use ocmae_core::optim::{AdamW, AdamWConfig};
use ocmae_core::Tensor;

/// Direct transcription of decoupled AdamW for one scalar parameter.
struct Reference {
    m: f64,
    v: f64,
    t: i32,
}

impl Reference {
    fn step(&mut self, p: f64, g: f64, lr: f64, c: &AdamWConfig, decay: bool) -> f64 {
        self.t += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let m_hat = self.m / (1.0 - c.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - c.beta2.powi(self.t));
        let wd = if decay { c.weight_decay } else { 0.0 };
        p - lr * wd * p - lr * m_hat / (v_hat.sqrt() + c.eps)
    }
}

#[test]
fn matches_reference_on_three_parameter_problem() {
    // f(a, b, c) = (a - 1)^2 + 3 (b + 2)^2 + a c, with c exempt from decay
    let mut store = ParamStore::<f64>::new();
    let ida = store.add("a", Tensor::scalar(0.5), true);
    let idb = store.add("b", Tensor::scalar(-0.3), true);
    let idc = store.add("c", Tensor::scalar(1.2), false);
    let cfg = AdamWConfig::default();
    let mut opt = AdamW::new(cfg, &store);
    let mut refs = [Reference { m: 0.0, v: 0.0, t: 0 }, Reference { m: 0.0, v: 0.0, t: 0 }, Reference { m: 0.0, v: 0.0, t: 0 }];
    let mut want = [0.5, -0.3, 1.2];
    for step in 0..200 {
        let lr = 1e-2 * (1.0 + (step as f64 * 0.1).cos()) / 2.0 + 1e-4;
        let [a, b, c] = want;
        let g = [2.0 * (a - 1.0) + c, 6.0 * (b + 2.0), a];
        for i in 0..3 {
            want[i] = refs[i].step(want[i], g[i], lr, &cfg, i < 2);
        }
        let grads: Vec<Vec<f64>> = g.iter().map(|&x| vec![x]).collect();
        let views: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
        opt.update(&mut store, &views, lr).unwrap();
        for (id, w) in [ida, idb, idc].into_iter().zip(want) {
            assert!((store.get(id).value.item() - w).abs() < 1e-7, "step {step}");
        }
    }
    assert_eq!(opt.step, 200);
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 0.4, 1e-7, -9.0]).unwrap(), true);
    store.add("bias", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), false);
    let before = store.clone();
    for wd in [0.05, 0.0] {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: wd, ..Default::default() }, &store);
        let g1 = vec![0.5f32; 6];
        let g2 = vec![-0.5f32; 3];
        opt.update(&mut store, &[Some(&g1), Some(&g2)], 0.0).unwrap();
        for (a, b) in store.iter().zip(before.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        assert!(opt.m[0].iter().all(|&m| m != 0.0), "moments still accumulate");
    }
}

#[test]
fn decay_is_decoupled_and_skips_exempt_parameters() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::scalar(2.0), true);
    store.add("class_tokens", Tensor::scalar(2.0), false);
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    let zero = [0.0];
    opt.update(&mut store, &[Some(&zero), Some(&zero)], 0.1).unwrap();
    let vals: Vec<f64> = store.iter().map(|p| p.value.item()).collect();
    assert!((vals[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    assert_eq!(vals[1], 2.0);
}

#[test]
fn mismatched_gradients_are_rejected() {
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::zeros(&[4]), true);
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    assert!(opt.update(&mut store, &[], 0.1).is_err());
    let short = [0.0f32; 3];
    assert!(opt.update(&mut store, &[Some(&short)], 0.1).is_err());
}
