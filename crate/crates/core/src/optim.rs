//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moments for every parameter tensor, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Float = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update with learning rate `lr`. `grads[i]` belongs to the i-th
    /// store entry; `None` counts as a zero gradient.
    ///
    /// Per element, with `t` the new step count:
    /// `p <- p - lr*wd*p` (decaying parameters only), then
    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<&[T]>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments for {} parameters and {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.value.numel() {
                    return Err(Error::Shape(format!(
                        "gradient for {} has {} entries, expected {}",
                        p.name,
                        g.len(),
                        p.value.numel()
                    )));
                }
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let decay = if p.decay { lr * weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let g = grads[i].map_or(0.0, |g| g[j].as_f64());
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * g;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * g * g;
                m[j] = T::lit(mj);
                v[j] = T::lit(vj);
                let mut x = data[j].as_f64();
                if decay != 0.0 {
                    x -= decay * x;
                }
                if lr != 0.0 {
                    x -= lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                }
                data[j] = T::lit(x);
            }
        }
        Ok(())
    }
}
