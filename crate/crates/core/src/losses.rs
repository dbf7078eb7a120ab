//! Reconstruction and entropy objectives.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Weights of the two entropy terms in the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_pixel: f64,
    pub lambda_object: f64,
}

/// Training-objective switches; each removes a term or mechanism.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_object_entropy: bool,
    pub no_pixel_entropy: bool,
    pub no_masking: bool,
    pub no_class_token_noise: bool,
}

/// Tape nodes of one evaluation of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rec: Var,
    /// `None` when the term is ablated.
    pub pixel: Option<Var>,
    pub object: Option<Var>,
    pub total: Var,
}

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub pixel: f64,
    pub object: f64,
}

/// Mean squared error over all `H*W*C` entries.
pub fn loss_reconstruction<T: Float>(tape: &mut Tape<T>, composed: Var, target: &Tensor<T>) -> Result<Var> {
    tape.mse(composed, target)
}

/// Mean over pixels of `-sum_k m_k ln m_k` for masks `[B, K, P]`.
pub fn loss_pixel_entropy<T: Float>(tape: &mut Tape<T>, masks: Var) -> Result<Var> {
    tape.pixel_entropy(masks)
}

/// `-sum_k mbar_k ln mbar_k` with `mbar_k` the spatial mean of mask `k`,
/// averaged over the batch.
pub fn loss_object_entropy<T: Float>(tape: &mut Tape<T>, masks: Var) -> Result<Var> {
    tape.object_entropy(masks)
}

/// `rec + lambda_pixel * pixel + lambda_object * object`, leaving out ablated
/// terms. Fails with the term name when any present term is not finite.
pub fn loss_total<T: Float>(
    tape: &mut Tape<T>,
    rec: Var,
    pixel: Option<Var>,
    object: Option<Var>,
    weights: LossWeights,
) -> Result<Var> {
    let terms = [("reconstruction", Some(rec)), ("pixel entropy", pixel), ("object entropy", object)];
    for (name, v) in terms {
        if let Some(v) = v {
            if !tape.value(v).item().is_finite() {
                return Err(Error::NonFiniteTerm(name));
            }
        }
    }
    let mut total = rec;
    if let Some(p) = pixel {
        let w = tape.scale(p, T::lit(weights.lambda_pixel));
        total = tape.add(total, w)?;
    }
    if let Some(o) = object {
        let w = tape.scale(o, T::lit(weights.lambda_object));
        total = tape.add(total, w)?;
    }
    Ok(total)
}

/// Build all enabled terms for masks `[B,K,P]`, composed image `[B,P,C]` and
/// target `[B,P,C]`.
pub fn objective<T: Float>(
    tape: &mut Tape<T>,
    masks: Var,
    composed: Var,
    target: &Tensor<T>,
    weights: LossWeights,
    ablation: Ablation,
) -> Result<LossVars> {
    let rec = loss_reconstruction(tape, composed, target)?;
    let pixel = if ablation.no_pixel_entropy { None } else { Some(loss_pixel_entropy(tape, masks)?) };
    let object = if ablation.no_object_entropy { None } else { Some(loss_object_entropy(tape, masks)?) };
    let total = loss_total(tape, rec, pixel, object, weights)?;
    Ok(LossVars { rec, pixel, object, total })
}

impl LossVars {
    pub fn breakdown<T: Float>(&self, tape: &Tape<T>) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        LossBreakdown {
            total: get(Some(self.total)),
            rec: get(Some(self.rec)),
            pixel: get(self.pixel),
            object: get(self.object),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn masks_tensor(b: usize, k: usize, p: usize, per_pixel: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        let mut data = vec![0.0; b * k * p];
        for bi in 0..b {
            for c in 0..k {
                for px in 0..p {
                    data[(bi * k + c) * p + px] = per_pixel(bi, c, px);
                }
            }
        }
        Tensor::new(&[b, k, p], data).unwrap()
    }

    fn eval(m: Tensor<f64>) -> (f64, f64) {
        let mut t = Tape::new();
        let v = t.constant(m);
        let p = loss_pixel_entropy(&mut t, v).unwrap();
        let o = loss_object_entropy(&mut t, v).unwrap();
        (t.value(p).item(), t.value(o).item())
    }

    #[test]
    fn reconstruction_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new(&[2, 6, 3], (0..36).map(|_| rng.gen()).collect::<Vec<f64>>()).unwrap();
        let mut t = Tape::new();
        let same = t.constant(x.clone());
        let r = loss_reconstruction(&mut t, same, &x).unwrap();
        assert_eq!(t.value(r).item(), 0.0);

        let shifted = t.constant(Tensor::new(&[2, 6, 3], x.data().iter().map(|v| v + 0.1).collect()).unwrap());
        let r = loss_reconstruction(&mut t, shifted, &x).unwrap();
        assert!((t.value(r).item() - 0.01).abs() < 1e-12);

        let y = Tensor::new(&[2, 6, 3], (0..36).map(|_| rng.gen()).collect::<Vec<f64>>()).unwrap();
        let yv = t.constant(y.clone());
        let r = loss_reconstruction(&mut t, yv, &x).unwrap();
        let mut acc = 0.0;
        for i in 0..36 {
            acc += (y.data()[i] - x.data()[i]).powi(2);
        }
        assert!((t.value(r).item() - acc / 36.0).abs() < 1e-7);
    }

    #[test]
    fn entropy_extremes() {
        let (p, o) = eval(masks_tensor(2, 3, 10, |_, c, _| if c == 1 { 1.0 } else { 0.0 }));
        assert_eq!((p, o), (0.0, 0.0));
        let (p, o) = eval(masks_tensor(2, 4, 10, |_, _, _| 0.25));
        assert!((p - 4f64.ln()).abs() < 1e-12 && (o - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pixel_entropy_of_quarter_split() {
        let (p, _) = eval(masks_tensor(1, 2, 9, |_, c, _| if c == 0 { 0.25 } else { 0.75 }));
        let expect = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((p - expect).abs() < 1e-12);
        assert!((p - 0.5623).abs() < 1e-3);
    }

    #[test]
    fn object_entropy_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (b, k, p) = (3, 4, 12);
        let logits: Vec<f64> = (0..b * k * p).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut m = vec![0.0; b * k * p];
        for bi in 0..b {
            for px in 0..p {
                let z: f64 = (0..k).map(|c| logits[(bi * k + c) * p + px].exp()).sum();
                for c in 0..k {
                    m[(bi * k + c) * p + px] = logits[(bi * k + c) * p + px].exp() / z;
                }
            }
        }
        let mut oracle = 0.0;
        for bi in 0..b {
            for c in 0..k {
                let mut mean = 0.0;
                for px in 0..p {
                    mean += m[(bi * k + c) * p + px];
                }
                mean /= p as f64;
                oracle -= mean * mean.ln();
            }
        }
        oracle /= b as f64;
        let (_, o) = eval(Tensor::new(&[b, k, p], m).unwrap());
        assert!((o - oracle).abs() < 1e-6);
    }

    #[test]
    fn total_weighting_and_ablation() {
        let mut t = Tape::<f64>::new();
        let (r, p, o) = (
            t.constant(Tensor::scalar(1.0)),
            t.constant(Tensor::scalar(2.0)),
            t.constant(Tensor::scalar(3.0)),
        );
        let w = LossWeights { lambda_pixel: 0.1, lambda_object: 0.01 };
        let tot = loss_total(&mut t, r, Some(p), Some(o), w).unwrap();
        assert!((t.value(tot).item() - 1.23).abs() < 1e-12);
        let zero = LossWeights { lambda_pixel: 0.0, lambda_object: 0.0 };
        let tot = loss_total(&mut t, r, Some(p), Some(o), zero).unwrap();
        assert_eq!(t.value(tot).item(), 1.0);
        let tot = loss_total(&mut t, r, None, None, w).unwrap();
        assert_eq!(t.value(tot).item(), 1.0);

        let bad = t.constant(Tensor::scalar(f64::NAN));
        let err = loss_total(&mut t, r, Some(bad), Some(o), w).unwrap_err();
        assert!(err.to_string().contains("pixel entropy"), "{err}");
    }
}
