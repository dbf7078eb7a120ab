//! Shared fixtures and independent oracles for the integration tests.

#![allow(dead_code)]

use ocmae_core::autograd::{grad_check, GradCheckReport, Tape, Var};
use ocmae_core::data::{render_scene, Dataset, Sample, SceneSpec};
use ocmae_core::losses::{objective, Ablation, LossWeights};
use ocmae_core::model::{Model, ModelConfig};
use ocmae_core::nn::{BlockConfig, BlockParams, ParamStore};
use ocmae_core::patch::MaskDraw;
use ocmae_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-3;
pub const OBJECTIVE_TOL: f64 = 1e-2;
const STEP: f64 = 1e-3;

/// In-memory desk-resolution scenes from the default generator.
pub fn scenes(n: usize, seed: u64) -> Dataset {
    let spec = SceneSpec { seed, ..Default::default() };
    let samples = (0..n as u64)
        .map(|i| {
            let s = render_scene(&spec, i).unwrap();
            Sample { image: s.image.iter().map(|&b| b as f32 / 255.0).collect(), mask: s.mask }
        })
        .collect();
    Dataset { height: spec.height, width: spec.width, channels: 3, samples }
}

/// A 6x4 model with 2x2 patches, small enough for finite differences.
pub fn toy_config(k: usize) -> ModelConfig {
    ModelConfig {
        k,
        d_enc: 8,
        d_dec: 8,
        enc_depth: 2,
        dec_depth: 1,
        heads_enc: 2,
        heads_dec: 2,
        patch: 2,
        height: 6,
        width: 4,
        channels: 3,
        class_token_init_std: 0.3,
        class_token_noise_std: 0.0,
        epsilon: 1e-8,
        log_epsilon: 1e-12,
        mlp_ratio: 2,
    }
}

pub fn toy_model(cfg: ModelConfig, seed: u64) -> Model<f64> {
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn toy_images(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * cfg.height * cfg.width * cfg.channels;
    Tensor::new(&[b, cfg.height, cfg.width, cfg.channels], (0..n).map(|_| rng.gen()).collect()).unwrap()
}

/// Check `f` with respect to several inputs packed into one flat point.
/// The scalar is `sum(out * R)` for a fixed random `R`, so that outputs with
/// constant sums (softmax) still produce informative gradients.
pub fn op_check<F>(seed: u64, shapes: &[&[usize]], range: (f64, f64), f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let point = Tensor::new(&[total], (0..total).map(|_| rng.gen_range(range.0..range.1)).collect()).unwrap();
    grad_check(
        |tape, flat| {
            let mut off = 0;
            let inputs: Vec<Var> = shapes
                .iter()
                .zip(&sizes)
                .map(|(s, &n)| {
                    let v = tape.gather(flat, (off..off + n).collect(), s).unwrap();
                    off += n;
                    v
                })
                .collect();
            let out = f(tape, &inputs);
            let shape = tape.shape(out).to_vec();
            let n: usize = shape.iter().product();
            let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let r = tape.constant(Tensor::new(&shape, (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect()).unwrap());
            let prod = tape.mul(out, r).unwrap();
            tape.sum(prod)
        },
        &point,
        STEP,
        OP_TOL,
    )
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=8))
}

pub type Reports = Vec<(&'static str, GradCheckReport)>;

pub fn elementwise_reports(seed: u64) -> Reports {
    let (a, b) = dims(&mut ChaCha8Rng::seed_from_u64(seed));
    vec![
        ("add", op_check(seed, &[&[a, b], &[a, b]], (-1.0, 1.0), |t, v| t.add(v[0], v[1]).unwrap())),
        ("add_broadcast", op_check(seed, &[&[a, b], &[b]], (-1.0, 1.0), |t, v| t.add_broadcast(v[0], v[1]).unwrap())),
        ("mul", op_check(seed, &[&[a, b], &[a, b]], (-1.0, 1.0), |t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", op_check(seed, &[&[a, b]], (-1.0, 1.0), |t, v| t.scale(v[0], -0.7))),
        ("gelu", op_check(seed, &[&[a, b]], (-2.0, 2.0), |t, v| t.gelu(v[0]))),
        ("log", op_check(seed, &[&[a, b]], (0.2, 2.0), |t, v| t.log(v[0], 1e-12))),
        ("sum", op_check(seed, &[&[a, b]], (-1.0, 1.0), |t, v| t.sum(v[0]))),
        ("mean", op_check(seed, &[&[a, b]], (-1.0, 1.0), |t, v| t.mean(v[0]))),
        ("reshape", op_check(seed, &[&[a, b]], (-1.0, 1.0), |t, v| t.reshape(v[0], &[b, a]).unwrap())),
    ]
}

pub fn matmul_reports(seed: u64) -> Reports {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k) = dims(&mut rng);
    let n = rng.gen_range(1..=8);
    let mut out = vec![
        ("linear", op_check(seed, &[&[2, m, k], &[k, n], &[n]], (-1.0, 1.0), |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap())),
        ("linear_no_bias", op_check(seed, &[&[m, k], &[k, n]], (-1.0, 1.0), |t, v| t.linear(v[0], v[1], None).unwrap())),
    ];
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: [usize; 3] = if ta { [2, k, m] } else { [2, m, k] };
        let sb: [usize; 3] = if tb { [2, n, k] } else { [2, k, n] };
        out.push(("bmm", op_check(seed, &[&sa, &sb], (-1.0, 1.0), |t, v| t.bmm(v[0], v[1], ta, tb).unwrap())));
    }
    out
}

pub fn normalization_reports(seed: u64) -> Reports {
    let (a, b) = dims(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out: Reports = (0..3)
        .map(|axis| ("softmax", op_check(seed, &[&[2, a, b]], (-2.0, 2.0), |t, v| t.softmax(v[0], axis).unwrap())))
        .collect();
    let b2 = b.max(2);
    out.push((
        "layer_norm",
        op_check(seed, &[&[a, b2], &[b2], &[b2]], (-1.0, 1.0), |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()),
    ));
    out.push((
        "normalize_columns",
        op_check(seed, &[&[2, a, b]], (0.1, 1.0), |t, v| t.normalize_columns(v[0], 1e-8).unwrap()),
    ));
    out
}

pub fn structural_reports(seed: u64) -> Reports {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = dims(&mut rng);
    let c = rng.gen_range(1..=4);
    let n = a * b;
    let idx: Vec<usize> = (0..2 * n).map(|i| (i * 7 + seed as usize) % n).collect();
    vec![
        ("concat1", op_check(seed, &[&[2, a, b], &[2, c, b]], (-1.0, 1.0), |t, v| t.concat(v[0], v[1], 1).unwrap())),
        ("concat0", op_check(seed, &[&[a, b], &[c, b]], (-1.0, 1.0), |t, v| t.concat(v[0], v[1], 0).unwrap())),
        ("gather", op_check(seed, &[&[a, b]], (-1.0, 1.0), |t, v| t.gather(v[0], idx.clone(), &[2, n]).unwrap())),
        (
            "slot_broadcast",
            op_check(seed, &[&[2, c, b], &[2, a, c]], (-1.0, 1.0), |t, v| t.slot_broadcast(v[0], v[1]).unwrap()),
        ),
        ("mixture", op_check(seed, &[&[2, c, a], &[2, c, a, 3]], (0.0, 1.0), |t, v| t.mixture(v[0], v[1]).unwrap())),
    ]
}

pub fn attention_reports(seed: u64) -> Reports {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4);
    let heads = [1usize, 2, 4][rng.gen_range(0..3)];
    vec![("attention", op_check(seed, &[&[2, n, 3 * 8]], (-1.0, 1.0), |t, v| t.attention(v[0], heads).unwrap()))]
}

pub fn loss_reports(seed: u64) -> Reports {
    let (a, b) = dims(&mut ChaCha8Rng::seed_from_u64(seed));
    let target = Tensor::new(&[a, b], (0..a * b).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    // masks through a softmax keep the entropy inputs normalized and positive
    let k = a.max(2);
    vec![
        ("mse", op_check(seed, &[&[a, b]], (-1.0, 1.0), |t, v| t.mse(v[0], &target).unwrap())),
        (
            "pixel_entropy",
            op_check(seed, &[&[2, k, b]], (-2.0, 2.0), |t, v| {
                let m = t.softmax(v[0], 1).unwrap();
                t.pixel_entropy(m).unwrap()
            }),
        ),
        (
            "object_entropy",
            op_check(seed, &[&[2, k, b]], (-2.0, 2.0), |t, v| {
                let m = t.softmax(v[0], 1).unwrap();
                t.object_entropy(m).unwrap()
            }),
        ),
    ]
}

/// A pre-norm transformer block (input and every parameter) and its
/// multi-head attention alone, on a `[1, 4, 8]` input.
pub fn block_reports(seed: u64) -> Reports {
    let mut prng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = BlockConfig { dim: 8, heads: 2, mlp_ratio: 4 };
    let block = BlockParams::init(&mut store, &mut prng, "blk", cfg).unwrap();
    // perturb LN affine so that gradients through gamma/beta are non-trivial
    for p in store.iter_mut() {
        if p.name.contains("norm") {
            for v in p.value.data_mut() {
                *v += prng.gen_range(-0.3..0.3);
            }
        }
    }
    let n_params = store.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    point.extend(store.flatten().data());
    let point = Tensor::new(&[32 + n_params], point).unwrap();
    let full = grad_check(
        |t, flat| {
            let x = t.gather(flat, (0..32).collect(), &[1, 4, 8]).unwrap();
            let pflat = t.gather(flat, (32..32 + n_params).collect(), &[n_params]).unwrap();
            let b = store.bind_flat(t, pflat).unwrap();
            let y = block.forward(t, &b, x).unwrap();
            t.sum(y)
        },
        &point,
        STEP,
        OP_TOL,
    );
    let x_only = Tensor::new(&[32], point.data()[..32].to_vec()).unwrap();
    let mha = grad_check(
        |t, flat| {
            let x = t.reshape(flat, &[1, 4, 8]).unwrap();
            let b = store.bind(t);
            let y = block.attn.forward(t, &b, x).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq)
        },
        &x_only,
        STEP,
        OP_TOL,
    );
    vec![("transformer_block", full), ("multi_head_attention", mha)]
}

/// Every core-math check for one seed.
pub fn all_op_reports(seed: u64) -> Reports {
    let mut out = elementwise_reports(seed);
    out.extend(matmul_reports(seed));
    out.extend(normalization_reports(seed));
    out.extend(structural_reports(seed));
    out.extend(attention_reports(seed));
    out.extend(loss_reports(seed));
    out.extend(block_reports(seed));
    out
}

/// Finite differences of the full objective (all three terms) with respect
/// to every parameter: K=2, two images, half the patches masked, noise on.
pub fn objective_report(seed: u64) -> GradCheckReport {
    let m = toy_model(toy_config(2), 28 + seed);
    let x = toy_images(2, &m.config, 29 + seed);
    let target = x.clone().reshape(&[2, 24, 3]).unwrap();
    let mask = MaskDraw::sample(2, 6, 0.5, &mut ChaCha8Rng::seed_from_u64(30 + seed)).unwrap();
    let noise = Tensor::new(&[2, 2, 8], (0..32).map(|i| (i as f64 * 0.7).sin() * 0.05).collect()).unwrap();
    let w = LossWeights { lambda_pixel: 0.05, lambda_object: 0.05 };
    let point = m.store.flatten();
    grad_check(
        |t, flat| {
            let b = m.store.bind_flat(t, flat).unwrap();
            let out = m.forward_with(t, &b, &x, mask.clone(), Some(&noise)).unwrap();
            objective(t, out.scene.masks, out.scene.composed, &target, w, Ablation::default()).unwrap().total
        },
        &point,
        STEP,
        OBJECTIVE_TOL,
    )
}

/// Adjusted Rand index from pair counts (Hubert & Arabie), independent of
/// the contingency-table implementation. Degenerate cases score 1.
pub fn ari_pair_oracle(a: &[usize], b: &[usize]) -> f64 {
    let (mut n11, mut n10, mut n01, mut n00) = (0.0f64, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => n11 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
                (false, false) => n00 += 1.0,
            }
        }
    }
    let denom = (n11 + n01) * (n01 + n00) + (n11 + n10) * (n10 + n00);
    if denom == 0.0 {
        1.0
    } else {
        2.0 * (n11 * n00 - n10 * n01) / denom
    }
}

/// Cheapest total cost of a complete matching on a square matrix, by
/// enumerating every permutation.
pub fn brute_force_min_cost(costs: &[Vec<f64>]) -> f64 {
    fn go(costs: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == costs.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(costs, row + 1, used, acc + costs[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(costs, 0, &mut vec![false; costs.first().map_or(0, Vec::len)], 0.0, &mut best);
    best
}

/// All labelings of length `n` over `labels` symbols, in lexicographic order.
pub fn all_labelings(n: usize, labels: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..labels).map(move |l| {
                    let mut p = prefix.clone();
                    p.push(l);
                    p
                })
            })
            .collect();
    }
    out
}

/// `[B, K, P]` masks normalized over K from random positive (sometimes sparse) weights.
pub fn random_mask_field(rng: &mut ChaCha8Rng) -> (Tensor<f64>, usize) {
    let (b, k, p) = (rng.gen_range(1..=3), rng.gen_range(1..=7), rng.gen_range(1..=30));
    let sparse = rng.gen_bool(0.3);
    let mut data: Vec<f64> =
        (0..b * k * p).map(|_| if sparse && rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..1.0f64).powi(3) }).collect();
    for bi in 0..b {
        for px in 0..p {
            let idx = |s: usize| (bi * k + s) * p + px;
            let mut z: f64 = (0..k).map(|s| data[idx(s)]).sum();
            if z == 0.0 {
                data[idx(rng.gen_range(0..k))] = 1.0;
                z = 1.0;
            }
            for s in 0..k {
                data[idx(s)] /= z;
            }
        }
    }
    (Tensor::new(&[b, k, p], data).unwrap(), k)
}
