//! Parameter storage and the transformer building blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Float> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Float = f32> {
    params: Vec<Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Record every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(self.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
    }

    /// All parameters concatenated in store order.
    pub fn flatten(&self) -> Tensor<T> {
        let data: Vec<T> = self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect();
        let n = data.len();
        Tensor::new(&[n], data).unwrap()
    }

    /// Bind parameters as slices of a single flat leaf, so a gradient check
    /// over `flat` covers every parameter at once.
    pub fn bind_flat(&self, tape: &mut Tape<T>, flat: Var) -> Result<Bindings> {
        let mut offset = 0;
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let n = p.value.numel();
            vars.push(tape.gather(flat, (offset..offset + n).collect(), p.value.shape())?);
            offset += n;
        }
        if offset != tape.value(flat).numel() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, store needs {}",
                tape.value(flat).numel(),
                offset
            )));
        }
        Ok(Bindings(vars))
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), decay: p.decay })
                .collect(),
        }
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

pub fn xavier_uniform<T: Float, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::lit(rng.gen_range(-a..a))).collect();
    Tensor::new(&[fan_in, fan_out], data).unwrap()
}

pub fn normal<T: Float, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect()).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, din: usize, dout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, din, dout), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]), false);
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        linear(tape, x, b.var(self.weight), Some(b.var(self.bias)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one()), false);
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false);
        Self { gamma, beta }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, b.var(self.gamma), b.var(self.beta))
    }
}

/// Affine map along the last axis.
pub fn linear<T: Float>(tape: &mut Tape<T>, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    tape.linear(input, weight, bias)
}

/// Softmax along `axis`.
pub fn softmax<T: Float>(tape: &mut Tape<T>, input: Var, axis: usize) -> Result<Var> {
    tape.softmax(input, axis)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Self-attention sublayer: packed QKV projection, scaled dot-product
/// attention per head, output projection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub qkv: LinearParams,
    pub proj: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            qkv: LinearParams::init(store, rng, &format!("{name}.qkv"), cfg.dim, 3 * cfg.dim),
            proj: LinearParams::init(store, rng, &format!("{name}.proj"), cfg.dim, cfg.dim),
            heads: cfg.heads,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, b: &Bindings, tokens: Var) -> Result<Var> {
        multi_head_attention(tape, b, self, tokens)
    }
}

/// Multi-head self-attention over the token axis of `[B, N, D]`.
pub fn multi_head_attention<T: Float>(
    tape: &mut Tape<T>,
    b: &Bindings,
    p: &AttentionParams,
    tokens: Var,
) -> Result<Var> {
    let qkv = p.qkv.forward(tape, b, tokens)?;
    let mixed = tape.attention(qkv, p.heads)?;
    p.proj.forward(tape, b, mixed)
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl BlockParams {
    pub fn init<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: BlockConfig) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::init(store, &format!("{name}.norm1"), cfg.dim),
            attn: AttentionParams::init(store, rng, &format!("{name}.attn"), cfg)?,
            norm2: LayerNormParams::init(store, &format!("{name}.norm2"), cfg.dim),
            fc1: LinearParams::init(store, rng, &format!("{name}.mlp.fc1"), cfg.dim, cfg.dim * cfg.mlp_ratio),
            fc2: LinearParams::init(store, rng, &format!("{name}.mlp.fc2"), cfg.dim * cfg.mlp_ratio, cfg.dim),
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        transformer_block(tape, b, self, x)
    }
}

pub fn transformer_block<T: Float>(tape: &mut Tape<T>, b: &Bindings, p: &BlockParams, x: Var) -> Result<Var> {
    let h = p.norm1.forward(tape, b, x)?;
    let h = p.attn.forward(tape, b, h)?;
    let x = tape.add(x, h)?;
    let h = p.norm2.forward(tape, b, x)?;
    let h = p.fc1.forward(tape, b, h)?;
    let h = tape.gelu(h);
    let h = p.fc2.forward(tape, b, h)?;
    tape.add(x, h)
}
