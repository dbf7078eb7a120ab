//! The object-centric masked autoencoder: a ViT encoder carrying K class
//! tokens, the dot-product object function, the broadcasting module, a
//! shared per-slot ViT decoder and the alpha-mixture composition.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, BlockConfig, BlockParams, Bindings, LayerNormParams, LinearParams, ParamId, ParamStore};
use crate::patch::{apply_mask, patchify, positional_encoding, MaskDraw, PatchGrid, PatchState};
use crate::tensor::{Float, Tensor};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of class tokens (slots).
    pub k: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads_enc: usize,
    pub heads_dec: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_token_init_std: f64,
    /// Std of the Gaussian noise added to class tokens during warmup.
    pub class_token_noise_std: f64,
    /// Added to the column sums when pooling slots.
    pub epsilon: f64,
    /// Added inside the logarithm of the attention masks.
    pub log_epsilon: f64,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.height, self.width, self.channels, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if self.k == 0 {
            return Err(Error::Config("model.k must be at least 1".into()));
        }
        if self.d_enc % 2 != 0 || self.d_dec % 2 != 0 {
            return Err(Error::Config("embed dims must be even for sine-cosine codes".into()));
        }
        BlockConfig { dim: self.d_enc, heads: self.heads_enc, mlp_ratio: self.mlp_ratio }.validate()?;
        BlockConfig { dim: self.d_dec, heads: self.heads_dec, mlp_ratio: self.mlp_ratio }.validate()?;
        if self.class_token_init_std <= 0.0 {
            return Err(Error::Config("model.class_token_init_std must be positive".into()));
        }
        if grid.num_patches() == 0 {
            return Err(Error::Config("image has no patches".into()));
        }
        Ok(())
    }
}

/// Parameter handles of the whole architecture.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub patch_embed: LinearParams,
    pub class_tokens: ParamId,
    pub enc_blocks: Vec<BlockParams>,
    pub enc_norm: LayerNormParams,
    pub slot_embed: LinearParams,
    pub mask_token: ParamId,
    pub dec_blocks: Vec<BlockParams>,
    pub dec_norm: LayerNormParams,
    pub head: LinearParams,
}

#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub params: ModelParams,
    grid: PatchGrid,
    enc_pos: Tensor<T>,
    dec_pos: Tensor<T>,
}

/// Outputs of the object function (all tape nodes).
#[derive(Clone, Copy, Debug)]
pub struct SlotState {
    /// `[B, K, D_enc]`.
    pub slots: Var,
    /// `[B, N_unmasked, K]`, rows sum to one.
    pub attn: Var,
    /// `[B, N_unmasked, K]`, columns sum to (almost) one.
    pub weights: Var,
}

/// Decoder outputs with pixels flattened row-major (`P = H * W`).
#[derive(Clone, Copy, Debug)]
pub struct DecodedScene {
    /// `[B, K, P, C]`.
    pub per_slot_rgb: Var,
    /// `[B, K, P]`.
    pub alpha_logits: Var,
    /// `[B, K, P]`, softmax of the alpha logits over K.
    pub masks: Var,
    /// `[B, P, C]`.
    pub composed: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub patches: PatchState,
    pub slots: SlotState,
    pub scene: DecodedScene,
}

/// Sample i.i.d. `N(0, std^2)` class-token embeddings.
pub fn init_class_tokens<T: Float, R: Rng>(k: usize, d: usize, std: f64, rng: &mut R) -> Result<Tensor<T>> {
    if std.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("class token std must be positive, got {}", std)));
    }
    Ok(normal(rng, &[k, d], std))
}

impl<T: Float> Model<T> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let mut store = ParamStore::new();
        let enc_cfg = BlockConfig { dim: config.d_enc, heads: config.heads_enc, mlp_ratio: config.mlp_ratio };
        let dec_cfg = BlockConfig { dim: config.d_dec, heads: config.heads_dec, mlp_ratio: config.mlp_ratio };

        let patch_embed = LinearParams::init(&mut store, rng, "encoder.patch_embed", grid.patch_dim(), config.d_enc);
        let cls = init_class_tokens(config.k, config.d_enc, config.class_token_init_std, rng)?;
        let class_tokens = store.add("encoder.class_tokens", cls, false);
        let enc_blocks = (0..config.enc_depth)
            .map(|i| BlockParams::init(&mut store, rng, &format!("encoder.blocks.{i}"), enc_cfg))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNormParams::init(&mut store, "encoder.norm", config.d_enc);
        let slot_embed = LinearParams::init(&mut store, rng, "broadcast.embed", config.d_enc + 1, config.d_dec);
        let mask_token = store.add("broadcast.mask_token", normal(rng, &[1, config.d_dec], 0.02), false);
        let dec_blocks = (0..config.dec_depth)
            .map(|i| BlockParams::init(&mut store, rng, &format!("decoder.blocks.{i}"), dec_cfg))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNormParams::init(&mut store, "decoder.norm", config.d_dec);
        let head_out = config.patch * config.patch * (config.channels + 1);
        let head = LinearParams::init(&mut store, rng, "decoder.head", config.d_dec, head_out);

        let params = ModelParams {
            patch_embed,
            class_tokens,
            enc_blocks,
            enc_norm,
            slot_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            head,
        };
        Ok(Self::assemble(config, store, params)?)
    }

    fn assemble(config: ModelConfig, store: ParamStore<T>, params: ModelParams) -> Result<Self> {
        let grid = config.grid()?;
        let enc_pos = positional_encoding(grid.rows(), grid.cols(), config.d_enc)?;
        let dec_pos = positional_encoding(grid.rows(), grid.cols(), config.d_dec)?;
        Ok(Self { config, store, params, grid, enc_pos, dec_pos })
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model::assemble(self.config.clone(), self.store.cast(), self.params.clone()).expect("validated config")
    }

    /// Replace every parameter value, checking names and shapes.
    pub fn load_store(&mut self, store: ParamStore<T>) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.store.len(),
                store.len()
            )));
        }
        for (mine, theirs) in self.store.iter().zip(store.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        self.store = store;
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    /// Embed all patches of `[B,H,W,C]` images and add the encoder positional codes.
    pub fn embed_patches(&self, tape: &mut Tape<T>, b: &Bindings, images: &Tensor<T>) -> Result<Var> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.height || s[2] != self.config.width || s[3] != self.config.channels {
            return Err(Error::Shape(format!(
                "images {:?} do not match model resolution {}x{}x{}",
                s, self.config.height, self.config.width, self.config.channels
            )));
        }
        let patches = tape.constant(patchify(images, self.config.patch)?);
        let tokens = self.params.patch_embed.forward(tape, b, patches)?;
        let pos = tape.constant(self.enc_pos.clone());
        tape.add_broadcast(tokens, pos)
    }

    /// Run the encoder over `[class tokens; visible patches]`.
    ///
    /// `class_noise`, when given, has shape `[B, K, D_enc]` and is added to the
    /// class tokens before concatenation. Returns `(C, Z)`.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        patches: &PatchState,
        class_noise: Option<&Tensor<T>>,
    ) -> Result<(Var, Var)> {
        let (k, d) = (self.config.k, self.config.d_enc);
        let zs = tape.shape(patches.tokens_unmasked).to_vec();
        let (batch, nu) = (zs[0], zs[1]);
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..k * d).collect();
        let mut cls = tape.gather(b.var(self.params.class_tokens), idx, &[batch, k, d])?;
        if let Some(noise) = class_noise {
            if noise.shape() != [batch, k, d] {
                return Err(Error::Shape(format!("class noise {:?}, expected {:?}", noise.shape(), [batch, k, d])));
            }
            let nv = tape.constant(noise.clone());
            cls = tape.add(cls, nv)?;
        }
        let mut x = tape.concat(cls, patches.tokens_unmasked, 1)?;
        for blk in &self.params.enc_blocks {
            x = blk.forward(tape, b, x)?;
        }
        x = self.params.enc_norm.forward(tape, b, x)?;
        let total = k + nu;
        let split = |lo: usize, hi: usize| -> Vec<usize> {
            (0..batch).flat_map(|bi| (lo..hi).flat_map(move |t| (0..d).map(move |c| (bi * total + t) * d + c))).collect()
        };
        let c_out = tape.gather(x, split(0, k), &[batch, k, d])?;
        let z_out = tape.gather(x, split(k, total), &[batch, nu, d])?;
        Ok((c_out, z_out))
    }

    /// `A = softmax_K(Z C^T / sqrt(D))`, `w_ik = a_ik / (sum_i a_ik + eps)`,
    /// `s_k = sum_i w_ik z_i`.
    pub fn object_function(&self, tape: &mut Tape<T>, c: Var, z: Var) -> Result<SlotState> {
        object_function(tape, c, z, T::lit(self.config.epsilon))
    }

    /// Build the `[B*K, N_total, D_dec]` decoder input for every slot.
    pub fn broadcast(&self, tape: &mut Tape<T>, b: &Bindings, slots: &SlotState, mask: &MaskDraw) -> Result<Var> {
        let ss = tape.shape(slots.slots).to_vec();
        let (batch, k) = (ss[0], ss[1]);
        let (n, nu, dd) = (mask.n_total, mask.n_unmasked(), self.config.d_dec);
        if mask.batch() != batch || tape.shape(slots.attn)[1] != nu {
            return Err(Error::Shape("broadcast: mask partition does not match slot state".into()));
        }
        let log_a = tape.log(slots.attn, T::lit(self.config.log_epsilon));
        let stacked = tape.slot_broadcast(slots.slots, log_a)?;
        let embedded = self.params.slot_embed.forward(tape, b, stacked)?;
        let rows = tape.reshape(embedded, &[batch * k * nu, dd])?;
        let with_mask = tape.concat(rows, b.var(self.params.mask_token), 0)?;
        let mask_row = batch * k * nu;
        // unshuffle: visible positions take their slot row, the rest the mask token
        let mut src_row = vec![mask_row; batch * k * n];
        for bi in 0..batch {
            for (i, &pos) in mask.unmasked_ids[bi].iter().enumerate() {
                for c in 0..k {
                    src_row[(bi * k + c) * n + pos] = (bi * k + c) * nu + i;
                }
            }
        }
        let idx: Vec<usize> = src_row.iter().flat_map(|&r| (0..dd).map(move |c| r * dd + c)).collect();
        let seq = tape.gather(with_mask, idx, &[batch * k, n, dd])?;
        let pos = tape.constant(self.dec_pos.clone());
        tape.add_broadcast(seq, pos)
    }

    /// Decode every slot sequence with the shared decoder and compose the mixture.
    pub fn decode(&self, tape: &mut Tape<T>, b: &Bindings, tokens: Var, batch: usize) -> Result<DecodedScene> {
        let mut x = tokens;
        for blk in &self.params.dec_blocks {
            x = blk.forward(tape, b, x)?;
        }
        x = self.params.dec_norm.forward(tape, b, x)?;
        let out = self.params.head.forward(tape, b, x)?;
        let g = self.grid;
        let (k, ch, p2) = (self.config.k, g.channels, g.patch * g.patch);
        let (n, feat, pixels) = (g.num_patches(), p2 * (ch + 1), g.pixels());
        let mut rgb_idx = Vec::with_capacity(batch * k * pixels * ch);
        let mut alpha_idx = Vec::with_capacity(batch * k * pixels);
        for seq in 0..batch * k {
            for y in 0..g.height {
                for xx in 0..g.width {
                    let (t, o) = g.locate(y, xx);
                    let base = (seq * n + t) * feat;
                    rgb_idx.extend((0..ch).map(|c| base + o * ch + c));
                    alpha_idx.push(base + p2 * ch + o);
                }
            }
        }
        let per_slot_rgb = tape.gather(out, rgb_idx, &[batch, k, pixels, ch])?;
        let alpha_logits = tape.gather(out, alpha_idx, &[batch, k, pixels])?;
        let masks = tape.softmax(alpha_logits, 1)?;
        let composed = tape.mixture(masks, per_slot_rgb)?;
        Ok(DecodedScene { per_slot_rgb, alpha_logits, masks, composed })
    }

    /// Full pass for a given mask partition and optional class-token noise.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        images: &Tensor<T>,
        mask: MaskDraw,
        class_noise: Option<&Tensor<T>>,
    ) -> Result<ForwardOutput> {
        let batch = images.shape()[0];
        let tokens = self.embed_patches(tape, b, images)?;
        let patches = apply_mask(tape, tokens, mask)?;
        let (c, z) = self.encode(tape, b, &patches, class_noise)?;
        let slots = self.object_function(tape, c, z)?;
        let dec_in = self.broadcast(tape, b, &slots, &patches.mask)?;
        let scene = self.decode(tape, b, dec_in, batch)?;
        Ok(ForwardOutput { patches, slots, scene })
    }

    /// Full pass drawing the mask (and noise, if `noise_std > 0`) from `rng`.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        images: &Tensor<T>,
        mask_ratio: f64,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let batch = images.shape()[0];
        let mask = MaskDraw::sample(batch, self.grid.num_patches(), mask_ratio, rng)?;
        let noise = if noise_std > 0.0 {
            let dist = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
            let shape = [batch, self.config.k, self.config.d_enc];
            let n = shape.iter().product();
            Some(Tensor::new(&shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())?)
        } else {
            None
        };
        self.forward_with(tape, b, images, mask, noise.as_ref())
    }
}

/// The object function on encoded class tokens `c` `[B,K,D]` and patches `z` `[B,N,D]`.
pub fn object_function<T: Float>(tape: &mut Tape<T>, c: Var, z: Var, epsilon: T) -> Result<SlotState> {
    let d = *tape.shape(z).last().unwrap_or(&0);
    if tape.shape(c).last() != Some(&d) {
        return Err(Error::Shape(format!(
            "object function: class tokens {:?} vs patches {:?}",
            tape.shape(c),
            tape.shape(z)
        )));
    }
    let logits = tape.bmm(z, c, false, true)?;
    let logits = tape.scale(logits, T::one() / T::lit(d as f64).sqrt());
    let attn = tape.softmax(logits, 2)?;
    let weights = tape.normalize_columns(attn, epsilon)?;
    let slots = tape.bmm(weights, z, true, false)?;
    Ok(SlotState { slots, attn, weights })
}
