//! Patch extraction, fixed 2-D sine-cosine positional codes and random
//! patch masking.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Geometry of a patch grid over an `H x W x C` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}x{} patches",
                height, width, patch, patch
            )));
        }
        Ok(Self { height, width, channels, patch })
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Patch index and offset-within-patch (in pixels) of image pixel `(y, x)`.
    pub fn locate(&self, y: usize, x: usize) -> (usize, usize) {
        let p = self.patch;
        ((y / p) * self.cols() + x / p, (y % p) * p + x % p)
    }
}

/// `[B, H, W, C]` images into `[B, N, P*P*C]` row-major patches.
pub fn patchify<T: Float>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("patchify expects [B,H,W,C], got {:?}", s)));
    }
    let grid = PatchGrid::new(s[1], s[2], s[3], patch)?;
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (n, pd) = (grid.num_patches(), grid.patch_dim());
    let src = images.data();
    let mut out = vec![T::zero(); b * n * pd];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (t, o) = grid.locate(y, x);
                let from = ((bi * h + y) * w + x) * c;
                let to = (bi * n + t) * pd + o * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Tensor::new(&[b, n, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Float>(patches: &Tensor<T>, grid: PatchGrid) -> Result<Tensor<T>> {
    let s = patches.shape();
    if s.len() != 3 || s[1] != grid.num_patches() || s[2] != grid.patch_dim() {
        return Err(Error::Shape(format!("unpatchify: {:?} does not fit {:?}", s, grid)));
    }
    let (b, h, w, c) = (s[0], grid.height, grid.width, grid.channels);
    let (n, pd) = (grid.num_patches(), grid.patch_dim());
    let src = patches.data();
    let mut out = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (t, o) = grid.locate(y, x);
                let from = (bi * n + t) * pd + o * c;
                let to = ((bi * h + y) * w + x) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Tensor::new(&[b, h, w, c], out)
}

fn sincos_1d(pos: f64, dim: usize, out: &mut [f64]) {
    let n_sin = dim.div_ceil(2);
    for (j, slot) in out.iter_mut().enumerate().take(dim) {
        let i = if j < n_sin { j } else { j - n_sin };
        let omega = 1.0 / 10000f64.powf(i as f64 / n_sin as f64);
        *slot = if j < n_sin { (pos * omega).sin() } else { (pos * omega).cos() };
    }
}

/// Fixed 2-D sine-cosine codes for a `rows x cols` grid, shape `[rows*cols, dim]`.
///
/// The first half of the channels encodes the row, the second half the
/// column; each half is a sine block followed by a cosine block.
pub fn positional_encoding<T: Float>(rows: usize, cols: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("positional encoding dim {} must be even and positive", dim)));
    }
    let half = dim / 2;
    let mut data = vec![T::zero(); rows * cols * dim];
    let mut buf = vec![0.0; half];
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut data[(r * cols + c) * dim..(r * cols + c + 1) * dim];
            sincos_1d(r as f64, half, &mut buf);
            for (d, v) in row[..half].iter_mut().zip(&buf) {
                *d = T::lit(*v);
            }
            sincos_1d(c as f64, half, &mut buf);
            for (d, v) in row[half..].iter_mut().zip(&buf) {
                *d = T::lit(*v);
            }
        }
    }
    Tensor::new(&[rows * cols, dim], data)
}

/// Visible/hidden partition of patch indices for every batch item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskDraw {
    /// Per item, the visible patch ids in encoder order.
    pub unmasked_ids: Vec<Vec<usize>>,
    pub masked_ids: Vec<Vec<usize>>,
    pub n_total: usize,
}

impl MaskDraw {
    /// `round(n_total * (1 - ratio))`, never below one visible patch.
    pub fn visible_count(n_total: usize, ratio: f64) -> usize {
        let v = (n_total as f64 * (1.0 - ratio)).round() as usize;
        v.clamp(1.min(n_total), n_total)
    }

    /// Independent uniform draw without replacement per batch item.
    pub fn sample<R: Rng>(batch: usize, n_total: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("masking ratio {} outside [0, 1)", ratio)));
        }
        let keep = Self::visible_count(n_total, ratio);
        let mut unmasked_ids = Vec::with_capacity(batch);
        let mut masked_ids = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut perm: Vec<usize> = (0..n_total).collect();
            if keep < n_total {
                perm.shuffle(rng);
            }
            masked_ids.push(perm.split_off(keep));
            unmasked_ids.push(perm);
        }
        Ok(Self { unmasked_ids, masked_ids, n_total })
    }

    /// Every patch visible, in natural order.
    pub fn full(batch: usize, n_total: usize) -> Self {
        Self {
            unmasked_ids: vec![(0..n_total).collect(); batch],
            masked_ids: vec![Vec::new(); batch],
            n_total,
        }
    }

    pub fn batch(&self) -> usize {
        self.unmasked_ids.len()
    }

    pub fn n_unmasked(&self) -> usize {
        self.unmasked_ids.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let nu = self.n_unmasked();
        for (u, m) in self.unmasked_ids.iter().zip(&self.masked_ids) {
            let mut seen = vec![false; self.n_total];
            if u.len() != nu || u.len() + m.len() != self.n_total {
                return Err(Error::Shape("mask partition has inconsistent sizes".into()));
            }
            for &i in u.iter().chain(m) {
                if i >= self.n_total || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Shape(format!("mask partition is not a permutation (index {})", i)));
                }
            }
        }
        Ok(())
    }
}

/// Visible patch tokens together with the partition that selected them.
#[derive(Clone, Debug)]
pub struct PatchState {
    /// `[B, N_unmasked, D]`.
    pub tokens_unmasked: Var,
    pub mask: MaskDraw,
}

impl PatchState {
    pub fn n_total(&self) -> usize {
        self.mask.n_total
    }
}

/// Keep only the visible tokens of `tokens` (`[B, N, D]`) according to `mask`.
pub fn apply_mask<T: Float>(tape: &mut Tape<T>, tokens: Var, mask: MaskDraw) -> Result<PatchState> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 || s[0] != mask.batch() || s[1] != mask.n_total {
        return Err(Error::Shape(format!("apply_mask: tokens {:?} vs mask over {} patches", s, mask.n_total)));
    }
    mask.validate()?;
    let (b, n, d) = (s[0], s[1], s[2]);
    let nu = mask.n_unmasked();
    let mut idx = Vec::with_capacity(b * nu * d);
    for (bi, ids) in mask.unmasked_ids.iter().enumerate() {
        for &t in ids {
            idx.extend((0..d).map(|c| (bi * n + t) * d + c));
        }
    }
    let tokens_unmasked = tape.gather(tokens, idx, &[b, nu, d])?;
    Ok(PatchState { tokens_unmasked, mask })
}

/// Draw a fresh mask at `ratio` and apply it.
pub fn random_mask<T: Float, R: Rng>(tape: &mut Tape<T>, tokens: Var, ratio: f64, rng: &mut R) -> Result<PatchState> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("random_mask expects [B,N,D], got {:?}", s)));
    }
    let mask = MaskDraw::sample(s[0], s[1], ratio, rng)?;
    apply_mask(tape, tokens, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(b: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[b, h, w, c], (0..b * h * w * c).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn whole_image_patch() {
        let img = image(1, 5, 5, 3, 0);
        let p = patchify(&img, 5).unwrap();
        assert_eq!(p.shape(), &[1, 1, 75]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn tetromino_scale_patch_count() {
        let p = patchify(&image(2, 35, 35, 3, 1), 5).unwrap();
        assert_eq!(p.shape(), &[2, 49, 75]);
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let img = image(2, 12, 8, 3, 2);
        let grid = PatchGrid::new(12, 8, 3, 4).unwrap();
        assert_eq!(unpatchify(&patchify(&img, 4).unwrap(), grid).unwrap(), img);
    }

    #[test]
    fn indivisible_resolution_is_config_error() {
        assert!(matches!(patchify(&image(1, 10, 10, 3, 0), 4), Err(Error::Config(_))));
    }

    #[test]
    fn positional_codes_are_bounded_distinct_and_fixed() {
        let pe: Tensor<f64> = positional_encoding(8, 8, 16).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let rows: Vec<&[f64]> = pe.data().chunks(16).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "positions {} and {} collide", i, j);
            }
        }
        assert_eq!(pe, positional_encoding(8, 8, 16).unwrap());
        assert!(matches!(positional_encoding::<f32>(7, 7, 15), Err(Error::Config(_))));
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MaskDraw::sample(3, 64, 0.75, &mut rng).unwrap();
        assert_eq!(m.n_unmasked(), 16);
        m.validate().unwrap();
        let m = MaskDraw::sample(2, 49, 0.0, &mut rng).unwrap();
        assert_eq!(m.n_unmasked(), 49);
        assert!(m.masked_ids.iter().all(Vec::is_empty));
        assert!(MaskDraw::sample(1, 49, 1.0, &mut rng).is_err());
    }

    #[test]
    fn masked_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 16;
        let mut counts = vec![0usize; n];
        let draws = 10_000;
        for _ in 0..draws {
            let m = MaskDraw::sample(1, n, 0.5, &mut rng).unwrap();
            for &i in &m.masked_ids[0] {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() <= 0.02, "frequency {}", f);
        }
    }

    #[test]
    fn apply_mask_keeps_token_rows() {
        let mut tape = Tape::<f32>::new();
        let tok = Tensor::new(&[1, 4, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let t = tape.constant(tok);
        let mask = MaskDraw { unmasked_ids: vec![vec![2, 0]], masked_ids: vec![vec![1, 3]], n_total: 4 };
        let st = apply_mask(&mut tape, t, mask).unwrap();
        assert_eq!(tape.value(st.tokens_unmasked).data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
