//! Figure-style grids of one image's decomposition.
//!
//! Six rows of `max(3, K)` cells, each cell one `H x W` image:
//!
//! 0. input
//! 1. composed reconstruction
//! 2. argmax segmentation in [`SEGMENT_PALETTE`] colors
//! 3. per-slot reconstructions weighted by their masks (on black)
//! 4. per-slot reconstructions without alpha
//! 5. per-slot attention maps over the patch grid, nearest-neighbour upsampled
//!
//! Rows 0–2 use only the first cell; unused cells stay white.

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::metrics::argmax_slots;
use crate::model::Model;
use crate::patch::MaskDraw;
use crate::tensor::Tensor;

pub const ROWS: usize = 6;

/// Slot colors for segmentations; slot `k` uses entry `k % len`.
pub const SEGMENT_PALETTE: [[u8; 3]; 12] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [0, 0, 0],
    [255, 255, 255],
];

/// An RGB8 raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    fn blank(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![255; width * height * 3] }
    }

    fn put(&mut self, y: usize, x: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

pub fn grid_columns(k: usize) -> usize {
    k.max(3)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Render the grid for a single `[1, H, W, C]` image (C = 3).
pub fn render_grid(model: &Model<f32>, image: &Tensor<f32>) -> Result<Raster> {
    let cfg = &model.config;
    let (h, w, k) = (cfg.height, cfg.width, cfg.k);
    if image.shape() != [1, h, w, 3] {
        return Err(Error::Shape(format!("viz expects one RGB image [1,{},{},3], got {:?}", h, w, image.shape())));
    }
    let grid = model.grid();
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape);
    let out = model.forward_with(&mut tape, &b, image, MaskDraw::full(1, grid.num_patches()), None)?;
    let masks = tape.value(out.scene.masks).data().to_vec();
    let rgb = tape.value(out.scene.per_slot_rgb).data().to_vec();
    let composed = tape.value(out.scene.composed).data().to_vec();
    let attn = tape.value(out.slots.attn).data().to_vec();

    let pixels = h * w;
    let mut r = Raster::blank(grid_columns(k) * w, ROWS * h);
    let cell = |r: &mut Raster, row: usize, col: usize, f: &dyn Fn(usize, usize) -> [u8; 3]| {
        for y in 0..h {
            for x in 0..w {
                r.put(row * h + y, col * w + x, f(y, x));
            }
        }
    };
    let input = image.data();
    let px = |buf: &[f32], off: usize| [to_byte(buf[off]), to_byte(buf[off + 1]), to_byte(buf[off + 2])];
    cell(&mut r, 0, 0, &|y, x| px(input, (y * w + x) * 3));
    cell(&mut r, 1, 0, &|y, x| px(&composed, (y * w + x) * 3));
    let labels = argmax_slots(&masks, k, pixels);
    cell(&mut r, 2, 0, &|y, x| SEGMENT_PALETTE[labels[y * w + x] % SEGMENT_PALETTE.len()]);
    for s in 0..k {
        cell(&mut r, 3, s, &|y, x| {
            let p = y * w + x;
            let m = masks[s * pixels + p];
            let o = (s * pixels + p) * 3;
            [to_byte(m * rgb[o]), to_byte(m * rgb[o + 1]), to_byte(m * rgb[o + 2])]
        });
        cell(&mut r, 4, s, &|y, x| px(&rgb, (s * pixels + y * w + x) * 3));
        cell(&mut r, 5, s, &|y, x| {
            let patch = (y / grid.patch) * grid.cols() + x / grid.patch;
            let g = to_byte(attn[patch * k + s]);
            [g, g, g]
        });
    }
    Ok(r)
}
