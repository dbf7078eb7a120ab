//! Synthetic multi-object scenes with exact ground-truth masks, the on-disk
//! dataset layout and its loader.
//!
//! A dataset directory holds `manifest.txt` (one `img_%06d.png<TAB>mask_%06d.png`
//! line per sample), RGB8 image PNGs and gray8 mask PNGs whose pixel value is
//! the object label (0 = background, 1..n = objects back to front).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    TetrominoL,
    TetrominoT,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::TetrominoL,
        ShapeKind::TetrominoT,
        ShapeKind::Bar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::TetrominoL => "tetromino-L",
            ShapeKind::TetrominoT => "tetromino-T",
            ShapeKind::Bar => "bar",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown shape `{}`", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Color([u8; 3]),
    /// A uniformly drawn gray level per image.
    GrayRandom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ShapeKind>,
    /// Inclusive range of objects drawn per scene.
    pub object_count: (usize, usize),
    /// Inclusive range of object extents in pixels.
    pub object_size: (usize, usize),
    pub palette: Vec<[u8; 3]>,
    pub background: Background,
    pub allow_overlap: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 35,
            width: 35,
            shapes: ShapeKind::ALL.to_vec(),
            object_count: (1, 3),
            object_size: (9, 15),
            palette: vec![
                [230, 25, 75],
                [60, 180, 75],
                [255, 225, 25],
                [0, 130, 200],
                [245, 130, 48],
                [145, 30, 180],
                [70, 240, 240],
            ],
            background: Background::Color([0, 0, 0]),
            allow_overlap: false,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.object_count;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!("object count range ({}, {}) is invalid", lo, hi)));
        }
        if hi > 255 {
            return Err(Error::Config("at most 255 objects fit in a gray8 mask".into()));
        }
        let (smin, smax) = self.object_size;
        if smin < 2 || smax < smin || smax > self.height.min(self.width) {
            return Err(Error::Config(format!("object size range ({}, {}) does not fit the image", smin, smax)));
        }
        if self.shapes.is_empty() || self.palette.is_empty() {
            return Err(Error::Config("scene needs at least one shape and one color".into()));
        }
        Ok(())
    }
}

/// One scene: `H x W x 3` bytes and `H x W` labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
    pub objects: usize,
}

struct Placed {
    kind: ShapeKind,
    top: f64,
    left: f64,
    size: f64,
    rotation: u8,
}

impl Placed {
    /// Hard-edged coverage of pixel `(y, x)` tested at its center.
    fn covers(&self, y: usize, x: usize) -> bool {
        let u = (y as f64 + 0.5 - self.top) / self.size;
        let v = (x as f64 + 0.5 - self.left) / self.size;
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        let (u, v) = rotate(u, v, self.rotation);
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeKind::Triangle => (v - 0.5).abs() <= u * 0.5,
            ShapeKind::Bar => (u - 0.5).abs() < 1.0 / 6.0,
            ShapeKind::TetrominoL | ShapeKind::TetrominoT => {
                let (r, c) = ((u * 3.0) as usize, (v * 3.0) as usize);
                let cells: &[(usize, usize)] = if self.kind == ShapeKind::TetrominoL {
                    &[(0, 0), (1, 0), (2, 0), (2, 1)]
                } else {
                    &[(0, 0), (0, 1), (0, 2), (1, 1)]
                };
                cells.contains(&(r, c))
            }
        }
    }
}

fn rotate(u: f64, v: f64, quarter_turns: u8) -> (f64, f64) {
    match quarter_turns % 4 {
        0 => (u, v),
        1 => (v, 1.0 - u),
        2 => (1.0 - u, 1.0 - v),
        _ => (1.0 - v, u),
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for item `index` of a stream seeded by `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

/// Render scene `index` of `spec`.
pub fn render_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    let mut rng = stream_rng(spec.seed, index);
    let (h, w) = (spec.height, spec.width);
    let count = rng.gen_range(spec.object_count.0..=spec.object_count.1);
    let mut colors: Vec<[u8; 3]> = spec.palette.clone();
    colors.shuffle(&mut rng);
    let background = match spec.background {
        Background::Color(c) => c,
        Background::GrayRandom => {
            let g = rng.gen::<u8>();
            [g, g, g]
        }
    };

    let mut owner = vec![0u8; h * w];
    let mut fills: Vec<[u8; 3]> = Vec::with_capacity(count);
    for obj in 0..count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let size = rng.gen_range(spec.object_size.0..=spec.object_size.1) as f64;
            let cand = Placed {
                kind: spec.shapes[rng.gen_range(0..spec.shapes.len())],
                top: rng.gen_range(0.0..=(h as f64 - size)),
                left: rng.gen_range(0.0..=(w as f64 - size)),
                size,
                rotation: rng.gen_range(0..4),
            };
            let cover: Vec<usize> =
                (0..h * w).filter(|&i| cand.covers(i / w, i % w)).collect();
            if cover.is_empty() {
                continue;
            }
            if !spec.allow_overlap && cover.iter().any(|&i| owner[i] != 0) {
                continue;
            }
            placed = Some(cover);
            break;
        }
        let cover = placed.ok_or_else(|| {
            Error::Config(format!(
                "could not place object {} of scene {} in {} tries",
                obj + 1,
                index,
                MAX_PLACEMENT_TRIES
            ))
        })?;
        // drawn back to front: later objects take over the pixels they cover
        for i in cover {
            owner[i] = (obj + 1) as u8;
        }
        fills.push(if colors.len() >= count { colors[obj] } else { spec.palette[rng.gen_range(0..spec.palette.len())] });
    }

    // fully occluded objects lose their label; survivors keep depth order
    let mut remap = vec![0u8; count + 1];
    let mut next = 0u8;
    for obj in 1..=count {
        if owner.contains(&(obj as u8)) {
            next += 1;
            remap[obj] = next;
        }
    }
    let mut image = vec![0u8; h * w * 3];
    let mut mask = vec![0u8; h * w];
    for i in 0..h * w {
        let o = owner[i] as usize;
        let color = if o == 0 { background } else { fills[o - 1] };
        image[i * 3..i * 3 + 3].copy_from_slice(&color);
        mask[i] = remap[o];
    }
    Ok(Scene { image, mask, objects: next as usize })
}

pub fn image_name(i: usize) -> String {
    format!("img_{:06}.png", i)
}

pub fn mask_name(i: usize) -> String {
    format!("mask_{:06}.png", i)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Default);
    enc.set_filter(png::FilterType::Sub);
    enc.set_adaptive_filter(png::AdaptiveFilterType::NonAdaptive);
    let mut writer = enc.write_header().map_err(|e| Error::data(path, e.to_string()))?;
    writer.write_image_data(data).map_err(|e| Error::data(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::data(path, e.to_string()))
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Rgb, rgb)
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Grayscale, gray)
}

/// Decoded 8-bit PNG: `(width, height, channels, bytes)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::data(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::data(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::data(path, "only 8-bit PNGs are supported"));
    }
    let channels = info.color_type.samples();
    buf.truncate(info.width as usize * info.height as usize * channels);
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Write `count` scenes of `spec` plus the manifest into `out`.
pub fn generate(spec: &SceneSpec, count: usize, out: &Path) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest_path = out.join(MANIFEST);
    let mut manifest = String::new();
    for i in 0..count {
        let scene = render_scene(spec, i as u64)?;
        write_rgb_png(&out.join(image_name(i)), spec.width, spec.height, &scene.image)?;
        write_gray_png(&out.join(mask_name(i)), spec.width, spec.height, &scene.mask)?;
        manifest.push_str(&format!("{}\t{}\n", image_name(i), mask_name(i)));
    }
    let mut f = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H x W x 3` in `[0, 1]`.
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

/// Images of one size held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

/// A batch of images `[B, H, W, C]` with their ground-truth masks.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub masks: Option<Vec<Vec<u8>>>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let per = self.height * self.width * self.channels;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut masks = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples[i].image);
            masks.push(self.samples[i].mask.clone());
        }
        ImageBatch {
            images: Tensor::new(&[indices.len(), self.height, self.width, self.channels], data).unwrap(),
            masks: Some(masks),
        }
    }
}

fn manifest_entries(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(img), Some(mask), None) => Ok((dir.join(img), dir.join(mask))),
                _ => Err(Error::data(&path, format!("line {} is not `image<TAB>mask`", n + 1))),
            }
        })
        .collect()
}

/// Load every sample listed in the manifest of `dir`.
pub fn load_all(dir: &Path) -> Result<Dataset> {
    let mut ds = Dataset { channels: 3, ..Default::default() };
    for (img_path, mask_path) in manifest_entries(dir)? {
        let (w, h, c, bytes) = read_png(&img_path)?;
        if c != 3 {
            return Err(Error::data(&img_path, format!("expected RGB8, found {} channels", c)));
        }
        let (mw, mh, mc, mask) = read_png(&mask_path)?;
        if mc != 1 || (mw, mh) != (w, h) {
            return Err(Error::data(&mask_path, "mask must be gray8 with the image's size"));
        }
        if ds.samples.is_empty() {
            ds.height = h;
            ds.width = w;
        } else if (w, h) != (ds.width, ds.height) {
            return Err(Error::data(&img_path, format!("size {}x{} differs from {}x{}", w, h, ds.width, ds.height)));
        }
        ds.samples.push(Sample { image: bytes.iter().map(|&b| b as f32 / 255.0).collect(), mask });
    }
    Ok(ds)
}

/// Split the manifest order into `(train, eval)`, the first
/// `round(n * split_fraction)` samples training.
pub fn load(dir: &Path, split_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(Error::Config(format!("split fraction {} outside [0, 1]", split_fraction)));
    }
    let mut all = load_all(dir)?;
    let n_train = (all.len() as f64 * split_fraction).round() as usize;
    let eval_samples = all.samples.split_off(n_train);
    let eval = Dataset { samples: eval_samples, ..all.clone() };
    Ok((all, eval))
}
