//! Run configuration, named presets and the flat `key = value` text format.
//!
//! A config file is a list of `section.key = value` lines; `#` starts a
//! comment when it opens a line. An optional `preset = <name>` line selects the base values and
//! every other line overrides one field. Unknown keys are rejected with the
//! key in the message.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Background, SceneSpec, ShapeKind};
use crate::error::{Error, Result};
use crate::losses::Ablation;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::schedule::ScheduleConfig;

pub const PRESETS: [&str; 5] = ["tetrominoes", "mdsprites", "clevr6", "clevrtex", "desk"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Evaluate every this many epochs (0 disables periodic evaluation; the
    /// final epoch is always evaluated).
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
    pub data_dir: PathBuf,
    /// Fraction of the manifest, in order, used for training.
    pub split_fraction: f64,
    pub out_dir: PathBuf,
}

/// Table-style architecture values shared by the paper presets.
#[allow(clippy::too_many_arguments)]
fn paper_model(res: usize, patch: usize, k: usize, d_enc: usize, heads_enc: usize, d_dec: usize, heads_dec: usize) -> ModelConfig {
    ModelConfig {
        k,
        d_enc,
        d_dec,
        enc_depth: 4,
        dec_depth: 2,
        heads_enc,
        heads_dec,
        patch,
        height: res,
        width: res,
        channels: 3,
        class_token_init_std: 0.002,
        class_token_noise_std: 0.0,
        epsilon: 1e-8,
        log_epsilon: 1e-12,
        mlp_ratio: 4,
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = |model: ModelConfig, ratio: f64| RunConfig {
            preset: name.to_string(),
            model,
            schedule: ScheduleConfig { mask_ratio_init: ratio, ..Default::default() },
            optim: AdamWConfig::default(),
            batch_size: 128,
            seed: 0,
            ablation: Ablation::default(),
            eval_every: 10,
            checkpoint_every: 10,
            eval_batch_size: 64,
            data_dir: PathBuf::from("data"),
            split_fraction: 0.9,
            out_dir: PathBuf::from("runs"),
        };
        let cfg = match name {
            "tetrominoes" => base(paper_model(35, 5, 4, 192, 4, 128, 4), 0.75),
            "mdsprites" => base(paper_model(64, 8, 6, 384, 8, 256, 8), 0.5),
            "clevr6" => base(paper_model(128, 16, 7, 768, 16, 512, 16), 0.75),
            "clevrtex" => {
                let mut c = base(paper_model(128, 16, 11, 768, 16, 512, 16), 0.75);
                c.model.class_token_noise_std = 0.1;
                c
            }
            "desk" => {
                let mut c = base(paper_model(35, 5, 4, 64, 4, 32, 4), 0.75);
                c.batch_size = 32;
                c.schedule.warmup_epochs = 4.0;
                c.schedule.total_epochs = 40.0;
                c.schedule.cooldown_epochs = 4.0;
                c.eval_every = 5;
                c.checkpoint_every = 5;
                c
            }
            other => {
                return Err(Error::Config(format!("unknown preset `{}` (known: {})", other, PRESETS.join(", "))))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.model.k < 2 {
            return Err(Error::Config("model.k must be at least 2".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("train.batch_size and train.eval_batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.split_fraction) {
            return Err(Error::Config("data.split must be in [0, 1]".into()));
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        Ok(())
    }

    /// Set one dotted key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "preset" {
            *self = RunConfig::preset(value)?;
            return Ok(());
        }
        let m = &mut self.model;
        let s = &mut self.schedule;
        match key {
            "model.k" => m.k = parse(key, value)?,
            "model.d_enc" => m.d_enc = parse(key, value)?,
            "model.d_dec" => m.d_dec = parse(key, value)?,
            "model.enc_depth" => m.enc_depth = parse(key, value)?,
            "model.dec_depth" => m.dec_depth = parse(key, value)?,
            "model.heads_enc" => m.heads_enc = parse(key, value)?,
            "model.heads_dec" => m.heads_dec = parse(key, value)?,
            "model.patch" => m.patch = parse(key, value)?,
            "model.height" => m.height = parse(key, value)?,
            "model.width" => m.width = parse(key, value)?,
            "model.channels" => m.channels = parse(key, value)?,
            "model.class_token_init_std" => m.class_token_init_std = parse(key, value)?,
            "model.class_token_noise_std" => m.class_token_noise_std = parse(key, value)?,
            "model.epsilon" => m.epsilon = parse(key, value)?,
            "model.log_epsilon" => m.log_epsilon = parse(key, value)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "schedule.warmup_epochs" => s.warmup_epochs = parse(key, value)?,
            "schedule.total_epochs" => s.total_epochs = parse(key, value)?,
            "schedule.cooldown_epochs" => s.cooldown_epochs = parse(key, value)?,
            "schedule.mask_ratio_init" => s.mask_ratio_init = parse(key, value)?,
            "schedule.lw_init_pixel" => s.lw_init_pixel = parse(key, value)?,
            "schedule.lw_final_pixel" => s.lw_final_pixel = parse(key, value)?,
            "schedule.lw_init_object" => s.lw_init_object = parse(key, value)?,
            "schedule.lw_final_object" => s.lw_final_object = parse(key, value)?,
            "schedule.lr_start" => s.lr_start = parse(key, value)?,
            "schedule.lr_base" => s.lr_base = parse(key, value)?,
            "schedule.lr_min" => s.lr_min = parse(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse(key, value)?,
            "optim.eps" => self.optim.eps = parse(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.eval_every" => self.eval_every = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "train.eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            "ablation.no_object_entropy" => self.ablation.no_object_entropy = parse(key, value)?,
            "ablation.no_pixel_entropy" => self.ablation.no_pixel_entropy = parse(key, value)?,
            "ablation.no_masking" => self.ablation.no_masking = parse(key, value)?,
            "ablation.no_class_token_noise" => self.ablation.no_class_token_noise = parse(key, value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.split" => self.split_fraction = parse(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key `{}`", key))),
        }
        Ok(())
    }

    /// Every key with its current value, `preset` first, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let s = &self.schedule;
        let o = &self.optim;
        let a = &self.ablation;
        let pairs: Vec<(&str, String)> = vec![
            ("preset", self.preset.clone()),
            ("model.k", m.k.to_string()),
            ("model.d_enc", m.d_enc.to_string()),
            ("model.d_dec", m.d_dec.to_string()),
            ("model.enc_depth", m.enc_depth.to_string()),
            ("model.dec_depth", m.dec_depth.to_string()),
            ("model.heads_enc", m.heads_enc.to_string()),
            ("model.heads_dec", m.heads_dec.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.class_token_init_std", m.class_token_init_std.to_string()),
            ("model.class_token_noise_std", m.class_token_noise_std.to_string()),
            ("model.epsilon", m.epsilon.to_string()),
            ("model.log_epsilon", m.log_epsilon.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("schedule.warmup_epochs", s.warmup_epochs.to_string()),
            ("schedule.total_epochs", s.total_epochs.to_string()),
            ("schedule.cooldown_epochs", s.cooldown_epochs.to_string()),
            ("schedule.mask_ratio_init", s.mask_ratio_init.to_string()),
            ("schedule.lw_init_pixel", s.lw_init_pixel.to_string()),
            ("schedule.lw_final_pixel", s.lw_final_pixel.to_string()),
            ("schedule.lw_init_object", s.lw_init_object.to_string()),
            ("schedule.lw_final_object", s.lw_final_object.to_string()),
            ("schedule.lr_start", s.lr_start.to_string()),
            ("schedule.lr_base", s.lr_base.to_string()),
            ("schedule.lr_min", s.lr_min.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.eval_every", self.eval_every.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.eval_batch_size", self.eval_batch_size.to_string()),
            ("ablation.no_object_entropy", a.no_object_entropy.to_string()),
            ("ablation.no_pixel_entropy", a.no_pixel_entropy.to_string()),
            ("ablation.no_masking", a.no_masking.to_string()),
            ("ablation.no_class_token_noise", a.no_class_token_noise.to_string()),
            ("data.dir", self.data_dir.display().to_string()),
            ("data.split", self.split_fraction.to_string()),
            ("out.dir", self.out_dir.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
    }

    /// Build from parsed pairs: a `preset` entry (default `desk`) first, then
    /// every remaining key in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let preset = pairs.iter().rev().find(|(k, _)| k == "preset").map_or("desk", |(_, v)| v.as_str());
        let mut cfg = RunConfig::preset(preset)?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Load a config file and apply `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_pairs(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Vec::new(),
        };
        for o in overrides {
            pairs.push(parse_override(o)?);
        }
        Self::from_pairs(&pairs)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| Error::Config(format!("bad value `{}` for `{}`: {}", value, key, e)))
}

/// Split `text` into trimmed `(key, value)` pairs, skipping blank lines and comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, found `{}`", n + 1, raw.trim())))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{}` is not key=value", s)))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_color(key: &str, s: &str) -> Result<[u8; 3]> {
    let hex = s.trim().trim_start_matches('#');
    if hex.len() != 6 {
        return Err(Error::Config(format!("`{}`: color `{}` is not #rrggbb", key, s)));
    }
    let byte = |i: usize| {
        u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| Error::Config(format!("`{}`: color `{}` is not #rrggbb", key, s)))
    };
    Ok([byte(0)?, byte(2)?, byte(4)?])
}

fn parse_range(key: &str, s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(',').ok_or_else(|| Error::Config(format!("`{}` expects `min,max`", key)))?;
    Ok((parse(key, a)?, parse(key, b)?))
}

/// Scene spec from `scene.*` keys applied on top of the default spec.
pub fn scene_spec_from_pairs(pairs: &[(String, String)]) -> Result<SceneSpec> {
    let mut spec = SceneSpec::default();
    for (key, value) in pairs {
        match key.as_str() {
            "scene.height" => spec.height = parse(key, value)?,
            "scene.width" => spec.width = parse(key, value)?,
            "scene.shapes" => spec.shapes = value.split(',').map(ShapeKind::from_str).collect::<Result<_>>()?,
            "scene.object_count" => spec.object_count = parse_range(key, value)?,
            "scene.object_size" => spec.object_size = parse_range(key, value)?,
            "scene.palette" => spec.palette = value.split(',').map(|c| parse_color(key, c)).collect::<Result<_>>()?,
            "scene.background" => {
                spec.background = match value.as_str() {
                    "gray-random" => Background::GrayRandom,
                    c => Background::Color(parse_color(key, c)?),
                }
            }
            "scene.allow_overlap" => spec.allow_overlap = parse(key, value)?,
            "scene.seed" => spec.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown scene key `{}`", key))),
        }
    }
    spec.validate()?;
    Ok(spec)
}
