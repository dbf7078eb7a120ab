//! Training loop: per-step forward/backward/AdamW, per-epoch logging,
//! periodic evaluation and checkpoints, resume, and numerical aborts.
//!
//! Every random draw comes from a stream keyed by the run seed and a
//! position — `(epoch)` for the data order, `(epoch, step)` for masks and
//! class-token noise — so a resumed run replays exactly what an
//! uninterrupted one would have drawn.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{stream_rng, Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::losses::{objective, Ablation, LossBreakdown};
use crate::metrics::{labeling_from_masks, score_image, Labeling, MetricAccumulator, MetricSummary};
use crate::model::Model;
use crate::optim::AdamW;
use crate::patch::MaskDraw;
use crate::schedule::{schedule_at, ScheduleState};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str =
    "epoch,loss_total,loss_rec,loss_pixel,loss_object,lr,mask_ratio,lambda_pixel,lambda_object,ari,ari_fg,miou";
pub const LOG_FILE: &str = "log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ABORT_CHECKPOINT: &str = "abort.ckpt";
pub const CONFIG_ECHO: &str = "config.txt";

// stream tags, mixed into the seed so the streams never coincide
const INIT_STREAM: u64 = 0x1;
const SHUFFLE_STREAM: u64 = 0x2;
const STEP_STREAM: u64 = 0x3;

fn tagged(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Freshly initialized model for a run seed.
pub fn init_model(cfg: &RunConfig) -> Result<Model<f32>> {
    Model::new(cfg.model.clone(), &mut stream_rng(tagged(cfg.seed, INIT_STREAM), 0))
}

/// RNG for the masking draw and class-token noise of one step.
pub fn step_rng(seed: u64, epoch: usize, step: usize) -> rand_chacha::ChaCha8Rng {
    stream_rng(tagged(seed, STEP_STREAM), ((epoch as u64) << 32) | step as u64)
}

/// Training order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(tagged(seed, SHUFFLE_STREAM), epoch as u64));
    order
}

/// Values actually used for one step after ablations are applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepPlan {
    pub schedule: ScheduleState,
    pub mask_ratio: f64,
    pub noise_std: f64,
}

pub fn plan_step(cfg: &RunConfig, fractional_epoch: f64) -> StepPlan {
    let schedule = schedule_at(fractional_epoch, &cfg.schedule);
    let mask_ratio = if cfg.ablation.no_masking { 0.0 } else { schedule.mask_ratio };
    let in_warmup = fractional_epoch < cfg.schedule.warmup_epochs;
    let noise_std = if in_warmup && !cfg.ablation.no_class_token_noise { cfg.model.class_token_noise_std } else { 0.0 };
    StepPlan { schedule, mask_ratio, noise_std }
}

/// One forward pass, one reverse pass and one AdamW update.
pub fn train_step<R: Rng>(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    images: &Tensor<f32>,
    plan: StepPlan,
    ablation: Ablation,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &b, images, plan.mask_ratio, plan.noise_std, rng)?;
    let batch = images.shape()[0];
    let target = images.clone().reshape(&[batch, model.grid().pixels(), model.config.channels])?;
    let loss = objective(&mut tape, out.scene.masks, out.scene.composed, &target, plan.schedule.weights, ablation)?;
    let breakdown = loss.breakdown(&tape);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteTerm("total"));
    }
    let grads = tape.backward(loss.total);
    let per_param: Vec<Option<&[f32]>> = b.vars().iter().map(|&v| grads.get(v)).collect();
    opt.update(&mut model.store, &per_param, plan.schedule.lr)?;
    Ok(breakdown)
}

/// Output masks `[B, K, H*W]` of a full (unmasked, noise-free) forward pass.
pub fn predict_masks(model: &Model<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape);
    let mask = MaskDraw::full(images.shape()[0], model.grid().num_patches());
    let out = model.forward_with(&mut tape, &b, images, mask, None)?;
    Ok(tape.value(out.scene.masks).clone())
}

/// Per-image argmax labelings of a batch.
pub fn predict_labelings(model: &Model<f32>, batch: &ImageBatch) -> Result<Vec<Labeling>> {
    let masks = predict_masks(model, &batch.images)?;
    let (h, w, k) = (model.config.height, model.config.width, model.config.k);
    masks
        .data()
        .chunks(k * h * w)
        .map(|m| labeling_from_masks(&Tensor::new(&[k, h, w], m.to_vec())?))
        .collect()
}

/// Segmentation metrics over a dataset at masking ratio 0.
pub fn evaluate(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<MetricSummary> {
    let mut acc = MetricAccumulator::default();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk);
        let preds = predict_labelings(model, &batch)?;
        for (pred, mask) in preds.iter().zip(batch.masks.as_deref().unwrap_or(&[])) {
            let truth = Labeling::from_u8(mask, data.height, data.width)?;
            acc.push(score_image(pred, &truth)?);
        }
    }
    Ok(acc.summary())
}

/// One row of the metrics log; schedule values are those at the epoch start.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub mask_ratio: f64,
    pub lambda_pixel: f64,
    pub lambda_object: f64,
    pub metrics: Option<MetricSummary>,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let (ari, fg, miou) = match &self.metrics {
            Some(m) => (m.ari.to_string(), m.ari_fg.to_string(), m.miou.to_string()),
            None => Default::default(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss.total,
            self.loss.rec,
            self.loss.pixel,
            self.loss.object,
            self.lr,
            self.mask_ratio,
            self.lambda_pixel,
            self.lambda_object,
            ari,
            fg,
            miou
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Continue from `last.ckpt` in the output directory when present.
    pub resume: bool,
    /// Stop (with a checkpoint) after this many completed epochs.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub rows: Vec<LogRow>,
    pub final_metrics: Option<MetricSummary>,
    pub completed: bool,
    pub model: Model<f32>,
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    (n / batch).max(1)
}

fn write_log(path: &Path, rows: &[String]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_log(path: &Path, row: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", row).map_err(|e| Error::io(path, e))
}

/// Rows of an existing log (without the header).
pub fn read_log_rows(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::data(path, "unexpected log header"));
    }
    Ok(lines.map(str::to_string).collect())
}

/// Train according to `cfg`, writing the log, config echo and checkpoints to `cfg.out_dir`.
pub fn fit(cfg: &RunConfig, train: &Dataset, eval: &Dataset, opts: &FitOptions) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data(&cfg.data_dir, "training split is empty"));
    }
    if (train.height, train.width, train.channels) != (cfg.model.height, cfg.model.width, cfg.model.channels) {
        return Err(Error::data(
            &cfg.data_dir,
            format!(
                "images are {}x{}x{}, config expects {}x{}x{}",
                train.height, train.width, train.channels, cfg.model.height, cfg.model.width, cfg.model.channels
            ),
        ));
    }
    let out: PathBuf = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join(LOG_FILE);
    let last_path = out.join(LAST_CHECKPOINT);

    let (mut model, mut opt, start) = if opts.resume && last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        if ck.config.model != cfg.model {
            return Err(Error::Checkpoint(format!("{} was written for a different model config", last_path.display())));
        }
        let opt = ck.optimizer.ok_or_else(|| Error::Checkpoint("resume checkpoint lacks optimizer state".into()))?;
        let mut rows = read_log_rows(&log_path)?;
        rows.truncate(ck.epoch);
        write_log(&log_path, &rows)?;
        log::info!("resuming from epoch {}", ck.epoch);
        (ck.model, opt, ck.epoch)
    } else {
        let model = init_model(cfg)?;
        let opt = AdamW::new(cfg.optim, &model.store);
        write_log(&log_path, &[])?;
        (model, opt, 0)
    };
    let echo = out.join(CONFIG_ECHO);
    fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))?;

    let total = cfg.schedule.run_epochs();
    let steps = steps_per_epoch(train.len(), cfg.batch_size);
    let batch_size = cfg.batch_size.min(train.len());
    let mut rows = Vec::new();
    let mut final_metrics = None;
    let save = |model: &Model<f32>, opt: &AdamW<f32>, epoch: usize, path: &Path| {
        Checkpoint { config: cfg.clone(), epoch, extra: Default::default(), model: model.clone(), optimizer: Some(opt.clone()) }
            .save(path)
    };

    for epoch in start..total {
        let started = std::time::Instant::now();
        let order = epoch_order(cfg.seed, epoch, train.len());
        let mut sums = LossBreakdown::default();
        for step in 0..steps {
            let plan = plan_step(cfg, epoch as f64 + step as f64 / steps as f64);
            let batch = train.batch(&order[step * batch_size..(step + 1) * batch_size]);
            let mut rng = step_rng(cfg.seed, epoch, step);
            let loss = match train_step(&mut model, &mut opt, &batch.images, plan, cfg.ablation, &mut rng) {
                Ok(l) => l,
                Err(Error::NonFiniteTerm(term)) => {
                    let mut ck = Checkpoint {
                        config: cfg.clone(),
                        epoch,
                        extra: Default::default(),
                        model: model.clone(),
                        optimizer: Some(opt.clone()),
                    };
                    ck.extra.insert("abort_batch".into(), step.to_string());
                    ck.extra.insert("abort_term".into(), term.to_string());
                    ck.save(&out.join(ABORT_CHECKPOINT))?;
                    return Err(Error::NonFinite { term, epoch, batch: step, seed: cfg.seed, step: opt.step + 1 });
                }
                Err(e) => return Err(e),
            };
            sums.total += loss.total;
            sums.rec += loss.rec;
            sums.pixel += loss.pixel;
            sums.object += loss.object;
        }
        let n = steps as f64;
        let mean = LossBreakdown { total: sums.total / n, rec: sums.rec / n, pixel: sums.pixel / n, object: sums.object / n };

        let done = epoch + 1;
        let last = done == total;
        let metrics = if !eval.is_empty() && (last || (cfg.eval_every > 0 && done % cfg.eval_every == 0)) {
            Some(evaluate(&model, eval, cfg.eval_batch_size)?)
        } else {
            None
        };
        let plan = plan_step(cfg, epoch as f64);
        let row = LogRow {
            epoch,
            loss: mean,
            lr: plan.schedule.lr,
            mask_ratio: plan.mask_ratio,
            lambda_pixel: plan.schedule.weights.lambda_pixel,
            lambda_object: plan.schedule.weights.lambda_object,
            metrics,
        };
        append_log(&log_path, &row.to_csv())?;
        log::info!(
            "epoch {}/{} loss {:.5} (rec {:.5}) ratio {:.3} lr {:.2e}{} [{:.1}s]",
            done,
            total,
            mean.total,
            mean.rec,
            plan.mask_ratio,
            plan.schedule.lr,
            metrics.map_or(String::new(), |m| format!(" ari {:.4} ari_fg {:.4} miou {:.4}", m.ari, m.ari_fg, m.miou)),
            started.elapsed().as_secs_f64()
        );
        rows.push(row);
        if last {
            final_metrics = metrics;
        }

        let stopping = opts.stop_after_epochs == Some(done);
        if last || stopping || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            save(&model, &opt, done, &last_path)?;
        }
        if last {
            save(&model, &opt, done, &out.join(FINAL_CHECKPOINT))?;
        }
        if stopping && !last {
            return Ok(FitReport { rows, final_metrics, completed: false, model });
        }
    }
    Ok(FitReport { rows, final_metrics, completed: true, model })
}
