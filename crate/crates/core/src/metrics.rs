//! Segmentation scores: adjusted Rand index (optionally restricted to the
//! ground-truth foreground) and mean IoU under optimal one-to-one matching.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Per-pixel segment ids of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labeling {
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub background: usize,
}

impl Labeling {
    pub fn new(labels: Vec<usize>, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Metric(format!("{} labels for a {}x{} image", labels.len(), height, width)));
        }
        Ok(Self { labels, height, width, background: 0 })
    }

    pub fn from_u8(mask: &[u8], height: usize, width: usize) -> Result<Self> {
        Self::new(mask.iter().map(|&v| v as usize).collect(), height, width)
    }
}

/// Per-pixel argmax over slots of masks `[K, H, W]`; ties go to the lowest slot.
pub fn labeling_from_masks<T: Float>(masks: &Tensor<T>) -> Result<Labeling> {
    let s = masks.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("labeling_from_masks expects [K,H,W], got {:?}", s)));
    }
    let (k, h, w) = (s[0], s[1], s[2]);
    Labeling::new(argmax_slots(masks.data(), k, h * w), h, w)
}

/// Argmax over the leading slot axis of a `[K, P]` buffer.
pub fn argmax_slots<T: Float>(masks: &[T], k: usize, pixels: usize) -> Vec<usize> {
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if masks[c * pixels + p] > masks[best * pixels + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn comb2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

fn dense_ids(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

/// Adjusted Rand index of two flat labelings via the contingency table.
///
/// When the index is undefined (both partitions are a single cluster, or
/// both are all singletons, so they coincide) the result is 1.0.
pub fn ari_labels(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!("label length mismatch: {} vs {}", pred.len(), truth.len())));
    }
    let (p, np) = dense_ids(pred);
    let (t, nt) = dense_ids(truth);
    let mut table = vec![0usize; np * nt];
    for (&a, &b) in p.iter().zip(&t) {
        table[a * nt + b] += 1;
    }
    let mut rows = vec![0usize; np];
    let mut cols = vec![0usize; nt];
    for a in 0..np {
        for b in 0..nt {
            rows[a] += table[a * nt + b];
            cols[b] += table[a * nt + b];
        }
    }
    let index: f64 = table.iter().map(|&n| comb2(n as f64)).sum();
    let sum_rows: f64 = rows.iter().map(|&n| comb2(n as f64)).sum();
    let sum_cols: f64 = cols.iter().map(|&n| comb2(n as f64)).sum();
    let pairs = comb2(pred.len() as f64);
    if pairs == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_rows * sum_cols / pairs;
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// ARI between two labelings; with `exclude_truth_background` only pixels
/// whose ground-truth label is not background are scored (ARI-FG).
pub fn ari(pred: &Labeling, truth: &Labeling, exclude_truth_background: bool) -> Result<f64> {
    if pred.labels.len() != truth.labels.len() {
        return Err(Error::Metric(format!(
            "shape mismatch: prediction {}x{} vs truth {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    if !exclude_truth_background {
        return ari_labels(&pred.labels, &truth.labels);
    }
    let (p, t): (Vec<usize>, Vec<usize>) = pred
        .labels
        .iter()
        .zip(&truth.labels)
        .filter(|(_, &t)| t != truth.background)
        .map(|(&p, &t)| (p, t))
        .unzip();
    if t.len() < 2 {
        return Err(Error::Metric(format!("only {} foreground pixels; ARI-FG needs at least 2", t.len())));
    }
    ari_labels(&p, &t)
}

/// Minimum-cost one-to-one assignment of `min(rows, cols)` pairs, returned as
/// `(row, col)` sorted by row.
pub fn hungarian(costs: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = costs.len();
    let cols = costs.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| costs[r][c]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = hungarian(&transposed).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // Shortest augmenting paths with row/column potentials (1-based, column 0 is a sentinel).
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = costs[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// Mean over ground-truth segments (background included) of the IoU with the
/// predicted segment matched to it by maximum total IoU; unmatched truth
/// segments score 0.
pub fn miou(pred: &Labeling, truth: &Labeling) -> Result<f64> {
    if pred.labels.len() != truth.labels.len() {
        return Err(Error::Metric("shape mismatch between prediction and truth".into()));
    }
    if truth.labels.is_empty() {
        return Err(Error::Metric("empty ground truth".into()));
    }
    let (t, nt) = dense_ids(&truth.labels);
    let (p, np) = dense_ids(&pred.labels);
    let mut inter = vec![0usize; nt * np];
    let mut t_area = vec![0usize; nt];
    let mut p_area = vec![0usize; np];
    for (&a, &b) in t.iter().zip(&p) {
        inter[a * np + b] += 1;
        t_area[a] += 1;
        p_area[b] += 1;
    }
    let iou: Vec<Vec<f64>> = (0..nt)
        .map(|a| {
            (0..np)
                .map(|b| {
                    let i = inter[a * np + b];
                    i as f64 / (t_area[a] + p_area[b] - i) as f64
                })
                .collect()
        })
        .collect();
    let costs: Vec<Vec<f64>> = iou.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let matched: f64 = hungarian(&costs).into_iter().map(|(a, b)| iou[a][b]).sum();
    Ok(matched / nt as f64)
}

/// Per-image scores for one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScores {
    pub ari: f64,
    pub ari_fg: Option<f64>,
    pub miou: f64,
}

pub fn score_image(pred: &Labeling, truth: &Labeling) -> Result<ImageScores> {
    let fg = truth.labels.iter().filter(|&&l| l != truth.background).count();
    Ok(ImageScores {
        ari: ari(pred, truth, false)?,
        ari_fg: if fg >= 2 { Some(ari(pred, truth, true)?) } else { None },
        miou: miou(pred, truth)?,
    })
}

/// Unweighted means over images, as written by `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub ari: f64,
    pub ari_fg: f64,
    pub miou: f64,
    pub n_images: usize,
}

/// Accumulates per-image scores; images without two foreground pixels are
/// left out of the ARI-FG mean only.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    ari: f64,
    ari_fg: f64,
    fg_images: usize,
    miou: f64,
    n: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, s: ImageScores) {
        self.ari += s.ari;
        self.miou += s.miou;
        if let Some(f) = s.ari_fg {
            self.ari_fg += f;
            self.fg_images += 1;
        }
        self.n += 1;
    }

    pub fn summary(&self) -> MetricSummary {
        let mean = |v: f64, n: usize| if n == 0 { 0.0 } else { v / n as f64 };
        MetricSummary {
            ari: mean(self.ari, self.n),
            ari_fg: mean(self.ari_fg, self.fg_images),
            miou: mean(self.miou, self.n),
            n_images: self.n,
        }
    }
}
