//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! OCMAE-CKPT 1\n
//! <header: `key = value` lines — run state, then the full config echo>
//! ---\n
//! u32 tensor count
//! per tensor: u32 name length, name (UTF-8), u32 rank, u64 extents, f32 payload
//! ```
//!
//! All integers and floats are little-endian. Tensor names are
//! `param:<name>`, `adam.m:<name>` and `adam.v:<name>`. The random state is
//! fully described by `train.seed` plus the `epoch`/`step` counters, since
//! every stream is derived from `(seed, epoch, step)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_pairs, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"OCMAE-CKPT 1\n";
const SEPARATOR: &[u8] = b"---\n";

/// Everything needed to rebuild a model and continue its training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Epochs completed.
    pub epoch: usize,
    /// Extra run-state entries (e.g. the batch index of an abort).
    pub extra: BTreeMap<String, String>,
    pub model: Model<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated tensor section".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let mut header = format!("epoch = {}\n", self.epoch);
        if let Some(opt) = &self.optimizer {
            header.push_str(&format!("step = {}\n", opt.step));
        }
        for (k, v) in &self.extra {
            header.push_str(&format!("extra.{} = {}\n", k, v));
        }
        header.push_str(&self.config.to_text());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(SEPARATOR);

        let store = &self.model.store;
        let groups = if self.optimizer.is_some() { 3 } else { 1 };
        put_u32(&mut out, store.len() * groups);
        for p in store.iter() {
            put_tensor(&mut out, &format!("param:{}", p.name), p.value.shape(), p.value.data());
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
                for (p, m) in store.iter().zip(moments) {
                    put_tensor(&mut out, &format!("{}:{}", prefix, p.name), p.value.shape(), m);
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| Error::Checkpoint("not a checkpoint file".into()))?;
        let sep = rest
            .windows(SEPARATOR.len())
            .position(|w| w == SEPARATOR)
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let header = std::str::from_utf8(&rest[..sep]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut epoch = None;
        let mut step = None;
        let mut extra = BTreeMap::new();
        let mut config_pairs = Vec::new();
        for (k, v) in parse_pairs(header)? {
            let bad = |_| Error::Checkpoint(format!("bad value for `{}`", k));
            match k.as_str() {
                "epoch" => epoch = Some(v.parse::<usize>().map_err(bad)?),
                "step" => step = Some(v.parse::<u64>().map_err(bad)?),
                _ => match k.strip_prefix("extra.") {
                    Some(name) => {
                        extra.insert(name.to_string(), v);
                    }
                    None => config_pairs.push((k, v)),
                },
            }
        }
        let config = RunConfig::from_pairs(&config_pairs)?;
        let epoch = epoch.ok_or_else(|| Error::Checkpoint("header lacks `epoch`".into()))?;

        let mut r = Reader { buf: &rest[sep + SEPARATOR.len()..], pos: 0 };
        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for _ in 0..r.u32()? {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != r.buf.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor section".into()));
        }

        // the architecture comes from the echoed config; values must fit it exactly
        let mut model = Model::<f32>::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = tensors.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", name)))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, config expects {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        };
        let names: Vec<(String, Vec<usize>)> =
            model.store.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        for (p, (name, shape)) in model.store.iter_mut().zip(&names) {
            p.value = take(format!("param:{}", name), shape)?;
        }
        let optimizer = match step {
            Some(step) => {
                let mut opt = AdamW::new(config.optim, &model.store);
                opt.step = step;
                for (i, (name, shape)) in names.iter().enumerate() {
                    opt.m[i] = take(format!("adam.m:{}", name), shape)?.into_data();
                    opt.v[i] = take(format!("adam.v:{}", name), shape)?.into_data();
                }
                Some(opt)
            }
            None => None,
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{}`", name)));
        }
        Ok(Checkpoint { config, epoch, extra, model, optimizer })
    }
}
