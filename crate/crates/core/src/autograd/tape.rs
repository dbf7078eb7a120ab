//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! created in dependency order, so a single reverse sweep over the arena is a
//! valid topological traversal for the backward pass.

use crate::error::{Error, Result};
use crate::tensor::{gemm, split_axis, Float, MatView, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Log { x: Var, eps: T },
    Concat { a: Var, b: Var, axis: usize },
    Gather { src: Var, idx: Vec<usize> },
    NormalizeColumns { a: Var, denom: Vec<T> },
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
    SlotBroadcast { slots: Var, logattn: Var },
    Mixture { masks: Var, rgb: Var },
    Mse { pred: Var, target: Vec<T> },
    PixelEntropy { masks: Var },
    ObjectEntropy { masks: Var, means: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Arena of recorded operations for one forward pass.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the root with respect to `var`, if any flowed there.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err<S: Into<String>>(msg: S) -> Error {
    Error::Shape(msg.into())
}

const LN_EPS: f64 = 1e-6;

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention weights `[B, heads, N, N]` saved by an [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Every attention node recorded so far, in order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        (0..self.nodes.len()).map(Var).filter(|&v| self.attention_probs(v).is_some()).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + b` where the shape of `b` is a trailing suffix of the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("add_broadcast: {:?} is not a suffix of {:?}", sb, sa)));
        }
        let nb = vb.numel();
        let bd = vb.data();
        let data = va.data().iter().enumerate().map(|(i, &x)| x + bd[i % nb]).collect();
        let out = Tensor::new(sa, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|&x| x * c).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s: T = va.data().iter().copied().sum();
        let n = T::lit(va.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Affine map along the last axis: `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] {
            return Err(shape_err(format!("linear: input {:?} incompatible with weight {:?}", sx, sw)));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            let sb = self.value(b).shape();
            if sb != [dout] {
                return Err(shape_err(format!("linear: bias {:?} does not match weight {:?}", sb, sw)));
            }
        }
        let m = vx.numel() / din;
        let mut out = vec![T::zero(); m * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            vx.data(),
            MatView::row_major(0, m, din),
            vw.data(),
            MatView::row_major(0, din, dout),
            beta,
            &mut out,
            MatView::row_major(0, m, dout),
        );
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Batched matrix product over 3-D operands, optionally transposing either side.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(format!("bmm: {:?} x {:?}", sa, sb)));
        }
        let bt = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err(format!("bmm inner extents differ: {:?} x {:?}", sa, sb)));
        }
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            let av = bmm_view(i * m * k, m, k, ta);
            let bv = bmm_view(i * k * n, k, n, tb);
            gemm(
                T::one(),
                self.value(a).data(),
                av,
                self.value(b).data(),
                bv,
                T::zero(),
                &mut out,
                MatView::row_major(i * m * n, m, n),
            );
        }
        let out = Tensor::new(&[bt, m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Bmm { a, b, ta, tb }, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.shape().len() {
            return Err(shape_err(format!("softmax: axis {} out of range for {:?}", axis, vx.shape())));
        }
        let (outer, n, inner) = split_axis(vx.shape(), axis);
        let xd = vx.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * n * inner + j;
                let mut mx = T::neg_infinity();
                for t in 0..n {
                    mx = mx.max(xd[base + t * inner]);
                }
                let mut sum = T::zero();
                for t in 0..n {
                    let e = (xd[base + t * inner] - mx).exp();
                    out[base + t * inner] = e;
                    sum += e;
                }
                for t in 0..n {
                    out[base + t * inner] /= sum;
                }
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().ok_or_else(|| shape_err("layer_norm on scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(format!(
                "layer_norm: affine {:?}/{:?} vs feature dim {}",
                self.shape(gamma),
                self.shape(beta),
                d
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.numel() / d;
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        let dn = T::lit(d as f64);
        let eps = T::lit(LN_EPS);
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let data = vx.data().iter().map(|&v| half * v * (T::one() + (v * inv_sqrt2).erf())).collect();
        let out = Tensor::new(vx.shape(), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// `ln(x + eps)`.
    pub fn log(&mut self, x: Var, eps: T) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|&v| (v + eps).ln()).collect()).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::Log { x, eps }, rg)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(shape_err(format!("concat on axis {}: {:?} vs {:?}", axis, sa, sb)));
        }
        let (outer, na, inner) = split_axis(&sa, axis);
        let nb = sb[axis];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * na * inner..(o + 1) * na * inner]);
            out.extend_from_slice(&db[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = sa;
        shape[axis] = na + nb;
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b, axis }, rg))
    }

    /// `out[j] = src.flat[idx[j]]`, shaped as `shape`.
    ///
    /// Covers slicing, broadcasting along new axes, permutations and
    /// reordering; the backward pass scatter-adds.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let vs = self.value(src);
        if shape.iter().product::<usize>() != idx.len() {
            return Err(shape_err(format!("gather: {} indices for shape {:?}", idx.len(), shape)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= vs.numel()) {
            return Err(shape_err(format!("gather: index {} out of range for {:?}", bad, vs.shape())));
        }
        let sd = vs.data();
        let data = idx.iter().map(|&i| sd[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[src]);
        Ok(self.push(out, Op::Gather { src, idx }, rg))
    }

    /// For `a` of shape `[B, N, K]`: `w[b,i,k] = a[b,i,k] / (sum_i a[b,i,k] + eps)`.
    pub fn normalize_columns(&mut self, a: Var, eps: T) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 3 {
            return Err(shape_err(format!("normalize_columns expects [B,N,K], got {:?}", s)));
        }
        let (bn, n, k) = (s[0], s[1], s[2]);
        let ad = va.data();
        let mut denom = vec![eps; bn * k];
        for b in 0..bn {
            for i in 0..n {
                for c in 0..k {
                    denom[b * k + c] += ad[(b * n + i) * k + c];
                }
            }
        }
        let mut out = vec![T::zero(); ad.len()];
        for b in 0..bn {
            for i in 0..n {
                for c in 0..k {
                    let j = (b * n + i) * k + c;
                    out[j] = ad[j] / denom[b * k + c];
                }
            }
        }
        let out = Tensor::new(s, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::NormalizeColumns { a, denom }, rg))
    }

    /// Scaled dot-product self-attention on a packed `[B, N, 3D]` projection
    /// (query, key, value blocks in that order), returning `[B, N, D]` with
    /// heads concatenated along the feature axis.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || s[2] % 3 != 0 {
            return Err(shape_err(format!("attention expects [B,N,3D], got {:?}", s)));
        }
        let (bn, n, d) = (s[0], s[1], s[2] / 3);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("embed dim {} not divisible by {} heads", d, heads)));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![T::zero(); bn * heads * n * n];
        let mut out = vec![T::zero(); bn * n * d];
        for b in 0..bn {
            for h in 0..heads {
                let base = b * n * 3 * d + h * dh;
                let q = strided(base, n, dh, 3 * d);
                let k = strided(base + d, n, dh, 3 * d);
                let v = strided(base + 2 * d, n, dh, 3 * d);
                let p_off = (b * heads + h) * n * n;
                gemm(scale, src, q, src, k.t(), T::zero(), &mut probs, MatView::row_major(p_off, n, n));
                softmax_rows(&mut probs[p_off..p_off + n * n], n);
                let o = strided(b * n * d + h * dh, n, dh, d);
                gemm(T::one(), &probs, MatView::row_major(p_off, n, n), src, v, T::zero(), &mut out, o);
            }
        }
        let out = Tensor::new(&[bn, n, d], out)?;
        let rg = self.rg(&[qkv]);
        Ok(self.push(out, Op::Attention { qkv, heads, probs }, rg))
    }

    /// Repeat each slot `[B,K,D]` over `N` positions and append the matching
    /// scalar from `logattn` `[B,N,K]`, giving `[B,K,N,D+1]`.
    pub fn slot_broadcast(&mut self, slots: Var, logattn: Var) -> Result<Var> {
        let (ss, sl) = (self.shape(slots).to_vec(), self.shape(logattn).to_vec());
        if ss.len() != 3 || sl.len() != 3 || ss[0] != sl[0] || ss[1] != sl[2] {
            return Err(shape_err(format!("slot_broadcast: slots {:?} vs log-attention {:?}", ss, sl)));
        }
        let (bn, k, d, n) = (ss[0], ss[1], ss[2], sl[1]);
        let (sd, ld) = (self.value(slots).data(), self.value(logattn).data());
        let mut out = Vec::with_capacity(bn * k * n * (d + 1));
        for b in 0..bn {
            for c in 0..k {
                let slot = &sd[(b * k + c) * d..(b * k + c + 1) * d];
                for i in 0..n {
                    out.extend_from_slice(slot);
                    out.push(ld[(b * n + i) * k + c]);
                }
            }
        }
        let out = Tensor::new(&[bn, k, n, d + 1], out)?;
        let rg = self.rg(&[slots, logattn]);
        Ok(self.push(out, Op::SlotBroadcast { slots, logattn }, rg))
    }

    /// Mask-weighted sum over slots: masks `[B,K,P]`, rgb `[B,K,P,C]` -> `[B,P,C]`.
    pub fn mixture(&mut self, masks: Var, rgb: Var) -> Result<Var> {
        let (sm, sr) = (self.shape(masks).to_vec(), self.shape(rgb).to_vec());
        if sm.len() != 3 || sr.len() != 4 || sm[..] != sr[..3] {
            return Err(shape_err(format!("mixture: masks {:?} vs rgb {:?}", sm, sr)));
        }
        let (bn, k, p, ch) = (sr[0], sr[1], sr[2], sr[3]);
        let (md, rd) = (self.value(masks).data(), self.value(rgb).data());
        let mut out = vec![T::zero(); bn * p * ch];
        for b in 0..bn {
            for c in 0..k {
                for px in 0..p {
                    let m = md[(b * k + c) * p + px];
                    let src = ((b * k + c) * p + px) * ch;
                    let dst = (b * p + px) * ch;
                    for q in 0..ch {
                        out[dst + q] += m * rd[src + q];
                    }
                }
            }
        }
        let out = Tensor::new(&[bn, p, ch], out)?;
        let rg = self.rg(&[masks, rgb]);
        Ok(self.push(out, Op::Mixture { masks, rgb }, rg))
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(shape_err(format!("mse: {:?} vs target {:?}", vp.shape(), target.shape())));
        }
        let n = T::lit(vp.numel() as f64);
        let s: T = vp.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { pred, target: target.data().to_vec() }, rg))
    }

    /// Mean over batch and pixels of `-sum_k m log m` for masks `[B,K,P]`.
    pub fn pixel_entropy(&mut self, masks: Var) -> Result<Var> {
        let s = self.shape(masks).to_vec();
        if s.len() != 3 {
            return Err(shape_err(format!("pixel_entropy expects [B,K,P], got {:?}", s)));
        }
        let md = self.value(masks).data();
        let total: T = md.iter().map(|&m| neg_plogp(m)).sum();
        let n = T::lit((s[0] * s[2]) as f64);
        let rg = self.rg(&[masks]);
        Ok(self.push(Tensor::scalar(total / n), Op::PixelEntropy { masks }, rg))
    }

    /// Mean over batch of `-sum_k mbar_k log mbar_k`, `mbar_k` the spatial mean of mask k.
    pub fn object_entropy(&mut self, masks: Var) -> Result<Var> {
        let s = self.shape(masks).to_vec();
        if s.len() != 3 {
            return Err(shape_err(format!("object_entropy expects [B,K,P], got {:?}", s)));
        }
        let (bn, k, p) = (s[0], s[1], s[2]);
        let md = self.value(masks).data();
        let pn = T::lit(p as f64);
        let means: Vec<T> = (0..bn * k)
            .map(|r| md[r * p..(r + 1) * p].iter().copied().sum::<T>() / pn)
            .collect();
        let total: T = means.iter().map(|&m| neg_plogp(m)).sum();
        let rg = self.rg(&[masks]);
        Ok(self.push(Tensor::scalar(total / T::lit(bn as f64)), Op::ObjectEntropy { masks, means }, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(dst) = self.slot(grads, v) {
                        add_into(dst, g);
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(dst) = self.slot(grads, *a) {
                    add_into(dst, g);
                }
                if let Some(dst) = self.slot(grads, *b) {
                    let nb = dst.len();
                    for (i, &gv) in g.iter().enumerate() {
                        dst[i % nb] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(dst) = self.slot(grads, *a) {
                    for ((d, &gv), &y) in dst.iter_mut().zip(g).zip(db) {
                        *d += gv * y;
                    }
                }
                if let Some(dst) = self.slot(grads, *b) {
                    for ((d, &gv), &x) in dst.iter_mut().zip(g).zip(da) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(dst) = self.slot(grads, *a) {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(dst) = self.slot(grads, *a) {
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(dst) = self.slot(grads, *a) {
                    let gv = g[0] / T::lit(dst.len() as f64);
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(dst) = self.slot(grads, *a) {
                    add_into(dst, g);
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (din, dout) = (vw.shape()[0], vw.shape()[1]);
                let m = vx.numel() / din;
                let gv = MatView::row_major(0, m, dout);
                if let Some(dst) = self.slot(grads, *x) {
                    gemm(T::one(), g, gv, vw.data(), MatView::row_major(0, din, dout).t(), T::one(), dst, MatView::row_major(0, m, din));
                }
                if let Some(dst) = self.slot(grads, *w) {
                    gemm(T::one(), vx.data(), MatView::row_major(0, m, din).t(), g, gv, T::one(), dst, MatView::row_major(0, din, dout));
                }
                if let Some(b) = b {
                    if let Some(dst) = self.slot(grads, *b) {
                        for row in g.chunks(dout) {
                            add_into(dst, row);
                        }
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = va.shape();
                let sb = vb.shape();
                let bt = sa[0];
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                if let Some(dst) = self.slot(grads, *a) {
                    for i in 0..bt {
                        let gv = MatView::row_major(i * m * n, m, n);
                        let bv = bmm_view(i * k * n, k, n, *tb);
                        gemm(T::one(), g, gv, vb.data(), bv.t(), T::one(), dst, bmm_view(i * m * k, m, k, *ta));
                    }
                }
                if let Some(dst) = self.slot(grads, *b) {
                    for i in 0..bt {
                        let gv = MatView::row_major(i * m * n, m, n);
                        let av = bmm_view(i * m * k, m, k, *ta);
                        gemm(T::one(), va.data(), av.t(), g, gv, T::one(), dst, bmm_view(i * k * n, k, n, *tb));
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(dst) = self.slot(grads, *x) {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * n * inner + j;
                            let dot: T = (0..n).map(|t| g[base + t * inner] * y[base + t * inner]).sum();
                            for t in 0..n {
                                let q = base + t * inner;
                                dst[q] += y[q] * (g[q] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                if let Some(dst) = self.slot(grads, *gamma) {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dst[c] += gr[c] * xr[c];
                        }
                    }
                }
                if let Some(dst) = self.slot(grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(dst, gr);
                    }
                }
                if let Some(dst) = self.slot(grads, *x) {
                    let dn = T::lit(d as f64);
                    let mut dxh = vec![T::zero(); d];
                    for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            dxh[c] = gr[c] * gam[c];
                            s1 += dxh[c];
                            s2 += dxh[c] * xr[c];
                        }
                        let f = rstd[r] / dn;
                        for c in 0..d {
                            dst[r * d + c] += f * (dn * dxh[c] - s1 - xr[c] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(dst) = self.slot(grads, *x) {
                    let xd = self.value(*x).data();
                    let half = T::lit(0.5);
                    let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    for ((d, &gv), &v) in dst.iter_mut().zip(g).zip(xd) {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        *d += gv * (cdf + v * pdf);
                    }
                }
            }
            Op::Log { x, eps } => {
                if let Some(dst) = self.slot(grads, *x) {
                    let xd = self.value(*x).data();
                    for ((d, &gv), &v) in dst.iter_mut().zip(g).zip(xd) {
                        *d += gv / (v + *eps);
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let sa = self.shape(*a);
                let (outer, na, inner) = split_axis(sa, *axis);
                let nb = self.shape(*b)[*axis];
                let width = (na + nb) * inner;
                if let Some(dst) = self.slot(grads, *a) {
                    for o in 0..outer {
                        add_into(&mut dst[o * na * inner..(o + 1) * na * inner], &g[o * width..o * width + na * inner]);
                    }
                }
                if let Some(dst) = self.slot(grads, *b) {
                    for o in 0..outer {
                        add_into(&mut dst[o * nb * inner..(o + 1) * nb * inner], &g[o * width + na * inner..(o + 1) * width]);
                    }
                }
            }
            Op::Gather { src, idx } => {
                if let Some(dst) = self.slot(grads, *src) {
                    for (&i, &gv) in idx.iter().zip(g) {
                        dst[i] += gv;
                    }
                }
            }
            Op::NormalizeColumns { a, denom } => {
                if let Some(dst) = self.slot(grads, *a) {
                    let s = node.value.shape();
                    let (bn, n, k) = (s[0], s[1], s[2]);
                    let w = node.value.data();
                    // d w_ik / d a_jk = [i==j]/s_k - a_ik/s_k^2
                    let mut dot = vec![T::zero(); bn * k];
                    for b in 0..bn {
                        for i in 0..n {
                            for c in 0..k {
                                let j = (b * n + i) * k + c;
                                dot[b * k + c] += g[j] * w[j];
                            }
                        }
                    }
                    for b in 0..bn {
                        for i in 0..n {
                            for c in 0..k {
                                let j = (b * n + i) * k + c;
                                let s_k = denom[b * k + c];
                                dst[j] += (g[j] - dot[b * k + c]) / s_k;
                            }
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                if let Some(dst) = self.slot(grads, *qkv) {
                    let s = self.shape(*qkv);
                    let (bn, n, d) = (s[0], s[1], s[2] / 3);
                    let dh = d / heads;
                    let scale = T::one() / T::lit(dh as f64).sqrt();
                    let src = self.value(*qkv).data();
                    let mut dp = vec![T::zero(); n * n];
                    for b in 0..bn {
                        for h in 0..*heads {
                            let base = b * n * 3 * d + h * dh;
                            let q = strided(base, n, dh, 3 * d);
                            let k = strided(base + d, n, dh, 3 * d);
                            let v = strided(base + 2 * d, n, dh, 3 * d);
                            let go = strided(b * n * d + h * dh, n, dh, d);
                            let p_off = (b * heads + h) * n * n;
                            let pv = MatView::row_major(p_off, n, n);
                            // dV += P^T dO
                            gemm(T::one(), probs, pv.t(), g, go, T::one(), dst, v);
                            // dP = dO V^T
                            gemm(T::one(), g, go, src, v.t(), T::zero(), &mut dp, MatView::row_major(0, n, n));
                            let p = &probs[p_off..p_off + n * n];
                            for r in 0..n {
                                let row = r * n..(r + 1) * n;
                                let dot: T = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(&x, &y)| x * y).sum();
                                for c in row {
                                    dp[c] = p[c] * (dp[c] - dot);
                                }
                            }
                            let ds = MatView::row_major(0, n, n);
                            // dQ += scale dS K ; dK += scale dS^T Q
                            gemm(scale, &dp, ds, src, k, T::one(), dst, q);
                            gemm(scale, &dp, ds.t(), src, q, T::one(), dst, k);
                        }
                    }
                }
            }
            Op::SlotBroadcast { slots, logattn } => {
                let ss = self.shape(*slots);
                let (bn, k, d) = (ss[0], ss[1], ss[2]);
                let n = self.shape(*logattn)[1];
                if let Some(dst) = self.slot(grads, *slots) {
                    for b in 0..bn {
                        for c in 0..k {
                            let row = &mut dst[(b * k + c) * d..(b * k + c + 1) * d];
                            for i in 0..n {
                                let off = ((b * k + c) * n + i) * (d + 1);
                                add_into(row, &g[off..off + d]);
                            }
                        }
                    }
                }
                if let Some(dst) = self.slot(grads, *logattn) {
                    for b in 0..bn {
                        for c in 0..k {
                            for i in 0..n {
                                dst[(b * n + i) * k + c] += g[((b * k + c) * n + i) * (d + 1) + d];
                            }
                        }
                    }
                }
            }
            Op::Mixture { masks, rgb } => {
                let sr = self.shape(*rgb);
                let (bn, k, p, ch) = (sr[0], sr[1], sr[2], sr[3]);
                let (md, rd) = (self.value(*masks).data(), self.value(*rgb).data());
                if let Some(dst) = self.slot(grads, *masks) {
                    for b in 0..bn {
                        for c in 0..k {
                            for px in 0..p {
                                let src = ((b * k + c) * p + px) * ch;
                                let go = (b * p + px) * ch;
                                let mut acc = T::zero();
                                for q in 0..ch {
                                    acc += g[go + q] * rd[src + q];
                                }
                                dst[(b * k + c) * p + px] += acc;
                            }
                        }
                    }
                }
                if let Some(dst) = self.slot(grads, *rgb) {
                    for b in 0..bn {
                        for c in 0..k {
                            for px in 0..p {
                                let m = md[(b * k + c) * p + px];
                                let off = ((b * k + c) * p + px) * ch;
                                let go = (b * p + px) * ch;
                                for q in 0..ch {
                                    dst[off + q] += g[go + q] * m;
                                }
                            }
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                if let Some(dst) = self.slot(grads, *pred) {
                    let pd = self.value(*pred).data();
                    let f = T::lit(2.0) * g[0] / T::lit(pd.len() as f64);
                    for ((d, &p), &t) in dst.iter_mut().zip(pd).zip(target) {
                        *d += f * (p - t);
                    }
                }
            }
            Op::PixelEntropy { masks } => {
                if let Some(dst) = self.slot(grads, *masks) {
                    let s = self.shape(*masks);
                    let f = g[0] / T::lit((s[0] * s[2]) as f64);
                    let md = self.value(*masks).data();
                    for (d, &m) in dst.iter_mut().zip(md) {
                        *d += f * d_neg_plogp(m);
                    }
                }
            }
            Op::ObjectEntropy { masks, means } => {
                if let Some(dst) = self.slot(grads, *masks) {
                    let s = self.shape(*masks);
                    let (bn, k, p) = (s[0], s[1], s[2]);
                    let f = g[0] / T::lit((bn * p) as f64);
                    for r in 0..bn * k {
                        let dv = f * d_neg_plogp(means[r]);
                        for d in &mut dst[r * p..(r + 1) * p] {
                            *d += dv;
                        }
                    }
                }
            }
        }
    }

    /// Zero-initialised gradient buffer for `v`, or `None` when `v` takes no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn strided(offset: usize, rows: usize, cols: usize, row_stride: usize) -> MatView {
    MatView { offset, rows, cols, row_stride, col_stride: 1 }
}

/// Logical `rows x cols` view of a bmm operand stored either as-is or transposed.
fn bmm_view(offset: usize, rows: usize, cols: usize, transposed: bool) -> MatView {
    if transposed {
        MatView::row_major(offset, cols, rows).t()
    } else {
        MatView::row_major(offset, rows, cols)
    }
}

fn softmax_rows<T: Float>(buf: &mut [T], n: usize) {
    for row in buf.chunks_mut(n) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `-p ln p` with `0 ln 0 = 0`.
pub(crate) fn neg_plogp<T: Float>(p: T) -> T {
    if p > T::zero() {
        -p * p.ln()
    } else {
        T::zero()
    }
}

/// Derivative of `-p ln p`, with `p` floored at the smallest positive normal.
fn d_neg_plogp<T: Float>(p: T) -> T {
    -(p.max(T::min_positive_value()).ln() + T::one())
}
