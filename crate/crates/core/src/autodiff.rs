//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node to the [`Tape`]. A node records its value,
//! whether it depends on any leaf that requires a gradient, and (only if it
//! does) the operation plus whatever it saved for the backward pass. Calling
//! [`Tape::backward`] consumes the tape and walks it in reverse insertion
//! order, which is a valid reverse topological order because inputs are
//! always recorded before their consumers.
//!
//! All reductions run sequentially in index order, so forward and backward
//! results are bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::linalg::{gemm, Trans};
use crate::tensor::Tensor;

/// Lower/upper clamp applied to probabilities before taking a logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How constant per-element statistics broadcast over an `(N, C, H, W)` or
/// `(N, D)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// One value per non-batch coordinate.
    PerLocation,
    /// One value per channel (axis 1).
    PerChannel,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

enum Op {
    /// Leaf, or any node none of whose inputs requires a gradient.
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Option<Vec<f64>> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    CrossEntropy { probs: Var, targets: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    Reshape(Var),
    GroupNorm { x: Var, per_location: bool, inv_std: Vec<f64> },
    FixedAffine { x: Var, scale: Vec<f64>, bc: Broadcast },
    ChannelAffine { x: Var, scale: Option<Var>, shift: Option<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode normalization primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population (biased) variance.
    pub var: Vec<f64>,
}

/// Ordered record of executed primitives.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!("{what} expects (N, C, H, W), got {:?}", t.shape()))),
    }
}

/// Channel index and group size for per-channel broadcasting over (N, C, ...).
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("per-channel op needs (N, C, ...), got {shape:?}")));
    }
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    Ok((n, c, spatial))
}

impl Tape {
    /// A tape in checked mode: any non-finite result is an error.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), checked: true }
    }

    pub fn unchecked() -> Self {
        Self { nodes: Vec::new(), checked: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `y = x w^T + b` with `x: (N, In)`, `w: (Out, In)`, `b: (Out)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, fin) = match *xv.shape() {
            [n, f] => (n, f),
            _ => return Err(Error::dim(format!("affine input must be 2-D, got {:?}", xv.shape()))),
        };
        let fout = match *wv.shape() {
            [o, i] if i == fin => o,
            _ => {
                return Err(Error::dim(format!(
                    "affine weight {:?} incompatible with input {:?}",
                    wv.shape(),
                    xv.shape()
                )))
            }
        };
        let mut out = vec![0.0; n * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [fout] {
                return Err(Error::dim(format!("affine bias {:?}, expected [{fout}]", bv.shape())));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(n, fin, fout, 1.0, xv.data(), Trans::No, wv.data(), Trans::Yes, 1.0, &mut out);
        let value = Tensor::new([n, fout], out)?;
        let rg = self.rg(&[Some(x), Some(w), b]);
        self.push("affine", value, Op::Affine { x, w, b }, rg)
    }

    /// 2-D convolution with zero padding. `x: (N, C, H, W)`, `w: (O, C, KH, KW)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::usage("conv2d stride must be at least 1"));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = dims4(xv, "conv2d input")?;
        let (o, c2, kh, kw) = dims4(wv, "conv2d kernel")?;
        if c != c2 {
            return Err(Error::dim(format!("conv2d: input has {c} channels, kernel expects {c2}")));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(xv.data(), &geom);
        let ncols = geom.cols();
        let mut out_mat = vec![0.0; o * ncols];
        gemm(o, geom.ckk(), ncols, 1.0, wv.data(), Trans::No, &cols, Trans::No, 0.0, &mut out_mat);

        let hw = geom.ho * geom.wo;
        let mut out = vec![0.0; n * o * hw];
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [o] {
                    return Err(Error::dim(format!("conv2d bias {:?}, expected [{o}]", bv.shape())));
                }
                Some(bv.data().to_vec())
            }
            None => None,
        };
        for ni in 0..n {
            for oi in 0..o {
                let src = &out_mat[oi * ncols + ni * hw..oi * ncols + (ni + 1) * hw];
                let dst = &mut out[(ni * o + oi) * hw..(ni * o + oi + 1) * hw];
                let bo = bias.as_ref().map_or(0.0, |b| b[oi]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bo;
                }
            }
        }
        let value = Tensor::new([n, o, geom.ho, geom.wo], out)?;
        let rg = self.rg(&[Some(x), Some(w), b]);
        let keep_cols = self.requires_grad(w);
        let op = Op::Conv2d { x, w, b, geom, cols: keep_cols.then_some(cols) };
        self.push("conv2d", value, op, rg)
    }

    /// Non-overlapping `k x k` max pooling (window stride `k`, floor mode).
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv, "max_pool2d")?;
        if k == 0 || h < k || w < k {
            return Err(Error::dim(format!("max_pool2d: window {k} on {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let data = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        let rg = self.rg(&[Some(x)]);
        self.push("max_pool2d", value, Op::MaxPool { x, argmax }, rg)
    }

    /// Non-overlapping `k x k` average pooling (window stride `k`, floor mode).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv, "avg_pool2d")?;
        if k == 0 || h < k || w < k {
            return Err(Error::dim(format!("avg_pool2d: window {k} on {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let data = xv.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..k {
                        let row = base + (oy * k + dy) * w + ox * k;
                        s += data[row..row + k].iter().sum::<f64>();
                    }
                    out[(plane * ho + oy) * wo + ox] = s * inv;
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        let rg = self.rg(&[Some(x)]);
        self.push("avg_pool2d", value, Op::AvgPool { x, k }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[Some(x)]);
        self.push("relu", value, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(&[Some(x)]);
        self.push("tanh", value, Op::Tanh(x), rg)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = match *xv.shape() {
            [_, k] if k > 0 => k,
            _ => return Err(Error::dim(format!("softmax expects (N, K), got {:?}", xv.shape()))),
        };
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[Some(x)]);
        self.push("softmax", value, Op::Softmax(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-probabilities
    /// `probs: (N, K)`. Probabilities are clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]` before the logarithm.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        let (n, k) = match *pv.shape() {
            [n, k] => (n, k),
            _ => {
                return Err(Error::dim(format!(
                    "cross_entropy expects (N, K) probabilities, got {:?}",
                    pv.shape()
                )))
            }
        };
        if targets.len() != n {
            return Err(Error::dim(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::usage(format!("label {t} out of range for {k} classes")));
        }
        let mut s = 0.0;
        for (row, &t) in pv.data().chunks(k).zip(targets) {
            s += row[t].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln();
        }
        let value = Tensor::scalar(-s / n as f64);
        let rg = self.rg(&[Some(probs)]);
        self.push("cross_entropy", value, Op::CrossEntropy { probs, targets: targets.to_vec() }, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[Some(a), Some(b)]);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[Some(x)]);
        self.push("scale", value, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[Some(x)]);
        self.push("sum", value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::dim("mean of empty tensor"));
        }
        let value = Tensor::scalar(xv.mean());
        let rg = self.rg(&[Some(x)]);
        self.push("mean", value, Op::Mean(x), rg)
    }

    /// Population variance over every element.
    pub fn variance(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::dim("variance of empty tensor"));
        }
        let m = xv.mean();
        let v = xv.data().iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / xv.len() as f64;
        let rg = self.rg(&[Some(x)]);
        self.push("variance", Tensor::scalar(v), Op::Variance(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[Some(x)]);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = [xv.batch(), xv.sample_len()];
        self.reshape(x, &shape)
    }

    /// Training-mode normalization with batch statistics and no affine.
    ///
    /// With `per_location` the statistics are taken over the batch axis alone,
    /// separately for every non-batch coordinate. Otherwise they are pooled
    /// over batch and spatial axes, one pair per channel.
    pub fn batch_normalize(&mut self, x: Var, eps: f64, per_location: bool) -> Result<(Var, NormStats)> {
        let xv = self.value(x);
        let n = xv.batch();
        if xv.ndim() < 2 || n < 2 {
            return Err(Error::usage(format!(
                "batch normalization needs a batch of at least 2, got shape {:?}",
                xv.shape()
            )));
        }
        let data = xv.data();
        let mut out = vec![0.0; data.len()];
        let (mean, var, inv_std) = if per_location {
            let d = xv.sample_len();
            let mut mean = vec![0.0; d];
            for row in data.chunks(d) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; d];
            for row in data.chunks(d) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            for (orow, row) in out.chunks_mut(d).zip(data.chunks(d)) {
                for j in 0..d {
                    orow[j] = (row[j] - mean[j]) * inv_std[j];
                }
            }
            (mean, var, inv_std)
        } else {
            let (n, c, sp) = channel_layout(xv.shape())?;
            let count = (n * sp) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * sp;
                    mean[ci] += data[off..off + sp].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * sp;
                    var[ci] += data[off..off + sp].iter().map(|&v| (v - mean[ci]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|s| *s /= count);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * sp;
                    for j in off..off + sp {
                        out[j] = (data[j] - mean[ci]) * inv_std[ci];
                    }
                }
            }
            (mean, var, inv_std)
        };
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[Some(x)]);
        let y = self.push("batch_normalize", value, Op::GroupNorm { x, per_location, inv_std }, rg)?;
        Ok((y, NormStats { mean, var }))
    }

    /// `y = x * scale + shift` with constant coefficients broadcast by `bc`.
    pub fn fixed_affine(&mut self, x: Var, scale: &[f64], shift: &[f64], bc: Broadcast) -> Result<Var> {
        let xv = self.value(x);
        let (index, len) = broadcast_index(xv.shape(), bc)?;
        if scale.len() != len || shift.len() != len {
            return Err(Error::dim(format!(
                "fixed_affine coefficients of length {}/{} for broadcast length {len}",
                scale.len(),
                shift.len()
            )));
        }
        let data = xv.data().iter().enumerate().map(|(i, &v)| {
            let j = index(i);
            v * scale[j] + shift[j]
        });
        let value = Tensor::new(xv.shape().to_vec(), data.collect())?;
        let rg = self.rg(&[Some(x)]);
        self.push("fixed_affine", value, Op::FixedAffine { x, scale: scale.to_vec(), bc }, rg)
    }

    /// Learnable per-channel `y = x * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (_, c, sp) = channel_layout(xv.shape())?;
        for p in [scale, shift].into_iter().flatten() {
            if self.value(p).shape() != [c] {
                return Err(Error::dim(format!(
                    "channel_affine parameter {:?}, expected [{c}]",
                    self.value(p).shape()
                )));
            }
        }
        let sc = scale.map(|s| self.value(s).data().to_vec());
        let sh = shift.map(|s| self.value(s).data().to_vec());
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = (i / sp) % c;
                v * sc.as_ref().map_or(1.0, |s| s[ci]) + sh.as_ref().map_or(0.0, |s| s[ci])
            })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[Some(x), scale, shift]);
        self.push("channel_affine", value, Op::ChannelAffine { x, scale, shift }, rg)
    }

    /// Replays the tape in reverse from the scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` receives a gradient, zero if
    /// it does not influence `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            propagate(&nodes, i, g, lo);
        }
        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (g, &node.op) {
                (Some(g), _) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                (None, Op::Leaf) if node.requires_grad => Some(Tensor::zeros(node.value.shape().to_vec())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn broadcast_index(shape: &[usize], bc: Broadcast) -> Result<(Box<dyn Fn(usize) -> usize>, usize)> {
    match bc {
        Broadcast::PerLocation => {
            if shape.len() < 2 {
                return Err(Error::dim(format!("per-location broadcast on {shape:?}")));
            }
            let d: usize = shape[1..].iter().product();
            Ok((Box::new(move |i| i % d), d))
        }
        Broadcast::PerChannel => {
            let (_, c, sp) = channel_layout(shape)?;
            Ok((Box::new(move |i| (i / sp) % c), c))
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + j - pad` lies
/// inside `[0, w)`.
fn valid_range(out: usize, stride: usize, j: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j).div_ceil(stride).min(out);
    let hi = if w + pad > j { ((w + pad - j - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = Vec::with_capacity(g.ckk() * g.cols());
    for ci in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let (lo, hi) = valid_range(g.wo, g.stride, j, g.pad, g.w);
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            cols.extend(std::iter::repeat(0.0).take(g.wo));
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        cols.extend(std::iter::repeat(0.0).take(lo));
                        if g.stride == 1 {
                            let start = lo + j - g.pad;
                            cols.extend_from_slice(&src[start..start + hi - lo]);
                        } else {
                            cols.extend((lo..hi).map(|ox| src[ox * g.stride + j - g.pad]));
                        }
                        cols.extend(std::iter::repeat(0.0).take(g.wo - hi));
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.cols();
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let (lo, hi) = valid_range(g.wo, g.stride, j, g.pad, g.w);
                for ni in 0..g.n {
                    let off = (ni * g.c + ci) * g.h * g.w;
                    let src = &cols[row * ncols + ni * hw..row * ncols + (ni + 1) * hw];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut dx[off + iy as usize * g.w..off + (iy as usize + 1) * g.w];
                        let s = &src[oy * g.wo..(oy + 1) * g.wo];
                        for ox in lo..hi {
                            dst[ox * g.stride + j - g.pad] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Adds `f`'s contribution into the gradient buffer of `v`, allocating it on
/// first touch. Nodes that do not require gradients are skipped.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(buf);
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let xs = nodes[x.0].value.shape();
            let (n, fin) = (xs[0], xs[1]);
            let fout = g.len() / n.max(1);
            accumulate(nodes, grads, *x, |dx| {
                gemm(n, fout, fin, 1.0, g, Trans::No, val(*w), Trans::No, 1.0, dx)
            });
            accumulate(nodes, grads, *w, |dw| {
                gemm(fout, n, fin, 1.0, g, Trans::Yes, val(*x), Trans::No, 1.0, dw)
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |db| {
                    for row in g.chunks(fout) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                });
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let g4 = *geom;
            let ncols = g4.cols();
            let hw = g4.ho * g4.wo;
            let mut dmat = vec![0.0; g4.o * ncols];
            for ni in 0..g4.n {
                for oi in 0..g4.o {
                    dmat[oi * ncols + ni * hw..oi * ncols + (ni + 1) * hw]
                        .copy_from_slice(&g[(ni * g4.o + oi) * hw..(ni * g4.o + oi + 1) * hw]);
                }
            }
            if let Some(cols) = cols {
                accumulate(nodes, grads, *w, |dw| {
                    gemm(g4.o, ncols, g4.ckk(), 1.0, &dmat, Trans::No, cols, Trans::Yes, 1.0, dw)
                });
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |db| {
                    for (oi, d) in db.iter_mut().enumerate() {
                        *d += dmat[oi * ncols..(oi + 1) * ncols].iter().sum::<f64>();
                    }
                });
            }
            accumulate(nodes, grads, *x, |dx| {
                let mut dcols = vec![0.0; g4.ckk() * ncols];
                gemm(g4.ckk(), g4.o, ncols, 1.0, val(*w), Trans::Yes, &dmat, Trans::No, 0.0, &mut dcols);
                col2im_add(&dcols, &g4, dx);
            });
        }
        Op::MaxPool { x, argmax } => accumulate(nodes, grads, *x, |dx| {
            for (&src, &gi) in argmax.iter().zip(g) {
                dx[src] += gi;
            }
        }),
        Op::AvgPool { x, k } => {
            let s = nodes[x.0].value.shape();
            let (h, w) = (s[2], s[3]);
            let (ho, wo) = (h / k, w / k);
            let inv = 1.0 / (k * k) as f64;
            accumulate(nodes, grads, *x, |dx| {
                for plane in 0..s[0] * s[1] {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gi = g[(plane * ho + oy) * wo + ox] * inv;
                            for dy in 0..*k {
                                let row = plane * h * w + (oy * k + dy) * w + ox * k;
                                dx[row..row + k].iter_mut().for_each(|d| *d += gi);
                            }
                        }
                    }
                }
            })
        }
        Op::Relu(x) => accumulate(nodes, grads, *x, |dx| {
            // Subgradient 0 at the kink.
            for ((d, &xi), &gi) in dx.iter_mut().zip(val(*x)).zip(g) {
                if xi > 0.0 {
                    *d += gi;
                }
            }
        }),
        Op::Tanh(x) => accumulate(nodes, grads, *x, |dx| {
            for ((d, &y), &gi) in dx.iter_mut().zip(out).zip(g) {
                *d += gi * (1.0 - y * y);
            }
        }),
        Op::Softmax(x) => {
            let k = node.value.shape()[1];
            accumulate(nodes, grads, *x, |dx| {
                for ((drow, yrow), grow) in dx.chunks_mut(k).zip(out.chunks(k)).zip(g.chunks(k)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..k {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            })
        }
        Op::CrossEntropy { probs, targets } => {
            let pv = &nodes[probs.0].value;
            let k = pv.shape()[1];
            let n = targets.len() as f64;
            accumulate(nodes, grads, *probs, |dp| {
                for (row, &t) in targets.iter().enumerate() {
                    let p = pv.data()[row * k + t];
                    if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                        dp[row * k + t] -= g[0] / (n * p);
                    }
                }
            })
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(val(*b)) {
                    *d += g * y;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d += g * x;
                }
            });
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)),
        Op::Sum(x) => accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(x) => accumulate(nodes, grads, *x, |d| {
            let s = g[0] / d.len() as f64;
            d.iter_mut().for_each(|d| *d += s)
        }),
        Op::Variance(x) => {
            let xv = &nodes[x.0].value;
            let m = xv.mean();
            let s = 2.0 * g[0] / xv.len() as f64;
            accumulate(nodes, grads, *x, |d| {
                for (d, &v) in d.iter_mut().zip(xv.data()) {
                    *d += s * (v - m);
                }
            })
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
        Op::GroupNorm { x, per_location, inv_std } => {
            let shape = nodes[x.0].value.shape();
            accumulate(nodes, grads, *x, |dx| {
                group_norm_backward(shape, *per_location, inv_std, out, g, dx)
            })
        }
        Op::FixedAffine { x, scale, bc } => {
            let (index, _) = broadcast_index(node.value.shape(), *bc).expect("validated in forward");
            accumulate(nodes, grads, *x, |dx| {
                for (i, (d, gi)) in dx.iter_mut().zip(g).enumerate() {
                    *d += gi * scale[index(i)];
                }
            })
        }
        Op::ChannelAffine { x, scale, shift } => {
            let (_, c, sp) = channel_layout(node.value.shape()).expect("validated in forward");
            let xv = val(*x);
            let sc = scale.map(|s| val(s));
            accumulate(nodes, grads, *x, |dx| {
                for (i, (d, gi)) in dx.iter_mut().zip(g).enumerate() {
                    *d += gi * sc.map_or(1.0, |s| s[(i / sp) % c]);
                }
            });
            if let Some(s) = scale {
                accumulate(nodes, grads, *s, |ds| {
                    for (i, gi) in g.iter().enumerate() {
                        ds[(i / sp) % c] += gi * xv[i];
                    }
                });
            }
            if let Some(s) = shift {
                accumulate(nodes, grads, *s, |ds| {
                    for (i, gi) in g.iter().enumerate() {
                        ds[(i / sp) % c] += gi;
                    }
                });
            }
        }
    }
}

/// `dx = inv_std / M * (M * dy - sum(dy) - xhat * sum(dy * xhat))` per group.
fn group_norm_backward(
    shape: &[usize],
    per_location: bool,
    inv_std: &[f64],
    xhat: &[f64],
    dy: &[f64],
    dx: &mut [f64],
) {
    let n = shape[0];
    let groups = inv_std.len();
    let mut sdy = vec![0.0; groups];
    let mut sdyx = vec![0.0; groups];
    let (group_of, count): (Box<dyn Fn(usize) -> usize>, f64) = if per_location {
        let d: usize = shape[1..].iter().product();
        (Box::new(move |i| i % d), n as f64)
    } else {
        let c = shape[1];
        let sp: usize = shape[2..].iter().product();
        (Box::new(move |i| (i / sp) % c), (n * sp) as f64)
    };
    for i in 0..dy.len() {
        let j = group_of(i);
        sdy[j] += dy[i];
        sdyx[j] += dy[i] * xhat[i];
    }
    for i in 0..dy.len() {
        let j = group_of(i);
        dx[i] += inv_std[j] / count * (count * dy[i] - sdy[j] - xhat[i] * sdyx[j]);
    }
}

/// Largest relative discrepancy between reverse-mode and central-difference
/// gradients of the scalar function `f` at `inputs`.
///
/// Per coordinate the error is `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::usage(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").data().to_vec();
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max((analytic[j] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_difference_check_many`].
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), step)
}
