//! Encoder and classifier architectures, plus the fixed baseline encoders.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    ChannelBias, Conv2d, Dense, ForwardPass, Layer, Mode, PerLocationNorm, Sequential, StandardBatchNorm,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    PerLocation,
    Standard { affine: bool },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    Dense { outputs: usize, bias: bool },
    Norm(NormKind),
    /// Learnable per-channel shift (only used by normalization ablations).
    ChannelBias,
    MaxPool(usize),
    AvgPool(usize),
    Relu,
    Tanh,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { out_channels, kernel, stride, padding, bias } => {
                write!(f, "conv {out_channels} {kernel} {stride} {padding}")?;
                if *bias {
                    write!(f, " bias")?;
                }
                Ok(())
            }
            LayerSpec::Dense { outputs, bias } => {
                write!(f, "dense {outputs}{}", if *bias { " bias" } else { "" })
            }
            LayerSpec::Norm(NormKind::PerLocation) => write!(f, "norm per_location"),
            LayerSpec::Norm(NormKind::Standard { affine: false }) => write!(f, "norm standard"),
            LayerSpec::Norm(NormKind::Standard { affine: true }) => write!(f, "norm standard_affine"),
            LayerSpec::ChannelBias => write!(f, "channel_bias"),
            LayerSpec::MaxPool(k) => write!(f, "maxpool {k}"),
            LayerSpec::AvgPool(k) => write!(f, "avgpool {k}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Tanh => write!(f, "tanh"),
            LayerSpec::Flatten => write!(f, "flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let toks: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Architecture(format!("cannot parse layer `{s}`"));
        let num = |i: usize| -> Result<usize> { toks.get(i).and_then(|t| t.parse().ok()).ok_or_else(bad) };
        let spec = match toks.first().copied() {
            Some("conv") => LayerSpec::Conv {
                out_channels: num(1)?,
                kernel: num(2)?,
                stride: num(3)?,
                padding: num(4)?,
                bias: match toks.get(5) {
                    None => false,
                    Some(&"bias") => true,
                    Some(_) => return Err(bad()),
                },
            },
            Some("dense") => LayerSpec::Dense {
                outputs: num(1)?,
                bias: match toks.get(2) {
                    None => false,
                    Some(&"bias") => true,
                    Some(_) => return Err(bad()),
                },
            },
            Some("norm") => LayerSpec::Norm(match toks.get(1).copied() {
                Some("per_location") => NormKind::PerLocation,
                Some("standard") => NormKind::Standard { affine: false },
                Some("standard_affine") => NormKind::Standard { affine: true },
                _ => return Err(bad()),
            }),
            Some("channel_bias") => LayerSpec::ChannelBias,
            Some("maxpool") => LayerSpec::MaxPool(num(1)?),
            Some("avgpool") => LayerSpec::AvgPool(num(1)?),
            Some("relu") => LayerSpec::Relu,
            Some("tanh") => LayerSpec::Tanh,
            Some("flatten") => LayerSpec::Flatten,
            _ => return Err(bad()),
        };
        Ok(spec)
    }
}

/// Ordered layer descriptors plus the per-sample input shape `[C, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Encoder normalization variants compared by the stability ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormVariant {
    /// Biased convolutions, no intermediate normalization; the output keeps
    /// a standard (pooled) batch norm.
    NoNorm,
    /// Standard batch norm after every convolution, no biases anywhere.
    StandardNoBias,
    /// Per-location norm after every convolution followed by a learnable
    /// per-channel shift on intermediate layers.
    PerLocationWithBias,
    /// Per-location norm after every convolution, no biases anywhere.
    PerLocationNoBias,
}

impl NormVariant {
    pub const ALL: [NormVariant; 4] = [
        NormVariant::NoNorm,
        NormVariant::StandardNoBias,
        NormVariant::PerLocationWithBias,
        NormVariant::PerLocationNoBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormVariant::NoNorm => "no_norm",
            NormVariant::StandardNoBias => "standard_no_bias",
            NormVariant::PerLocationWithBias => "per_location_bias",
            NormVariant::PerLocationNoBias => "per_location_no_bias",
        }
    }
}

impl FromStr for NormVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Architecture(format!("unknown normalization variant `{s}`")))
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input;
        write!(f, "input {c} {h} {w}")?;
        for l in &self.layers {
            write!(f, "; {l}")?;
        }
        Ok(())
    }
}

impl FromStr for ArchitectureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(';').map(str::trim).filter(|p| !p.is_empty());
        let head: Vec<&str> = parts.next().unwrap_or("").split_whitespace().collect();
        let input = match head.as_slice() {
            ["input", c, h, w] => {
                let p = |t: &str| t.parse::<usize>().map_err(|_| Error::Architecture(format!("bad input `{t}`")));
                [p(c)?, p(h)?, p(w)?]
            }
            _ => return Err(Error::Architecture("spec must start with `input C H W`".into())),
        };
        let layers = parts.map(LayerSpec::from_str).collect::<Result<_>>()?;
        let spec = Self { input, layers };
        spec.shapes()?;
        Ok(spec)
    }
}

fn conv(out_channels: usize, bias: bool) -> LayerSpec {
    LayerSpec::Conv { out_channels, kernel: 3, stride: 1, padding: 1, bias }
}

impl ArchitectureSpec {
    /// Desk-scale encoder: four 3x3 conv blocks with per-location norm and no
    /// biases, 2x2 average pooling after the first three (x8 downsampling),
    /// three output channels and a tanh head.
    pub fn desk_encoder(input: [usize; 3], widths: [usize; 3]) -> Self {
        Self::encoder_variant(input, widths, NormVariant::PerLocationNoBias)
    }

    pub fn encoder_variant(input: [usize; 3], widths: [usize; 3], variant: NormVariant) -> Self {
        let mut layers = Vec::new();
        let conv_bias = variant == NormVariant::NoNorm;
        for &w in &widths {
            layers.push(conv(w, conv_bias));
            match variant {
                NormVariant::NoNorm => {}
                NormVariant::StandardNoBias => layers.push(LayerSpec::Norm(NormKind::Standard { affine: false })),
                NormVariant::PerLocationWithBias => {
                    layers.push(LayerSpec::Norm(NormKind::PerLocation));
                    layers.push(LayerSpec::ChannelBias);
                }
                NormVariant::PerLocationNoBias => layers.push(LayerSpec::Norm(NormKind::PerLocation)),
            }
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::AvgPool(2));
        }
        layers.push(conv(3, conv_bias));
        layers.push(LayerSpec::Norm(match variant {
            NormVariant::NoNorm | NormVariant::StandardNoBias => NormKind::Standard { affine: false },
            _ => NormKind::PerLocation,
        }));
        layers.push(LayerSpec::Tanh);
        Self { input, layers }
    }

    /// Full-resolution encoder: 224x224x3 in, 28x28x3 out, receptive field
    /// 112x112 (stages of 2, 3, 3 and 4 convolutions around three poolings).
    pub fn paper_encoder() -> Self {
        let mut layers = Vec::new();
        for (count, width, pool) in [(2, 32, true), (3, 64, true), (3, 128, true), (3, 128, false)] {
            for _ in 0..count {
                layers.push(conv(width, false));
                layers.push(LayerSpec::Norm(NormKind::PerLocation));
                layers.push(LayerSpec::Relu);
            }
            if pool {
                layers.push(LayerSpec::AvgPool(2));
            }
        }
        layers.push(conv(3, false));
        layers.push(LayerSpec::Norm(NormKind::PerLocation));
        layers.push(LayerSpec::Tanh);
        Self { input: [3, 224, 224], layers }
    }

    /// Conv blocks with bias, ReLU and 2x2 max pooling (skipped once the map
    /// is a single pixel), then a dense layer to `classes` logits.
    pub fn classifier(input: [usize; 3], widths: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut side = input[1].min(input[2]);
        for &w in widths {
            layers.push(conv(w, true));
            layers.push(LayerSpec::Relu);
            if side >= 2 {
                layers.push(LayerSpec::MaxPool(2));
                side /= 2;
            }
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { outputs: classes, bias: true });
        Self { input, layers }
    }

    /// Per-sample shape after each layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let err = |m: String| Error::Architecture(format!("layer {i} ({l}): {m}"));
            cur = match (l, cur.as_slice()) {
                (LayerSpec::Conv { out_channels, kernel, stride, padding, .. }, &[_, h, w]) => {
                    if *stride == 0 || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(err(format!("does not fit {h}x{w}")));
                    }
                    vec![
                        *out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ]
                }
                (LayerSpec::MaxPool(k) | LayerSpec::AvgPool(k), &[c, h, w]) => {
                    if *k == 0 || h < *k || w < *k {
                        return Err(err(format!("window does not fit {h}x{w}")));
                    }
                    vec![c, h / k, w / k]
                }
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::Dense { outputs, .. }, [_]) => vec![*outputs],
                (LayerSpec::Norm(NormKind::Standard { .. }) | LayerSpec::ChannelBias, s) if s.len() >= 1 => {
                    s.to_vec()
                }
                (LayerSpec::Norm(NormKind::PerLocation) | LayerSpec::Relu | LayerSpec::Tanh, s) => s.to_vec(),
                (_, s) => return Err(err(format!("incompatible with input shape {s:?}"))),
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input.to_vec()))
    }

    pub fn has_bias(&self) -> bool {
        self.layers.iter().any(|l| match l {
            LayerSpec::Conv { bias, .. } | LayerSpec::Dense { bias, .. } => *bias,
            LayerSpec::ChannelBias | LayerSpec::Norm(NormKind::Standard { affine: true }) => true,
            _ => false,
        })
    }

    /// Checks the structural rules an adversarially trained encoder must obey:
    /// no learnable biases, per-location norm right after every convolution,
    /// a `conv -> per-location norm -> tanh` head, and an output with fewer
    /// pixels than the input.
    pub fn validate_encoder(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.has_bias() {
            problems.push("encoder layers must not have learnable biases".to_string());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, LayerSpec::Conv { .. })
                && self.layers.get(i + 1) != Some(&LayerSpec::Norm(NormKind::PerLocation))
            {
                problems.push(format!("conv layer {i} is not followed by per-location norm"));
            }
            if matches!(l, LayerSpec::Norm(NormKind::Standard { .. }) | LayerSpec::Dense { .. } | LayerSpec::Flatten) {
                problems.push(format!("layer {i} ({l}) is not allowed in an encoder"));
            }
        }
        let n = self.layers.len();
        let head_ok = n >= 3
            && matches!(self.layers[n - 3], LayerSpec::Conv { .. })
            && self.layers[n - 2] == LayerSpec::Norm(NormKind::PerLocation)
            && self.layers[n - 1] == LayerSpec::Tanh;
        if !head_ok {
            problems.push("encoder head must be conv -> per-location norm -> tanh".to_string());
        }
        match self.output_shape() {
            Ok(out) if out.len() == 3 => {
                if out[1] * out[2] >= self.input[1] * self.input[2] {
                    problems.push(format!("output {out:?} is not spatially smaller than input {:?}", self.input));
                }
            }
            Ok(out) => problems.push(format!("encoder output {out:?} is not image-shaped")),
            Err(e) => problems.push(e.to_string()),
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Architecture(problems.join("; ")))
        }
    }

    /// Instantiates layers; norm layers are sized from the shape inference.
    fn instantiate(&self, rng: &mut impl Rng) -> Result<Sequential> {
        let shapes = self.shapes()?;
        let mut prev = self.input.to_vec();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (spec, shape) in self.layers.iter().zip(&shapes) {
            let layer = match spec {
                LayerSpec::Conv { out_channels, kernel, stride, padding, bias } => {
                    Layer::Conv(Conv2d::new(prev[0], *out_channels, *kernel, *stride, *padding, *bias, rng))
                }
                LayerSpec::Dense { outputs, bias } => Layer::Dense(Dense::new(prev[0], *outputs, *bias, rng)),
                LayerSpec::Norm(NormKind::PerLocation) => Layer::PerLocationNorm(PerLocationNorm::new(shape)),
                LayerSpec::Norm(NormKind::Standard { affine }) => {
                    Layer::BatchNorm(StandardBatchNorm::new(shape[0], *affine))
                }
                LayerSpec::ChannelBias => Layer::ChannelBias(ChannelBias { shift: Tensor::zeros([shape[0]]) }),
                LayerSpec::MaxPool(k) => Layer::MaxPool(*k),
                LayerSpec::AvgPool(k) => Layer::AvgPool(*k),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Tanh => Layer::Tanh,
                LayerSpec::Flatten => Layer::Flatten,
            };
            layers.push(layer);
            prev = shape.clone();
        }
        Ok(Sequential::new(layers))
    }
}

/// Receptive field `(h, w)` of one output pixel, by composing the
/// kernel/stride chain. Pooling counts as a `k x k` window with stride `k`.
pub fn receptive_field(spec: &ArchitectureSpec) -> (usize, usize) {
    let mut field = 1;
    let mut jump = 1;
    for l in &spec.layers {
        let (k, s) = match l {
            LayerSpec::Conv { kernel, stride, .. } => (*kernel, *stride),
            LayerSpec::MaxPool(k) | LayerSpec::AvgPool(k) => (*k, *k),
            _ => continue,
        };
        field += (k - 1) * jump;
        jump *= s;
    }
    (field, field)
}

/// A fixed function from a batch of images to a batch of encodings.
pub trait Encoder: Send + Sync {
    fn name(&self) -> &str;

    /// Per-sample output shape `[C, H, W]`.
    fn output_shape(&self) -> [usize; 3];

    /// Deterministic (eval-mode) encoding of `batch: (N, C, H, W)`.
    fn encode(&self, batch: &Tensor) -> Result<Tensor>;
}

fn check_input(batch: &Tensor, input: [usize; 3]) -> Result<()> {
    if batch.ndim() != 4 || batch.shape()[1..] != input {
        return Err(Error::dim(format!("expected (N, {}, {}, {}), got {:?}", input[0], input[1], input[2], batch.shape())));
    }
    Ok(())
}

fn image_shape(s: &[usize]) -> [usize; 3] {
    [s[0], s[1], s[2]]
}

#[derive(Clone, Debug)]
pub struct EncoderNetwork {
    pub spec: ArchitectureSpec,
    pub net: Sequential,
    name: String,
}

impl EncoderNetwork {
    /// Builds a validated encoder.
    pub fn build(spec: &ArchitectureSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate_encoder()?;
        Self::build_unchecked(spec, rng)
    }

    /// Builds without the structural encoder checks (normalization ablations).
    pub fn build_unchecked(spec: &ArchitectureSpec, rng: &mut impl Rng) -> Result<Self> {
        let out = spec.output_shape()?;
        if out.len() != 3 {
            return Err(Error::Architecture(format!("encoder output {out:?} is not image-shaped")));
        }
        Ok(Self { net: spec.instantiate(rng)?, spec: spec.clone(), name: "learned".into() })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Forward pass on a tape; `head_input` of the result is the normalized
    /// pre-tanh activation.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var, mode: Mode) -> Result<ForwardPass> {
        let n = tape.value(x).batch();
        if mode == Mode::Train && n < 2 {
            return Err(Error::usage("train-mode encoding needs a batch of at least 2"));
        }
        self.net.forward(tape, bound, x, mode)
    }

    /// Encodes without gradients. Train mode normalizes with batch statistics
    /// and folds them into the running statistics.
    pub fn encode_mut(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        check_input(batch, self.spec.input)?;
        if mode == Mode::Train && batch.batch() < 2 {
            return Err(Error::usage("train-mode encoding needs a batch of at least 2"));
        }
        self.net.run(batch, mode)
    }

    /// Train-mode pre-tanh activations, without touching running statistics.
    pub fn pre_activation(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        check_input(batch, self.spec.input)?;
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let pass = self.forward(&mut tape, &bound, x, mode)?;
        Ok(tape.value(pass.head_input).clone())
    }
}

impl Encoder for EncoderNetwork {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self) -> [usize; 3] {
        image_shape(&self.spec.output_shape().expect("validated at build"))
    }

    fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        check_input(batch, self.spec.input)?;
        self.net.infer(batch)
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierNetwork {
    pub spec: ArchitectureSpec,
    pub net: Sequential,
    pub classes: usize,
}

impl ClassifierNetwork {
    pub fn build(spec: &ArchitectureSpec, rng: &mut impl Rng) -> Result<Self> {
        let classes = match spec.output_shape()?.as_slice() {
            [k] if *k >= 2 => *k,
            other => return Err(Error::Architecture(format!("classifier must end in >= 2 logits, got {other:?}"))),
        };
        Ok(Self { net: spec.instantiate(rng)?, spec: spec.clone(), classes })
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn logits(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        Ok(self.net.forward(tape, bound, x, Mode::Eval)?.output)
    }

    /// Class probabilities for a batch of encodings, without gradients.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.logits(&mut tape, &bound, xv)?;
        let p = tape.softmax(z)?;
        Ok(tape.value(p).clone())
    }
}

/// `encode(x) = x`.
#[derive(Clone, Debug)]
pub struct IdentityEncoder {
    pub shape: [usize; 3],
}

impl Encoder for IdentityEncoder {
    fn name(&self) -> &str {
        "identity"
    }

    fn output_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        check_input(batch, self.shape)?;
        Ok(batch.clone())
    }
}

/// Emits the same value for every input: carries no information at all.
#[derive(Clone, Debug)]
pub struct ConstantEncoder {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub value: f64,
}

impl Encoder for ConstantEncoder {
    fn name(&self) -> &str {
        "constant"
    }

    fn output_shape(&self) -> [usize; 3] {
        self.output
    }

    fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        check_input(batch, self.input)?;
        let [c, h, w] = self.output;
        Ok(Tensor::full([batch.batch(), c, h, w], self.value))
    }
}

/// Box filter followed by subsampling, with the average taken over the
/// in-bounds part of each window (so constants are preserved at borders).
#[derive(Clone, Debug)]
pub struct BlurEncoder {
    pub input: [usize; 3],
    pub filter: usize,
    pub factor: usize,
}

impl BlurEncoder {
    pub fn new(input: [usize; 3], filter: usize, factor: usize) -> Result<Self> {
        if filter == 0 || factor == 0 || input[1] < factor || input[2] < factor {
            return Err(Error::usage(format!("blur filter {filter} / factor {factor} on {input:?}")));
        }
        Ok(Self { input, filter, factor })
    }

    /// Box width and subsampling factor scaled from full resolution
    /// (120-wide box, factor 8) in proportion to the encoder receptive field.
    pub fn desk(input: [usize; 3]) -> Self {
        Self { input, filter: 16, factor: 8 }
    }

    fn window(&self, center: usize, extent: usize) -> (usize, usize) {
        let half = self.filter / 2;
        let lo = center.saturating_sub(half);
        let hi = (center + self.filter - half).min(extent);
        (lo, hi)
    }
}

impl Encoder for BlurEncoder {
    fn name(&self) -> &str {
        "blur"
    }

    fn output_shape(&self) -> [usize; 3] {
        [self.input[0], self.input[1] / self.factor, self.input[2] / self.factor]
    }

    fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        check_input(batch, self.input)?;
        let [c, h, w] = self.input;
        let [_, ho, wo] = self.output_shape();
        let n = batch.batch();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in batch.data().chunks(h * w) {
            for oy in 0..ho {
                let (y0, y1) = self.window(oy * self.factor + self.factor / 2, h);
                for ox in 0..wo {
                    let (x0, x1) = self.window(ox * self.factor + self.factor / 2, w);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Tensor::new([n, c, ho, wo], out)
    }
}

/// Eval-mode encoding of a large image set, `chunk` samples at a time.
pub fn encode_all(encoder: &dyn Encoder, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = images.batch();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let idx: Vec<usize> = (start..end).collect();
        parts.push(encoder.encode(&images.gather_rows(&idx)?)?);
        start = end;
    }
    if parts.is_empty() {
        let [c, h, w] = encoder.output_shape();
        return Ok(Tensor::zeros([0, c, h, w]));
    }
    Tensor::concat_rows(&parts)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn paper_scale_encoder_shape_and_field() {
        let spec = ArchitectureSpec::paper_encoder();
        spec.validate_encoder().unwrap();
        assert_eq!(spec.output_shape().unwrap(), vec![3, 28, 28]);
        assert_eq!(receptive_field(&spec), (112, 112));
    }

    #[test]
    fn desk_encoder_downsamples_by_eight() {
        let spec = ArchitectureSpec::desk_encoder([3, 32, 32], [16, 32, 32]);
        spec.validate_encoder().unwrap();
        assert_eq!(spec.output_shape().unwrap(), vec![3, 4, 4]);
    }

    #[test]
    fn receptive_field_recurrence() {
        let one = ArchitectureSpec { input: [1, 8, 8], layers: vec![conv(1, false)] };
        assert_eq!(receptive_field(&one), (3, 3));
        let two = ArchitectureSpec { input: [1, 8, 8], layers: vec![conv(1, false), conv(1, false)] };
        assert_eq!(receptive_field(&two), (5, 5));
    }

    #[test]
    fn biased_encoder_is_rejected() {
        let mut spec = ArchitectureSpec::desk_encoder([3, 32, 32], [4, 4, 4]);
        spec.layers[0] = conv(4, true);
        assert!(matches!(EncoderNetwork::build(&spec, &mut rng()), Err(Error::Architecture(_))));
        for v in [NormVariant::NoNorm, NormVariant::StandardNoBias, NormVariant::PerLocationWithBias] {
            let spec = ArchitectureSpec::encoder_variant([3, 32, 32], [4, 4, 4], v);
            assert!(spec.validate_encoder().is_err(), "{v:?}");
            assert!(EncoderNetwork::build_unchecked(&spec, &mut rng()).is_ok());
        }
    }

    #[test]
    fn spec_text_round_trips() {
        for spec in [
            ArchitectureSpec::desk_encoder([3, 32, 32], [16, 32, 32]),
            ArchitectureSpec::encoder_variant([3, 16, 16], [4, 4, 4], NormVariant::PerLocationWithBias),
            ArchitectureSpec::classifier([3, 4, 4], &[16, 32, 64], 2),
        ] {
            assert_eq!(spec.to_string().parse::<ArchitectureSpec>().unwrap(), spec);
        }
    }

    #[test]
    fn classifier_on_encoding_emits_two_logits() {
        let spec = ArchitectureSpec::classifier([3, 4, 4], &[16, 32, 64], 2);
        let clf = ClassifierNetwork::build(&spec, &mut rng()).unwrap();
        let p = clf.predict_probs(&Tensor::zeros([5, 3, 4, 4])).unwrap();
        assert_eq!(p.shape(), &[5, 2]);
    }

    #[test]
    fn identity_and_blur_baselines() {
        let x = Tensor::from_fn([2, 3, 32, 32], |i| (i as f64).sin());
        let id = IdentityEncoder { shape: [3, 32, 32] };
        assert_eq!(id.encode(&x).unwrap(), x);

        let blur = BlurEncoder::desk([3, 32, 32]);
        let c = Tensor::full([2, 3, 32, 32], 0.3);
        let out = blur.encode(&c).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4, 4]);
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert_eq!(blur.encode(&x).unwrap(), blur.encode(&x).unwrap());
    }

    #[test]
    fn encoder_outputs_bounded_and_standardized_before_tanh() {
        let spec = ArchitectureSpec::desk_encoder([3, 16, 16], [4, 6, 6]);
        let enc = EncoderNetwork::build(&spec, &mut rng()).unwrap();
        let x = Tensor::from_fn([16, 3, 16, 16], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let pre = enc.pre_activation(&x, Mode::Train).unwrap();
        let d = pre.sample_len();
        for j in 0..d {
            let col: Vec<f64> = (0..16).map(|n| pre.data()[n * d + j]).collect();
            let m = col.iter().sum::<f64>() / 16.0;
            let v = col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-2, "coordinate {j}: {m} {v}");
        }
        let out = enc.encode(&Tensor::from_fn([2, 3, 16, 16], |i| i as f64 * 100.0)).unwrap();
        assert!(out.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn train_mode_with_single_sample_is_usage_error() {
        let spec = ArchitectureSpec::desk_encoder([3, 16, 16], [4, 4, 4]);
        let mut enc = EncoderNetwork::build(&spec, &mut rng()).unwrap();
        let x = Tensor::zeros([1, 3, 16, 16]);
        assert!(matches!(enc.encode_mut(&x, Mode::Train), Err(Error::Usage(_))));
        assert!(enc.encode(&x).is_ok());
    }
}
