//! Parameterized layers and a sequential container.
//!
//! Layers are plain parameter holders. A forward pass binds their parameters
//! onto a [`Tape`] as leaves, so the same layer can be run with its weights
//! trainable (encoder step) or frozen (classifier step) without copying.

use rand::Rng;

use crate::autodiff::{Broadcast, NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance stabilizer inside every normalization square root.
pub const NORM_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics moving average.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update running statistics.
    Train,
    /// Normalize with running statistics; a deterministic per-sample function.
    Eval,
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: uniform_init(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Tensor::zeros([out_ch])),
            stride,
            padding,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_init(&[outputs, inputs], inputs, rng),
            bias: bias.then(|| Tensor::zeros([outputs])),
        }
    }
}

/// Batch normalization computed independently at every (channel, row, col)
/// coordinate, with no learnable scale or shift.
#[derive(Clone, Debug)]
pub struct PerLocationNorm {
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl PerLocationNorm {
    /// `shape` is the per-sample activation shape, e.g. `[C, H, W]`.
    pub fn new(shape: &[usize]) -> Self {
        Self {
            eps: NORM_EPS,
            momentum: NORM_MOMENTUM,
            running_mean: Tensor::zeros(shape.to_vec()),
            running_var: Tensor::full(shape.to_vec(), 1.0),
        }
    }
}

/// Batch normalization with statistics pooled over batch and spatial axes.
#[derive(Clone, Debug)]
pub struct StandardBatchNorm {
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Learnable `(scale, shift)` per channel, when enabled.
    pub affine: Option<(Tensor, Tensor)>,
}

impl StandardBatchNorm {
    pub fn new(channels: usize, affine: bool) -> Self {
        Self {
            eps: NORM_EPS,
            momentum: NORM_MOMENTUM,
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], 1.0),
            affine: affine.then(|| (Tensor::full([channels], 1.0), Tensor::zeros([channels]))),
        }
    }
}

/// Learnable per-channel additive shift.
#[derive(Clone, Debug)]
pub struct ChannelBias {
    pub shift: Tensor,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Dense(Dense),
    PerLocationNorm(PerLocationNorm),
    BatchNorm(StandardBatchNorm),
    ChannelBias(ChannelBias),
    MaxPool(usize),
    AvgPool(usize),
    Relu,
    Tanh,
    Flatten,
}

fn ema(running: &mut Tensor, batch: &[f64], momentum: f64) {
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Dense(_) => "dense",
            Layer::PerLocationNorm(_) => "per_location_norm",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::ChannelBias(_) => "channel_bias",
            Layer::MaxPool(_) => "max_pool",
            Layer::AvgPool(_) => "avg_pool",
            Layer::Relu => "relu",
            Layer::Tanh => "tanh",
            Layer::Flatten => "flatten",
        }
    }

    /// Learnable parameters in binding order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::Dense(d) => std::iter::once(&d.weight).chain(d.bias.as_ref()).collect(),
            Layer::BatchNorm(b) => b.affine.iter().flat_map(|(s, t)| [s, t]).collect(),
            Layer::ChannelBias(b) => vec![&b.shift],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::Dense(d) => std::iter::once(&mut d.weight).chain(d.bias.as_mut()).collect(),
            Layer::BatchNorm(b) => b.affine.iter_mut().flat_map(|(s, t)| [s, t]).collect(),
            Layer::ChannelBias(b) => vec![&mut b.shift],
            _ => Vec::new(),
        }
    }

    /// Parameters and running statistics, named, for serialization.
    pub fn state(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv(c) => {
                let mut v = vec![("weight", &c.weight)];
                v.extend(c.bias.as_ref().map(|b| ("bias", b)));
                v
            }
            Layer::Dense(d) => {
                let mut v = vec![("weight", &d.weight)];
                v.extend(d.bias.as_ref().map(|b| ("bias", b)));
                v
            }
            Layer::PerLocationNorm(n) => {
                vec![("running_mean", &n.running_mean), ("running_var", &n.running_var)]
            }
            Layer::BatchNorm(n) => {
                let mut v = vec![("running_mean", &n.running_mean), ("running_var", &n.running_var)];
                if let Some((s, t)) = &n.affine {
                    v.push(("scale", s));
                    v.push(("shift", t));
                }
                v
            }
            Layer::ChannelBias(b) => vec![("shift", &b.shift)],
            _ => Vec::new(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Conv(c) => {
                let mut v = vec![("weight", &mut c.weight)];
                v.extend(c.bias.as_mut().map(|b| ("bias", b)));
                v
            }
            Layer::Dense(d) => {
                let mut v = vec![("weight", &mut d.weight)];
                v.extend(d.bias.as_mut().map(|b| ("bias", b)));
                v
            }
            Layer::PerLocationNorm(n) => {
                vec![("running_mean", &mut n.running_mean), ("running_var", &mut n.running_var)]
            }
            Layer::BatchNorm(n) => {
                let mut v = vec![("running_mean", &mut n.running_mean), ("running_var", &mut n.running_var)];
                if let Some((s, t)) = &mut n.affine {
                    v.push(("scale", s));
                    v.push(("shift", t));
                }
                v
            }
            Layer::ChannelBias(b) => vec![("shift", &mut b.shift)],
            _ => Vec::new(),
        }
    }

    /// Applies the layer. `params` are this layer's bound parameters in
    /// [`Layer::params`] order. Training-mode normalization also returns the
    /// batch statistics, to be folded into the running statistics with
    /// [`Layer::commit`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        mode: Mode,
    ) -> Result<(Var, Option<NormStats>)> {
        let y = match self {
            Layer::Conv(c) => tape.conv2d(x, params[0], params.get(1).copied(), c.stride, c.padding)?,
            Layer::Dense(_) => tape.affine(x, params[0], params.get(1).copied())?,
            Layer::PerLocationNorm(n) => match mode {
                Mode::Train => {
                    let (y, stats) = tape.batch_normalize(x, n.eps, true)?;
                    return Ok((y, Some(stats)));
                }
                Mode::Eval => {
                    let shape = tape.value(x).shape();
                    if shape[1..] != *n.running_mean.shape() {
                        return Err(Error::dim(format!(
                            "per-location norm for {:?} applied to {shape:?}",
                            n.running_mean.shape()
                        )));
                    }
                    let (scale, shift) = eval_coefficients(&n.running_mean, &n.running_var, n.eps);
                    tape.fixed_affine(x, &scale, &shift, Broadcast::PerLocation)?
                }
            },
            Layer::BatchNorm(n) => {
                let (y, stats) = match mode {
                    Mode::Train => {
                        let (y, s) = tape.batch_normalize(x, n.eps, false)?;
                        (y, Some(s))
                    }
                    Mode::Eval => {
                        let (scale, shift) = eval_coefficients(&n.running_mean, &n.running_var, n.eps);
                        (tape.fixed_affine(x, &scale, &shift, Broadcast::PerChannel)?, None)
                    }
                };
                let y = match n.affine {
                    Some(_) => tape.channel_affine(y, Some(params[0]), Some(params[1]))?,
                    None => y,
                };
                return Ok((y, stats));
            }
            Layer::ChannelBias(_) => tape.channel_affine(x, None, Some(params[0]))?,
            Layer::MaxPool(k) => tape.max_pool2d(x, *k)?,
            Layer::AvgPool(k) => tape.avg_pool2d(x, *k)?,
            Layer::Relu => tape.relu(x)?,
            Layer::Tanh => tape.tanh(x)?,
            Layer::Flatten => tape.flatten(x)?,
        };
        Ok((y, None))
    }

    /// Folds batch statistics into the running averages.
    pub fn commit(&mut self, stats: &NormStats) {
        match self {
            Layer::PerLocationNorm(n) => {
                ema(&mut n.running_mean, &stats.mean, n.momentum);
                ema(&mut n.running_var, &stats.var, n.momentum);
            }
            Layer::BatchNorm(n) => {
                ema(&mut n.running_mean, &stats.mean, n.momentum);
                ema(&mut n.running_var, &stats.var, n.momentum);
            }
            _ => {}
        }
    }
}

fn eval_coefficients(mean: &Tensor, var: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let scale: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let shift = mean.data().iter().zip(&scale).map(|(m, s)| -m * s).collect();
    (scale, shift)
}

/// Result of running a [`Sequential`] stack.
pub struct ForwardPass {
    pub output: Var,
    /// Input to the final layer (the pre-activation when the stack ends in an
    /// activation).
    pub head_input: Var,
    /// `(layer index, batch statistics)` for every training-mode norm.
    pub stats: Vec<(usize, NormStats)>,
}

#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Places every parameter on the tape, in [`Sequential::params`] order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var, mode: Mode) -> Result<ForwardPass> {
        let mut offset = 0;
        let mut h = x;
        let mut head_input = x;
        let mut stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let count = layer.params().len();
            let params = bound
                .get(offset..offset + count)
                .ok_or_else(|| Error::usage("bound parameter list is shorter than the network"))?;
            offset += count;
            head_input = h;
            let (y, s) = layer.forward(tape, h, params, mode)?;
            if let Some(s) = s {
                stats.push((i, s));
            }
            h = y;
        }
        Ok(ForwardPass { output: h, head_input, stats })
    }

    pub fn commit(&mut self, stats: &[(usize, NormStats)]) {
        for (i, s) in stats {
            self.layers[*i].commit(s);
        }
    }

    /// Forward pass without gradient tracking. Commits running statistics
    /// in training mode.
    pub fn run(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let pass = self.forward(&mut tape, &bound, xv, mode)?;
        self.commit(&pass.stats);
        Ok(tape.value(pass.output).clone())
    }

    /// Eval-mode forward pass; never mutates the network.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let pass = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        Ok(tape.value(pass.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn per_coord_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let n = t.batch() as f64;
        let d = t.sample_len();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for row in t.data().chunks(d) {
            for j in 0..d {
                mean[j] += row[j] / n;
            }
        }
        for row in t.data().chunks(d) {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2) / n;
            }
        }
        (mean, var)
    }

    #[test]
    fn per_location_norm_of_constant_batch_is_zero() {
        let mut seq = Sequential::new(vec![Layer::PerLocationNorm(PerLocationNorm::new(&[2, 2, 2]))]);
        let x = Tensor::from_fn([3, 2, 2, 2], |i| (i % 8) as f64 * 3.0);
        let y = seq.run(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn standard_norm_is_idempotent_on_standardized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Tensor::from_fn([8, 2, 3, 3], |_| rng.gen_range(-2.0..2.0));
        // Standardize exactly (pooled over batch and space, eps = 0).
        let mut tape = Tape::new();
        let v = tape.constant(raw);
        let (xs, _) = tape.batch_normalize(v, 0.0, false).unwrap();
        let standardized = tape.value(xs).clone();

        let mut bn = StandardBatchNorm::new(2, false);
        let mut seq = Sequential::new(vec![Layer::BatchNorm(bn.clone())]);
        let out = seq.run(&standardized, Mode::Train).unwrap();
        let shrink = 1.0 / (1.0 + NORM_EPS).sqrt();
        for (o, x) in out.data().iter().zip(standardized.data()) {
            assert!((o - x * shrink).abs() < 1e-12);
        }

        bn.eps = 1e-12;
        let mut seq = Sequential::new(vec![Layer::BatchNorm(bn)]);
        let out = seq.run(&standardized, Mode::Train).unwrap();
        assert!(out.max_abs_diff(&standardized) < 1e-6);
    }

    #[test]
    fn avg_pool_keeps_constants_and_zero_conv_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::full([2, 3, 4, 4], 0.75);
        let mut pool = Sequential::new(vec![Layer::AvgPool(2)]);
        assert!(pool.run(&x, Mode::Eval).unwrap().data().iter().all(|v| *v == 0.75));

        let mut conv = Conv2d::new(3, 4, 3, 1, 1, false, &mut rng);
        conv.weight = Tensor::zeros(conv.weight.shape().to_vec());
        let mut seq = Sequential::new(vec![Layer::Conv(conv)]);
        assert!(seq.run(&x, Mode::Eval).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tanh_head_is_bounded() {
        let mut seq = Sequential::new(vec![Layer::Tanh]);
        let x = Tensor::from_fn([4, 5], |i| (i as f64 - 10.0) * 1e3);
        let y = seq.run(&x, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let small = seq.run(&Tensor::from_fn([1, 3], |i| i as f64 - 1.0), Mode::Eval).unwrap();
        assert!(small.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn per_location_norm_needs_batch_of_two_in_train_mode() {
        let mut seq = Sequential::new(vec![Layer::PerLocationNorm(PerLocationNorm::new(&[1, 2, 2]))]);
        let x = Tensor::zeros([1, 1, 2, 2]);
        assert!(matches!(seq.run(&x, Mode::Train), Err(Error::Usage(_))));
        assert!(seq.run(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_converge_to_train_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = [2, 3, 3];
        let mut seq = Sequential::new(vec![Layer::PerLocationNorm(PerLocationNorm::new(&shape))]);
        let sample = |rng: &mut ChaCha8Rng, n: usize| {
            Tensor::from_fn([n, 2, 3, 3], |i| 3.0 + (i % 18) as f64 * 0.5 + rng.gen_range(-2.0..2.0))
        };
        for _ in 0..100 {
            seq.run(&sample(&mut rng, 512), Mode::Train).unwrap();
        }
        let probe = sample(&mut rng, 4096);
        let eval = seq.infer(&probe).unwrap();
        let train = seq.clone().run(&probe, Mode::Train).unwrap();
        let (em, ev) = per_coord_stats(&eval);
        let (tm, tv) = per_coord_stats(&train);
        for j in 0..em.len() {
            assert!((em[j] - tm[j]).abs() < 0.05, "mean {} vs {}", em[j], tm[j]);
            assert!((ev[j] / tv[j] - 1.0).abs() < 0.05, "var {} vs {}", ev[j], tv[j]);
        }
    }
}
