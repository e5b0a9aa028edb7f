//! Alternating adversarial training of an encoder against a private-attribute
//! classifier, with an optional collaborating desirable-task classifier.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::{augment, AugmentationConfig, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::networks::{encode_all, ArchitectureSpec, ClassifierNetwork, EncoderNetwork};
use crate::objectives::{
    classifier_loss, combined_encoder_loss, encoder_privacy_loss, multi_desirable_labels, EncoderObjective, Utility,
};
use crate::optim::{Adam, LrSchedule};
use crate::seed::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub warmup: u64,
    /// Total iterations, warm-up included.
    pub iterations: u64,
    pub classifier_lr: LrSchedule,
    pub encoder_lr: LrSchedule,
    pub objective: EncoderObjective,
    pub private_task: String,
    pub classifier_steps: usize,
    pub encoder_steps: usize,
    pub classifier_widths: Vec<usize>,
    pub eval_every: u64,
    /// Validation samples used for the in-training accuracy (0 = all).
    pub eval_samples: usize,
    pub probe_samples: usize,
    /// Consecutive collapsed probes before the alarm fires.
    pub collapse_patience: usize,
    pub augment: Option<AugmentationConfig>,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for 32x32 synthetic tasks.
    pub fn desk(objective: EncoderObjective, seed: u64) -> Self {
        let iterations = 40_000;
        Self {
            batch: 64,
            warmup: 500,
            iterations,
            classifier_lr: LrSchedule::Constant(1e-3),
            encoder_lr: LrSchedule::StepDecay {
                base: 1e-3,
                factor: LrSchedule::quarter_decade(),
                period: (iterations as f64 / 4.3).round() as u64,
            },
            objective,
            private_task: crate::data::PRIVATE.into(),
            classifier_steps: 1,
            encoder_steps: 1,
            classifier_widths: vec![16, 32],
            eval_every: 500,
            eval_samples: 0,
            probe_samples: 256,
            collapse_patience: 3,
            augment: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch < 2 {
            errs.push(format!("batch must be at least 2, got {}", self.batch));
        }
        if self.warmup >= self.iterations {
            errs.push(format!("warm-up {} must be below total iterations {}", self.warmup, self.iterations));
        }
        if self.classifier_steps == 0 || self.encoder_steps == 0 {
            errs.push("update ratio steps must be positive".into());
        }
        if self.eval_every == 0 {
            errs.push("eval interval must be positive".into());
        }
        if self.probe_samples < 2 {
            errs.push("collapse probe needs at least 2 samples".into());
        }
        if self.collapse_patience == 0 {
            errs.push("collapse patience must be positive".into());
        }
        for (name, s) in [("classifier", &self.classifier_lr), ("encoder", &self.encoder_lr)] {
            if let Err(e) = s.validate() {
                errs.push(format!("{name} lr: {e}"));
            }
        }
        if let Err(e) = self.objective.validate() {
            errs.push(e.to_string());
        }
        if let Some(a) = &self.augment {
            if let Err(e) = a.validate() {
                errs.push(e.to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn desirable_tasks(&self) -> &[String] {
        match &self.objective.utility {
            Utility::DesirableTasks(t) => t,
            Utility::VarianceOnly => &[],
        }
    }
}

/// Epoch-wise shuffled index stream. Draws never straddle an epoch, so all
/// indices within one draw are distinct.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    pub epochs: u64,
}

impl BatchSampler {
    pub fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: n, rng, epochs: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
        self.epochs += 1;
    }

    pub fn next(&mut self, n: usize) -> Result<Vec<usize>> {
        if n > self.order.len() {
            return Err(Error::Size(format!("batch of {n} from {} samples", self.order.len())));
        }
        if self.pos + n > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Ok(out)
    }

    /// Two disjoint batches of `n`.
    pub fn next_pair(&mut self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut both = self.next(2 * n)?;
        let second = both.split_off(n);
        Ok((both, second))
    }
}

pub const ZERO_VARIANCE_TOL: f64 = 1e-6;
pub const COLLAPSE_VARIANCE: f64 = 0.1;
pub const COLLAPSE_SHARE: f64 = 0.5;

/// Share of encoder output coordinates per variance band, measured on the
/// normalized pre-tanh output of a fixed probe batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollapseSnapshot {
    pub iteration: u64,
    pub zero: f64,
    pub below_0_1: f64,
    pub below_0_5: f64,
    pub below_0_9: f64,
    pub unit_band: f64,
    pub alarm: bool,
}

/// Population variance of each coordinate across the leading axis.
pub fn coordinate_variances(x: &Tensor) -> Vec<f64> {
    let (n, len) = (x.batch(), x.sample_len());
    let mut mean = vec![0.0; len];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; len];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    var
}

#[derive(Clone, Debug)]
pub struct CollapseMonitor {
    probe: Tensor,
    patience: usize,
    streak: usize,
    pub fired: bool,
    pub history: Vec<CollapseSnapshot>,
}

impl CollapseMonitor {
    pub fn new(probe: Tensor, patience: usize) -> Self {
        Self { probe, patience, streak: 0, fired: false, history: Vec::new() }
    }

    pub fn observe(&mut self, encoder: &EncoderNetwork, iteration: u64) -> Result<CollapseSnapshot> {
        let pre = encoder.pre_activation(&self.probe, Mode::Train)?;
        let var = coordinate_variances(&pre);
        let share = |f: &dyn Fn(f64) -> bool| var.iter().filter(|&&v| f(v)).count() as f64 / var.len() as f64;
        let below_0_1 = share(&|v| v < COLLAPSE_VARIANCE);
        if below_0_1 >= COLLAPSE_SHARE {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= self.patience {
            self.fired = true;
        }
        let snap = CollapseSnapshot {
            iteration,
            zero: share(&|v| v < ZERO_VARIANCE_TOL),
            below_0_1,
            below_0_5: share(&|v| v < 0.5),
            below_0_9: share(&|v| v < 0.9),
            unit_band: share(&|v| (0.9..=1.1).contains(&v)),
            alarm: self.fired,
        };
        self.history.push(snap.clone());
        Ok(snap)
    }
}

/// Losses and accuracy from one classifier step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassifierStep {
    pub private_loss: f64,
    pub private_accuracy: f64,
    pub desirable_loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EncoderStep {
    pub privacy_loss: f64,
    pub utility_loss: f64,
    pub total: f64,
}

/// One row per evaluation interval. Training losses are means over the
/// interval.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: u64,
    pub phase: &'static str,
    pub classifier_loss: f64,
    pub classifier_batch_accuracy: f64,
    pub desirable_classifier_loss: f64,
    pub encoder_privacy_loss: f64,
    pub encoder_utility_loss: f64,
    pub encoder_total_loss: f64,
    pub classifier_lr: f64,
    pub encoder_lr: f64,
    pub val_private_accuracy: f64,
    pub val_desirable_accuracy: Option<f64>,
    pub collapse: CollapseSnapshot,
}

fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = probs.argmax_rows()?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
}

fn apply(opt: &mut Adam, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
    let mut params = params;
    let refs: Vec<&Tensor> = grads.iter().collect();
    opt.step(&mut params, &refs, lr)
}

/// All mutable training state. Networks are public so callers can inspect or
/// serialize them.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub encoder: EncoderNetwork,
    pub private: ClassifierNetwork,
    pub desirable: Option<ClassifierNetwork>,
    pub monitor: CollapseMonitor,
    pub iteration: u64,
    data: &'a TaskDataset,
    private_labels: Vec<usize>,
    desirable_labels: Option<Vec<usize>>,
    sampler: BatchSampler,
    aug_rng: ChaCha8Rng,
    opt_encoder: Adam,
    opt_private: Adam,
    opt_desirable: Adam,
    eval: Split,
    eval_desirable: Option<Vec<usize>>,
}

fn desirable_labels_of(split: &Split, tasks: &[String]) -> Result<Option<Vec<usize>>> {
    match tasks {
        [] => Ok(None),
        [one] => Ok(Some(split.task(one)?.to_vec())),
        many => {
            let per: Vec<&[usize]> = many.iter().map(|t| split.task(t)).collect::<Result<_>>()?;
            Ok(Some(multi_desirable_labels(&per)?))
        }
    }
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, encoder: EncoderNetwork, data: &'a TaskDataset) -> Result<Self> {
        cfg.validate()?;
        if encoder.spec.input != data.image_shape() {
            return Err(Error::dim(format!(
                "encoder expects {:?}, dataset images are {:?}",
                encoder.spec.input,
                data.image_shape()
            )));
        }
        if data.train.len() < 2 * cfg.batch {
            return Err(Error::Size(format!("{} training samples for batch {}", data.train.len(), cfg.batch)));
        }
        let enc_shape = encoder.spec.output_shape()?;
        let enc_shape = [enc_shape[0], enc_shape[1], enc_shape[2]];
        let private = ClassifierNetwork::build(
            &ArchitectureSpec::classifier(enc_shape, &cfg.classifier_widths, 2),
            &mut stream(cfg.seed, "init/private"),
        )?;
        let tasks = cfg.desirable_tasks().to_vec();
        let desirable = match tasks.len() {
            0 => None,
            n => Some(ClassifierNetwork::build(
                &ArchitectureSpec::classifier(enc_shape, &cfg.classifier_widths, if n == 1 { 2 } else { n + 1 }),
                &mut stream(cfg.seed, "init/desirable"),
            )?),
        };
        let private_labels = data.train.task(&cfg.private_task)?.to_vec();
        let desirable_labels = desirable_labels_of(&data.train, &tasks)?;

        let eval = if cfg.eval_samples == 0 || cfg.eval_samples >= data.val.len() {
            data.val.clone()
        } else {
            data.val.subset(&(0..cfg.eval_samples).collect::<Vec<_>>())?
        };
        eval.task(&cfg.private_task)?;
        let eval_desirable = desirable_labels_of(&eval, &tasks)?;

        let mut probe_rng = stream(cfg.seed, "probe");
        let mut idx: Vec<usize> = (0..data.train.len()).collect();
        idx.shuffle(&mut probe_rng);
        idx.truncate(cfg.probe_samples.min(data.train.len()));
        let monitor = CollapseMonitor::new(data.train.images.gather_rows(&idx)?, cfg.collapse_patience);

        Ok(Self {
            sampler: BatchSampler::new(data.train.len(), stream(cfg.seed, "sampler")),
            aug_rng: stream(cfg.seed, "augment"),
            cfg,
            encoder,
            private,
            desirable,
            monitor,
            iteration: 0,
            data,
            private_labels,
            desirable_labels,
            opt_encoder: Adam::new(),
            opt_private: Adam::new(),
            opt_desirable: Adam::new(),
            eval,
            eval_desirable,
        })
    }

    fn batch(&mut self, idx: &[usize]) -> Result<Tensor> {
        let imgs = self.data.train.images.gather_rows(idx)?;
        match &self.cfg.augment {
            Some(a) => augment(&imgs, a, Mode::Train, &mut self.aug_rng),
            None => Ok(imgs),
        }
    }

    /// Updates the classifiers on `idx` against the current encoder. The
    /// encoder is evaluated in train mode but its parameters are constants.
    pub fn classifier_step(&mut self, idx: &[usize], lr: f64) -> Result<ClassifierStep> {
        let x = self.batch(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| self.private_labels[i]).collect();
        let mut tape = Tape::new();
        let enc_bound = self.encoder.net.bind(&mut tape, false);
        let xv = tape.constant(x);
        let pass = self.encoder.forward(&mut tape, &enc_bound, xv, Mode::Train)?;
        let code = pass.output;

        let priv_bound = self.private.net.bind(&mut tape, true);
        let z = self.private.logits(&mut tape, &priv_bound, code)?;
        let p = tape.softmax(z)?;
        let priv_loss = tape.cross_entropy(p, &labels)?;
        let acc = accuracy(tape.value(p), &labels)?;
        let mut out = ClassifierStep {
            private_loss: tape.value(priv_loss).item()?,
            private_accuracy: acc,
            desirable_loss: 0.0,
        };
        let mut total = priv_loss;
        let mut des_bound = Vec::new();
        if let (Some(d), Some(dl)) = (&self.desirable, &self.desirable_labels) {
            let dlabels: Vec<usize> = idx.iter().map(|&i| dl[i]).collect();
            des_bound = d.net.bind(&mut tape, true);
            let zd = d.logits(&mut tape, &des_bound, code)?;
            let dloss = classifier_loss(&mut tape, zd, &dlabels)?;
            out.desirable_loss = tape.value(dloss).item()?;
            total = tape.add(total, dloss)?;
        }
        let stats = pass.stats;
        let mut grads = tape.backward(total)?;
        let take = |g: &mut crate::autodiff::Gradients, vs: &[crate::autodiff::Var]| -> Vec<Tensor> {
            vs.iter().map(|&v| g.take(v).expect("trainable leaf has a gradient")).collect()
        };
        let gp = take(&mut grads, &priv_bound);
        apply(&mut self.opt_private, self.private.net.params_mut(), &gp, lr)?;
        if let Some(d) = &mut self.desirable {
            let gd = take(&mut grads, &des_bound);
            apply(&mut self.opt_desirable, d.net.params_mut(), &gd, lr)?;
        }
        self.encoder.net.commit(&stats);
        Ok(out)
    }

    /// Updates the encoder on `idx` against the current classifiers, whose
    /// parameters are constants for this step.
    pub fn encoder_step(&mut self, idx: &[usize], lr: f64) -> Result<EncoderStep> {
        let x = self.batch(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| self.private_labels[i]).collect();
        let mut tape = Tape::new();
        let enc_bound = self.encoder.net.bind(&mut tape, true);
        let xv = tape.constant(x);
        let pass = self.encoder.forward(&mut tape, &enc_bound, xv, Mode::Train)?;
        let code = pass.output;

        let priv_bound = self.private.net.bind(&mut tape, false);
        let z = self.private.logits(&mut tape, &priv_bound, code)?;
        let p = tape.softmax(z)?;
        let privacy = encoder_privacy_loss(&mut tape, p, &labels, self.cfg.objective.privacy)?;
        let mut utility = Vec::new();
        if let (Some(d), Some(dl)) = (&self.desirable, &self.desirable_labels) {
            let dlabels: Vec<usize> = idx.iter().map(|&i| dl[i]).collect();
            let bound = d.net.bind(&mut tape, false);
            let zd = d.logits(&mut tape, &bound, code)?;
            utility.push(classifier_loss(&mut tape, zd, &dlabels)?);
        }
        let total = combined_encoder_loss(&mut tape, privacy, &utility, self.cfg.objective.alpha)?;
        let out = EncoderStep {
            privacy_loss: tape.value(privacy).item()?,
            utility_loss: match utility.first() {
                Some(&u) => tape.value(u).item()?,
                None => 0.0,
            },
            total: tape.value(total).item()?,
        };
        let stats = pass.stats;
        let mut grads = tape.backward(total)?;
        let g: Vec<Tensor> = enc_bound.iter().map(|&v| grads.take(v).expect("trainable leaf has a gradient")).collect();
        apply(&mut self.opt_encoder, self.encoder.net.params_mut(), &g, lr)?;
        self.encoder.net.commit(&stats);
        Ok(out)
    }

    /// Validation accuracies of the in-training classifiers on eval-mode
    /// encodings.
    pub fn evaluate(&self) -> Result<(f64, Option<f64>)> {
        let code = encode_all(&self.encoder, &self.eval.images, 256)?;
        let p = self.private.predict_probs(&code)?;
        let pa = accuracy(&p, self.eval.task(&self.cfg.private_task)?)?;
        let da = match (&self.desirable, &self.eval_desirable) {
            (Some(d), Some(l)) => Some(accuracy(&d.predict_probs(&code)?, l)?),
            _ => None,
        };
        Ok((pa, da))
    }

    /// Runs the remaining schedule: warm-up, then alternating steps, with one
    /// log row per evaluation interval and one at the end.
    pub fn run(&mut self) -> Result<Vec<LogRow>> {
        self.run_with(|_| Ok(()))
    }

    /// [`Trainer::run`], handing each log row to `on_row` as soon as it exists.
    pub fn run_with(&mut self, mut on_row: impl FnMut(&LogRow) -> Result<()>) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        let mut acc = Accum::default();
        while self.iteration < self.cfg.iterations {
            let it = self.iteration;
            let warm = it < self.cfg.warmup;
            let adv = it.saturating_sub(self.cfg.warmup);
            let c_lr = self.cfg.classifier_lr.lr(it, false);
            let e_lr = self.cfg.encoder_lr.lr(adv, false);
            if warm {
                let idx = self.sampler.next(self.cfg.batch)?;
                acc.add_classifier(self.classifier_step(&idx, c_lr)?);
            } else {
                let (b, cs, es) = (self.cfg.batch, self.cfg.classifier_steps, self.cfg.encoder_steps);
                let all = self.sampler.next(b * (cs + es))?;
                let (c_part, e_part) = all.split_at(b * cs);
                for idx in c_part.chunks(b) {
                    acc.add_classifier(self.classifier_step(idx, c_lr)?);
                }
                for idx in e_part.chunks(b) {
                    acc.add_encoder(self.encoder_step(idx, e_lr)?);
                }
            }
            self.iteration += 1;
            if self.iteration % self.cfg.eval_every == 0 || self.iteration == self.cfg.iterations {
                let (vp, vd) = self.evaluate()?;
                let collapse = self.monitor.observe(&self.encoder, self.iteration)?;
                rows.push(acc.row(
                    self.iteration,
                    if warm { "warmup" } else { "adversarial" },
                    c_lr,
                    if warm { 0.0 } else { e_lr },
                    vp,
                    vd,
                    collapse,
                ));
                on_row(rows.last().expect("just pushed"))?;
                acc = Accum::default();
            }
        }
        Ok(rows)
    }
}

#[derive(Default)]
struct Accum {
    c: Vec<ClassifierStep>,
    e: Vec<EncoderStep>,
}

impl Accum {
    fn add_classifier(&mut self, s: ClassifierStep) {
        self.c.push(s);
    }

    fn add_encoder(&mut self, s: EncoderStep) {
        self.e.push(s);
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &self,
        iteration: u64,
        phase: &'static str,
        classifier_lr: f64,
        encoder_lr: f64,
        val_private_accuracy: f64,
        val_desirable_accuracy: Option<f64>,
        collapse: CollapseSnapshot,
    ) -> LogRow {
        fn mean<T>(v: &[T], f: impl Fn(&T) -> f64) -> f64 {
            if v.is_empty() {
                0.0
            } else {
                v.iter().map(f).sum::<f64>() / v.len() as f64
            }
        }
        LogRow {
            iteration,
            phase,
            classifier_loss: mean(&self.c, |s| s.private_loss),
            classifier_batch_accuracy: mean(&self.c, |s| s.private_accuracy),
            desirable_classifier_loss: mean(&self.c, |s| s.desirable_loss),
            encoder_privacy_loss: mean(&self.e, |s| s.privacy_loss),
            encoder_utility_loss: mean(&self.e, |s| s.utility_loss),
            encoder_total_loss: mean(&self.e, |s| s.total),
            classifier_lr,
            encoder_lr,
            val_private_accuracy,
            val_desirable_accuracy,
            collapse,
        }
    }
}

/// Pass over the warm-up only; the encoder's parameters are left untouched.
pub fn warm_up(trainer: &mut Trainer<'_>) -> Result<Vec<LogRow>> {
    let total = trainer.cfg.iterations;
    trainer.cfg.iterations = trainer.cfg.warmup.max(trainer.iteration);
    let out = trainer.run();
    trainer.cfg.iterations = total;
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn sampler_pairs_are_disjoint_and_reshuffle() {
        let mut s = BatchSampler::new(10, ChaCha8Rng::seed_from_u64(0));
        for _ in 0..20 {
            let (a, b) = s.next_pair(4).unwrap();
            assert!(a.iter().all(|i| !b.contains(i)));
        }
        assert!(s.epochs > 1);
        assert!(matches!(s.next(11), Err(Error::Size(_))));
    }

    #[test]
    fn coordinate_variance_matches_hand_value() {
        let x = Tensor::new([4, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]).unwrap();
        assert_eq!(coordinate_variances(&x), vec![1.25, 0.0]);
    }

    #[test]
    fn invalid_configs_are_itemized() {
        let mut cfg = TrainConfig::desk(
            EncoderObjective {
                privacy: crate::objectives::PrivacyUpdateMode::LabelFlip,
                utility: Utility::VarianceOnly,
                alpha: 0.0625,
            },
            0,
        );
        cfg.batch = 1;
        cfg.warmup = cfg.iterations;
        match cfg.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
