//! Post-hoc verification: train a fresh classifier on a frozen encoder's
//! outputs until validation accuracy saturates, drop the learning rate once,
//! train to saturation again, and report test accuracy at the best
//! validation checkpoint.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment, AugmentationConfig, TaskDataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::networks::{encode_all, ArchitectureSpec, ClassifierNetwork, Encoder};
use crate::optim::Adam;
use crate::seed::stream;
use crate::tensor::Tensor;
use crate::trainer::BatchSampler;

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub lr: f64,
    pub drop_factor: f64,
    pub batch: usize,
    pub eval_every: u64,
    pub window: usize,
    pub delta: f64,
    pub max_iterations: u64,
    pub classifier_widths: Vec<usize>,
    /// Training-time augmentation of the raw images before encoding. Off by
    /// default: encodings are computed once and reused.
    pub augment: Option<AugmentationConfig>,
    pub seed: u64,
}

impl VerifyConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            lr: 1e-3,
            drop_factor: 0.1,
            batch: 64,
            eval_every: 200,
            window: 20,
            delta: 0.0025,
            max_iterations: 60_000,
            classifier_widths: vec![16, 32],
            augment: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0) {
            errs.push(format!("verification lr must be positive, got {}", self.lr));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor < 1.0) {
            errs.push(format!("lr drop factor must be in (0,1), got {}", self.drop_factor));
        }
        if self.batch < 1 || self.eval_every == 0 || self.window == 0 {
            errs.push("batch, eval interval and window must be positive".into());
        }
        if !(self.delta >= 0.0) {
            errs.push(format!("saturation delta must be non-negative, got {}", self.delta));
        }
        if self.max_iterations == 0 {
            errs.push("iteration cap must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Declares saturation once the best accuracy seen has improved by less than
/// `delta` over the last `window` evaluations.
#[derive(Clone, Debug)]
pub struct SaturationDetector {
    window: usize,
    delta: f64,
    best: Vec<f64>,
}

impl SaturationDetector {
    pub fn new(window: usize, delta: f64) -> Self {
        Self { window, delta, best: Vec::new() }
    }

    pub fn best(&self) -> f64 {
        self.best.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Records an evaluation and reports whether training has saturated.
    pub fn observe(&mut self, accuracy: f64) -> bool {
        let b = self.best().max(accuracy);
        self.best.push(b);
        let n = self.best.len();
        n > self.window && b - self.best[n - 1 - self.window] < self.delta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub phase: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub task: String,
    pub encoder: String,
    pub curve: Vec<CurvePoint>,
    /// Validation accuracy of the best checkpoint.
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub total_iterations: u64,
    pub lr_drop_iteration: Option<u64>,
    pub saturated: bool,
}

impl VerificationReport {
    /// First logged iteration at which validation accuracy reaches
    /// `fraction` of the report's final accuracy.
    pub fn iterations_to_fraction(&self, fraction: f64) -> Option<u64> {
        let target = fraction * self.val_accuracy;
        self.curve.iter().find(|p| p.val_accuracy >= target).map(|p| p.iteration)
    }

    /// Best-so-far validation accuracy along the curve.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut b = f64::NEG_INFINITY;
        self.curve
            .iter()
            .map(|p| {
                b = b.max(p.val_accuracy);
                b
            })
            .collect()
    }
}

fn accuracy(clf: &ClassifierNetwork, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut hits = 0;
    for start in (0..labels.len()).step_by(512) {
        let end = (start + 512).min(labels.len());
        let idx: Vec<usize> = (start..end).collect();
        let pred = clf.predict_probs(&x.gather_rows(&idx)?)?.argmax_rows()?;
        hits += pred.iter().zip(&labels[start..end]).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Runs the verification protocol for one (encoder, task) cell. The
/// classifier initialization depends only on the seed and task, so different
/// encoders are compared from identical starting weights.
pub fn train_to_saturation(
    encoder: &dyn Encoder,
    data: &TaskDataset,
    task: &str,
    cfg: &VerifyConfig,
) -> Result<VerificationReport> {
    cfg.validate()?;
    let train_labels = data.train.task(task)?;
    let val_labels = data.val.task(task)?;
    let test_labels = data.test.task(task)?;
    let classes = train_labels.iter().max().map_or(2, |m| (m + 1).max(2));

    let enc_train = match cfg.augment {
        Some(_) => None,
        None => Some(encode_all(encoder, &data.train.images, 256)?),
    };
    let enc_val = encode_all(encoder, &data.val.images, 256)?;
    let enc_test = encode_all(encoder, &data.test.images, 256)?;

    let spec = ArchitectureSpec::classifier(encoder.output_shape(), &cfg.classifier_widths, classes);
    let mut clf = ClassifierNetwork::build(&spec, &mut stream(cfg.seed, &format!("verify/init/{task}")))?;
    let mut sampler = BatchSampler::new(data.train.len(), stream(cfg.seed, &format!("verify/sampler/{task}")));
    let mut aug_rng = stream(cfg.seed, &format!("verify/augment/{task}"));
    let mut opt = Adam::new();
    let batch = cfg.batch.min(data.train.len());

    let mut best_params: Vec<Tensor> = clf.net.params().into_iter().cloned().collect();
    let mut best_val = f64::NEG_INFINITY;
    let mut detector = SaturationDetector::new(cfg.window, cfg.delta);
    let mut curve = Vec::new();
    let mut lr = cfg.lr;
    let mut phase = 1u8;
    let mut drop_at = None;
    let mut saturated = false;
    let mut it = 0u64;

    while it < cfg.max_iterations {
        let idx = sampler.next(batch)?;
        let x = match (&enc_train, &cfg.augment) {
            (Some(e), _) => e.gather_rows(&idx)?,
            (None, Some(a)) => {
                let raw = augment(&data.train.images.gather_rows(&idx)?, a, Mode::Train, &mut aug_rng)?;
                encoder.encode(&raw)?
            }
            (None, None) => unreachable!("encodings are precomputed without augmentation"),
        };
        let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
        let mut tape = Tape::new();
        let bound = clf.net.bind(&mut tape, true);
        let xv = tape.constant(x);
        let z = clf.logits(&mut tape, &bound, xv)?;
        let p = tape.softmax(z)?;
        let loss = tape.cross_entropy(p, &labels)?;
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound.iter().map(|&v| grads.take(v).expect("trainable leaf")).collect();
        let refs: Vec<&Tensor> = g.iter().collect();
        opt.step(&mut clf.net.params_mut(), &refs, lr)?;
        it += 1;

        if it % cfg.eval_every == 0 {
            let va = accuracy(&clf, &enc_val, val_labels)?;
            curve.push(CurvePoint { iteration: it, val_accuracy: va, lr, phase });
            if va > best_val {
                best_val = va;
                best_params = clf.net.params().into_iter().cloned().collect();
            }
            if detector.observe(va) {
                if phase == 1 {
                    phase = 2;
                    lr *= cfg.drop_factor;
                    drop_at = Some(it);
                    detector = SaturationDetector::new(cfg.window, cfg.delta);
                } else {
                    saturated = true;
                    break;
                }
            }
        }
    }

    for (p, b) in clf.net.params_mut().into_iter().zip(best_params) {
        *p = b;
    }
    if !best_val.is_finite() {
        best_val = accuracy(&clf, &enc_val, val_labels)?;
    }
    let test_accuracy = accuracy(&clf, &enc_test, test_labels)?;
    Ok(VerificationReport {
        task: task.to_string(),
        encoder: encoder.name().to_string(),
        curve,
        val_accuracy: best_val,
        test_accuracy,
        total_iterations: it,
        lr_drop_iteration: drop_at,
        saturated,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellTag {
    Private,
    Promoted,
    Neutral,
}

impl CellTag {
    pub fn name(self) -> &'static str {
        match self {
            CellTag::Private => "private",
            CellTag::Promoted => "promoted",
            CellTag::Neutral => "neutral",
        }
    }
}

/// An encoder with the tasks it was trained to inhibit and promote.
pub struct MatrixRow<'a> {
    pub encoder: &'a dyn Encoder,
    pub private: Vec<String>,
    pub promoted: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub encoder: String,
    pub task: String,
    pub tag: CellTag,
    pub report: VerificationReport,
}

/// One report per (encoder, task) cell, in row-major order. Cells run on up
/// to `workers` threads; results do not depend on the worker count.
pub fn verify_matrix(
    rows: &[MatrixRow<'_>],
    tasks: &[String],
    data: &TaskDataset,
    cfg: &VerifyConfig,
    workers: usize,
) -> Result<Vec<MatrixCell>> {
    let jobs: Vec<(usize, &String)> = (0..rows.len()).flat_map(|r| tasks.iter().map(move |t| (r, t))).collect();
    let run = |&(r, task): &(usize, &String)| -> Result<MatrixCell> {
        let row = &rows[r];
        let tag = if row.private.contains(task) {
            CellTag::Private
        } else if row.promoted.contains(task) {
            CellTag::Promoted
        } else {
            CellTag::Neutral
        };
        Ok(MatrixCell {
            encoder: row.encoder.name().to_string(),
            task: task.clone(),
            tag,
            report: train_to_saturation(row.encoder, data, task, cfg)?,
        })
    };
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(run).collect();
    }
    let chunk = jobs.len().div_ceil(workers);
    let results: Vec<Result<Vec<MatrixCell>>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("verification worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturation_needs_a_full_window() {
        let mut d = SaturationDetector::new(3, 0.01);
        assert!(!d.observe(0.5));
        assert!(!d.observe(0.6));
        assert!(!d.observe(0.6));
        assert!(!d.observe(0.6));
        // best over the last 3 evaluations moved 0.6 -> 0.6
        assert!(d.observe(0.6));
    }

    #[test]
    fn steady_improvement_is_not_saturation() {
        let mut d = SaturationDetector::new(3, 0.01);
        for i in 0..20 {
            assert!(!d.observe(0.5 + 0.01 * i as f64), "step {i}");
        }
    }

    #[test]
    fn fraction_threshold_reads_the_curve() {
        let pt = |iteration, val_accuracy| CurvePoint { iteration, val_accuracy, lr: 1e-3, phase: 1 };
        let r = VerificationReport {
            task: "t".into(),
            encoder: "e".into(),
            curve: vec![pt(200, 0.5), pt(400, 0.8), pt(600, 0.95), pt(800, 0.9)],
            val_accuracy: 0.95,
            test_accuracy: 0.94,
            total_iterations: 800,
            lr_drop_iteration: None,
            saturated: false,
        };
        assert_eq!(r.iterations_to_fraction(0.9), Some(600));
        assert_eq!(r.iterations_to_fraction(0.5), Some(200));
        assert_eq!(r.best_so_far(), vec![0.5, 0.8, 0.95, 0.95]);
    }
}
