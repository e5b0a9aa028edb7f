//! Classifier and encoder losses.
//!
//! The encoder is trained against a private-attribute classifier with one of
//! three updates:
//!
//! * [`PrivacyUpdateMode::LabelFlip`]: cross-entropy toward the opposite of
//!   whatever the classifier currently predicts. The true label is never
//!   consulted, so the encoder is pushed toward making the classifier
//!   *unsure* rather than confidently wrong.
//! * [`PrivacyUpdateMode::GanFlipTrueLabel`]: cross-entropy toward the
//!   opposite of the true label (the usual GAN generator update).
//! * [`PrivacyUpdateMode::NegativeCrossEntropy`]: the negated classifier
//!   loss.
//!
//! Classifier parameters are bound as constants while an encoder loss is
//! built, so these losses never produce gradients for the classifier.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Utility weight used at full scale.
pub const DEFAULT_ALPHA: f64 = 0.0625;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrivacyUpdateMode {
    LabelFlip,
    GanFlipTrueLabel,
    NegativeCrossEntropy,
}

impl PrivacyUpdateMode {
    pub fn flag(self) -> &'static str {
        match self {
            PrivacyUpdateMode::LabelFlip => "flip",
            PrivacyUpdateMode::GanFlipTrueLabel => "gan",
            PrivacyUpdateMode::NegativeCrossEntropy => "neg-ce",
        }
    }
}

impl fmt::Display for PrivacyUpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for PrivacyUpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip" => Ok(Self::LabelFlip),
            "gan" => Ok(Self::GanFlipTrueLabel),
            "neg-ce" => Ok(Self::NegativeCrossEntropy),
            _ => Err(Error::usage(format!("unknown privacy loss `{s}` (expected flip, gan or neg-ce)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Utility {
    /// Only the structural zero-mean / unit-variance output constraint.
    VarianceOnly,
    /// Promote recovery of these tasks alongside the variance constraint.
    DesirableTasks(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderObjective {
    pub privacy: PrivacyUpdateMode,
    pub utility: Utility,
    pub alpha: f64,
}

impl EncoderObjective {
    pub fn validate(&self) -> Result<()> {
        match &self.utility {
            Utility::DesirableTasks(tasks) if tasks.is_empty() => {
                Err(Error::usage("desirable-task utility needs at least one task"))
            }
            Utility::DesirableTasks(_) if !(self.alpha > 0.0) => {
                Err(Error::usage(format!("alpha must be positive, got {}", self.alpha)))
            }
            _ => Ok(()),
        }
    }
}

/// Mean cross-entropy of `logits: (N, K)` against `labels`.
pub fn classifier_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let p = tape.softmax(logits)?;
    tape.cross_entropy(p, labels)
}

/// Targets the encoder update pushes the classifier toward, or `None` for
/// [`PrivacyUpdateMode::NegativeCrossEntropy`], which uses the true labels.
/// Argmax ties resolve to class 0.
pub fn privacy_targets(probs: &Tensor, labels: &[usize], mode: PrivacyUpdateMode) -> Result<Option<Vec<usize>>> {
    if probs.ndim() != 2 || probs.batch() != labels.len() {
        return Err(Error::dim(format!("probs {:?} with {} labels", probs.shape(), labels.len())));
    }
    let binary = || {
        if probs.shape()[1] != 2 {
            return Err(Error::usage(format!(
                "{mode} updates are defined for binary private attributes, got {} classes",
                probs.shape()[1]
            )));
        }
        Ok(())
    };
    match mode {
        PrivacyUpdateMode::LabelFlip => {
            binary()?;
            Ok(Some(probs.argmax_rows()?.into_iter().map(|c| 1 - c).collect()))
        }
        PrivacyUpdateMode::GanFlipTrueLabel => {
            binary()?;
            labels
                .iter()
                .map(|&l| match l {
                    0 | 1 => Ok(1 - l),
                    _ => Err(Error::usage(format!("label {l} out of range for 2 classes"))),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        }
        PrivacyUpdateMode::NegativeCrossEntropy => Ok(None),
    }
}

/// Encoder-side privacy loss computed from the private classifier's
/// probabilities `probs: (N, 2)`.
pub fn encoder_privacy_loss(tape: &mut Tape, probs: Var, labels: &[usize], mode: PrivacyUpdateMode) -> Result<Var> {
    match privacy_targets(tape.value(probs), labels, mode)? {
        Some(targets) => tape.cross_entropy(probs, &targets),
        None => {
            let ce = tape.cross_entropy(probs, labels)?;
            tape.scale(ce, -1.0)
        }
    }
}

/// `privacy + alpha * mean(desirable)`; just `privacy` when there are no
/// desirable-task losses.
pub fn combined_encoder_loss(tape: &mut Tape, privacy: Var, desirable: &[Var], alpha: f64) -> Result<Var> {
    let Some((&first, rest)) = desirable.split_first() else {
        return Ok(privacy);
    };
    let mut total = first;
    for &d in rest {
        total = tape.add(total, d)?;
    }
    let weighted = tape.scale(total, alpha / desirable.len() as f64)?;
    tape.add(privacy, weighted)
}

/// Cross-entropy over `N + 1` classes for `N` desirable tasks, where class 0
/// means "none of the desirable tasks".
pub fn multi_desirable_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    classifier_loss(tape, logits, labels)
}

/// `N + 1`-way labels from per-task binary labels: `i + 1` for the first task
/// `i` that is positive, 0 if none is.
pub fn multi_desirable_labels(per_task: &[&[usize]]) -> Result<Vec<usize>> {
    let n = per_task.first().map_or(0, |t| t.len());
    if per_task.iter().any(|t| t.len() != n) {
        return Err(Error::dim("desirable task label lists differ in length"));
    }
    Ok((0..n)
        .map(|i| per_task.iter().position(|t| t[i] == 1).map_or(0, |p| p + 1))
        .collect())
}
