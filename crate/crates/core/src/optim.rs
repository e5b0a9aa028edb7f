//! Adam and learning-rate schedules.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every parameter. Rejects non-finite
    /// gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if !(lr > 0.0) {
            return Err(Error::usage(format!("learning rate must be positive, got {lr}")));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::Numeric("adam gradient".into()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::dim("parameter set changed between Adam steps"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `base * factor^(iteration / period)` (integer division).
    StepDecay { base: f64, factor: f64, period: u64 },
    /// `base` until the first plateau signal, `base * factor` forever after.
    PlateauSingleDrop { base: f64, factor: f64, dropped: bool },
}

impl LrSchedule {
    /// Quarter-decade drop, the encoder schedule's decay factor.
    pub fn quarter_decade() -> f64 {
        0.1f64.powf(0.25)
    }

    pub fn plateau(base: f64, factor: f64) -> Self {
        LrSchedule::PlateauSingleDrop { base, factor, dropped: false }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        match *self {
            LrSchedule::Constant(lr) if !(lr > 0.0) => bad(format!("learning rate {lr} must be positive")),
            LrSchedule::StepDecay { base, factor, period } => {
                if !(base > 0.0) || !(factor > 0.0 && factor < 1.0) || period == 0 {
                    bad(format!("step decay needs base > 0, factor in (0,1), period > 0 (got {base}, {factor}, {period})"))
                } else {
                    Ok(())
                }
            }
            LrSchedule::PlateauSingleDrop { base, factor, .. } if !(base > 0.0) || !(factor > 0.0 && factor < 1.0) => {
                bad(format!("plateau drop needs base > 0 and factor in (0,1) (got {base}, {factor})"))
            }
            _ => Ok(()),
        }
    }

    /// Learning rate at `iteration`. A plateau signal permanently applies the
    /// single drop of [`LrSchedule::PlateauSingleDrop`]; further signals are
    /// ignored.
    pub fn lr(&mut self, iteration: u64, plateau_signal: bool) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::StepDecay { base, factor, period } => *base * factor.powi((iteration / *period) as i32),
            LrSchedule::PlateauSingleDrop { base, factor, dropped } => {
                if plateau_signal {
                    *dropped = true;
                }
                if *dropped {
                    *base * *factor
                } else {
                    *base
                }
            }
        }
    }

    /// Current rate without signalling.
    pub fn peek(&self, iteration: u64) -> f64 {
        self.clone().lr(iteration, false)
    }
}

/// `constant LR`, `step BASE FACTOR PERIOD` or `plateau BASE FACTOR`.
impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant(lr) => write!(f, "constant {lr}"),
            LrSchedule::StepDecay { base, factor, period } => write!(f, "step {base} {factor} {period}"),
            LrSchedule::PlateauSingleDrop { base, factor, .. } => write!(f, "plateau {base} {factor}"),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let toks: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::usage(format!("cannot parse schedule `{s}`"));
        let f = |i: usize| -> Result<f64> { toks.get(i).and_then(|t| t.parse().ok()).ok_or_else(bad) };
        let sched = match (toks.first().copied(), toks.len()) {
            (Some("constant"), 2) => LrSchedule::Constant(f(1)?),
            (Some("step"), 4) => LrSchedule::StepDecay {
                base: f(1)?,
                factor: f(2)?,
                period: toks[3].parse().map_err(|_| bad())?,
            },
            (Some("plateau"), 3) => LrSchedule::plateau(f(1)?, f(2)?),
            _ => return Err(bad()),
        };
        sched.validate()?;
        Ok(sched)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn step_once(g: &[f64], lr: f64) -> Vec<f64> {
        let mut p = Tensor::zeros([g.len()]);
        let gt = Tensor::new([g.len()], g.to_vec()).unwrap();
        let mut adam = Adam::new();
        adam.step(&mut [&mut p], &[&gt], lr).unwrap();
        p.into_data()
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let g = [0.3, -2.0, 1e-3];
        for (u, gi) in step_once(&g, 0.01).iter().zip(g) {
            let want = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((u - want).abs() < 1e-15);
            assert!((u.abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_counts_step() {
        let mut p = Tensor::full([3], 1.5);
        let g = Tensor::zeros([3]);
        let mut adam = Adam::new();
        adam.step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert_eq!(p.data(), &[1.5, 1.5, 1.5]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn repeated_gradient_keeps_unit_step() {
        let mut p = Tensor::zeros([2]);
        let g = Tensor::new([2], vec![0.5, -4.0]).unwrap();
        let mut adam = Adam::new();
        adam.step(&mut [&mut p], &[&g], 0.01).unwrap();
        let after_one = p.clone();
        adam.step(&mut [&mut p], &[&g], 0.01).unwrap();
        for (a, b) in p.data().iter().zip(after_one.data()) {
            assert!(((a - b).abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = Tensor::zeros([1]);
        let g = Tensor::new([1], vec![f64::NAN]).unwrap();
        assert!(matches!(Adam::new().step(&mut [&mut p], &[&g], 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn step_decay_examples() {
        let mut s = LrSchedule::StepDecay { base: 1e-4, factor: LrSchedule::quarter_decade(), period: 200_000 };
        assert_eq!(s.lr(199_999, false), 1e-4);
        assert!((s.lr(200_000, false) - 5.623413251903491e-5).abs() < 1e-15);
        assert!((s.lr(800_000, false) - 1e-5).abs() < 1e-12 * 1e-5 + 1e-17);
        assert_eq!(LrSchedule::Constant(1e-4).lr(123_456, false), 1e-4);
    }

    #[test]
    fn plateau_drops_exactly_once() {
        let mut s = LrSchedule::plateau(1e-5, 0.1);
        assert_eq!(s.lr(10, false), 1e-5);
        let once = s.lr(11, true);
        assert!((once - 1e-6).abs() < 1e-20);
        assert_eq!(s.lr(12, true), once);
        assert_eq!(s.lr(13, false), once);
    }

    #[test]
    fn invalid_schedules() {
        assert!(LrSchedule::StepDecay { base: 1e-4, factor: 1.5, period: 10 }.validate().is_err());
        assert!(LrSchedule::StepDecay { base: 1e-4, factor: 0.5, period: 0 }.validate().is_err());
        assert!(LrSchedule::Constant(0.0).validate().is_err());
    }

    proptest! {
        #[test]
        fn first_update_sign_pattern_is_scale_invariant(
            g in prop::collection::vec(-10.0f64..10.0, 1..20),
            c in 1e-3f64..1e3,
        ) {
            let a = step_once(&g, 0.01);
            let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
            let b = step_once(&scaled, 0.01);
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.signum(), y.signum());
            }
        }

        #[test]
        fn trajectories_are_reproducible(g in prop::collection::vec(-1.0f64..1.0, 1..10)) {
            let run = || {
                let mut p = Tensor::zeros([g.len()]);
                let gt = Tensor::new([g.len()], g.clone()).unwrap();
                let mut adam = Adam::new();
                for _ in 0..5 {
                    adam.step(&mut [&mut p], &[&gt], 0.1).unwrap();
                }
                p
            };
            prop_assert_eq!(run(), run());
        }
    }
}
