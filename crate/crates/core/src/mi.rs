//! Exact checks of the adversarial objective on finite distributions.
//!
//! With a discrete encoder output `x'` and label `u`, the best classifier is
//! the Bayes posterior and the minimized cross-entropy is `H(U|X')`. The
//! objective `-H(U|X')` then decomposes as `-H(U) + H(X') - H(X'|U)`, and for
//! balanced binary labels it equals `JSD(p(x'|0), p(x'|1)) - ln 2`.
//!
//! All quantities are in nats.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Finite joint `p(x', u)`, indexed `[symbol][label]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    table: Vec<Vec<f64>>,
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    -p.into_iter().map(|v| xlogy(v, v)).sum::<f64>()
}

impl DiscreteJoint {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let labels = table.first().map_or(0, Vec::len);
        if table.is_empty() || labels == 0 || table.iter().any(|r| r.len() != labels) {
            return Err(Error::dim("joint table must be a non-empty rectangle"));
        }
        if table.iter().flatten().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::usage("joint probabilities must be finite and non-negative"));
        }
        let total: f64 = table.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::usage(format!("joint probabilities sum to {total}, not 1")));
        }
        Ok(Self { table })
    }

    /// Empirical joint of paired observations.
    pub fn from_samples(symbols: &[usize], labels: &[usize], alphabet: usize, classes: usize) -> Result<Self> {
        if symbols.len() != labels.len() || symbols.is_empty() {
            return Err(Error::dim(format!("{} symbols vs {} labels", symbols.len(), labels.len())));
        }
        let mut counts = vec![vec![0usize; classes]; alphabet];
        for (&s, &u) in symbols.iter().zip(labels) {
            if s >= alphabet || u >= classes {
                return Err(Error::usage(format!("observation ({s}, {u}) outside {alphabet}x{classes}")));
            }
            counts[s][u] += 1;
        }
        let n = symbols.len() as f64;
        let mut table: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|&c| c as f64 / n).collect()).collect();
        renormalize(&mut table);
        Self::new(table)
    }

    pub fn symbols(&self) -> usize {
        self.table.len()
    }

    pub fn labels(&self) -> usize {
        self.table[0].len()
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.table
    }

    pub fn priors(&self) -> Vec<f64> {
        (0..self.labels()).map(|u| self.table.iter().map(|r| r[u]).sum()).collect()
    }

    pub fn symbol_marginal(&self) -> Vec<f64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    /// Drops symbols with zero total mass.
    pub fn pruned(&self) -> Self {
        let table = self.table.iter().filter(|r| r.iter().sum::<f64>() > 0.0).cloned().collect();
        Self { table }
    }

    /// `Φ(x')_u = π_u p(x'|u) / p(x')`. A label with zero prior gets zero
    /// posterior everywhere.
    pub fn bayes_posterior(&self) -> Result<Vec<Vec<f64>>> {
        let priors = self.priors();
        self.table
            .iter()
            .enumerate()
            .map(|(s, row)| {
                let px: f64 = row.iter().sum();
                if px <= 0.0 {
                    return Err(Error::usage(format!("symbol {s} has zero mass; prune it first")));
                }
                Ok(row
                    .iter()
                    .zip(&priors)
                    .map(|(&pxu, &pi)| if pi > 0.0 { pi * (pxu / pi) / px } else { 0.0 })
                    .collect())
            })
            .collect()
    }

    /// `-E[cross-entropy of the Bayes posterior] = -H(U|X')`.
    pub fn objective_value(&self) -> f64 {
        let pruned = self.pruned();
        let post = pruned.bayes_posterior().expect("pruned joint has no zero-mass symbols");
        pruned
            .table
            .iter()
            .zip(&post)
            .flat_map(|(row, phi)| row.iter().zip(phi).map(|(&p, &q)| xlogy(p, q)))
            .sum()
    }

    pub fn label_entropy(&self) -> f64 {
        entropy(self.priors())
    }

    pub fn symbol_entropy(&self) -> f64 {
        entropy(self.symbol_marginal())
    }

    /// `H(X'|U) = -Σ p(x',u) ln p(x'|u)`.
    pub fn symbol_entropy_given_label(&self) -> f64 {
        let priors = self.priors();
        -self
            .table
            .iter()
            .flat_map(|row| row.iter().zip(&priors).map(|(&p, &pi)| if pi > 0.0 { xlogy(p, p / pi) } else { 0.0 }))
            .sum::<f64>()
    }

    /// `p(x'|u)` for label `u`.
    pub fn class_conditional(&self, u: usize) -> Vec<f64> {
        let pi = self.priors()[u];
        self.table.iter().map(|r| if pi > 0.0 { r[u] / pi } else { 0.0 }).collect()
    }

    pub fn eq2_residual(&self) -> f64 {
        let rhs = -self.label_entropy() + self.symbol_entropy() - self.symbol_entropy_given_label();
        (self.objective_value() - rhs).abs()
    }

    /// Residual of `objective + H(U) = JSD(p(x'|0), p(x'|1))`; needs balanced
    /// binary labels.
    pub fn jsd_residual(&self) -> Result<f64> {
        let priors = self.priors();
        if priors.len() != 2 || (priors[0] - 0.5).abs() > 1e-12 {
            return Err(Error::usage(format!("JSD check needs balanced binary labels, priors {priors:?}")));
        }
        let jsd = jensen_shannon(&self.class_conditional(0), &self.class_conditional(1))?;
        Ok((self.objective_value() + self.label_entropy() - jsd).abs())
    }
}

fn renormalize(table: &mut [Vec<f64>]) {
    let total: f64 = table.iter().flatten().sum();
    for v in table.iter_mut().flatten() {
        *v /= total;
    }
}

/// Jensen-Shannon divergence with equal mixture weights.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl(a, m) + 0.5 * kl(b, m)
        })
        .sum())
}

/// Random joint with Dirichlet(1) weights; roughly a fifth of the cells are
/// zeroed to exercise sparse supports.
pub fn random_joint<R: Rng>(rng: &mut R, symbols: usize, labels: usize) -> DiscreteJoint {
    loop {
        let mut table: Vec<Vec<f64>> = (0..symbols)
            .map(|_| {
                (0..labels)
                    .map(|_| if rng.gen_bool(0.2) { 0.0 } else { Exp1.sample(rng) })
                    .collect()
            })
            .collect();
        if table.iter().flatten().sum::<f64>() > 0.0 {
            renormalize(&mut table);
            if let Ok(j) = DiscreteJoint::new(table) {
                return j;
            }
        }
    }
}

/// Random joint with exactly balanced binary labels.
pub fn random_balanced_binary<R: Rng>(rng: &mut R, symbols: usize) -> DiscreteJoint {
    let mut conditional = || {
        let w: Vec<f64> = (0..symbols).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect::<Vec<f64>>()
    };
    let a = conditional();
    let b = conditional();
    let table = a.iter().zip(&b).map(|(&x, &y)| vec![0.5 * x, 0.5 * y]).collect();
    DiscreteJoint { table }
}

/// Sign pattern of the chosen coordinates of each encoded sample, as a symbol
/// in `[0, 2^coords.len())`.
pub fn sign_quantize(encoded: &Tensor, coords: &[usize]) -> Result<Vec<usize>> {
    let len = encoded.sample_len();
    if let Some(&c) = coords.iter().find(|&&c| c >= len) {
        return Err(Error::dim(format!("coordinate {c} outside sample of length {len}")));
    }
    Ok((0..encoded.batch())
        .map(|i| {
            let row = &encoded.data()[i * len..(i + 1) * len];
            coords.iter().enumerate().fold(0, |s, (bit, &c)| s | (usize::from(row[c] > 0.0) << bit))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalGap {
    pub achieved: f64,
    pub oracle: f64,
    pub gap: f64,
}

/// Minimum samples per (symbol, label) cell for the empirical joint to be
/// treated as stable.
pub const MIN_SAMPLES_PER_CELL: usize = 50;

/// Trains an unrestricted per-symbol logit table by full-batch Adam on the
/// observations and compares its objective with the oracle value of the
/// empirical joint.
pub fn empirical_objective_vs_oracle(
    symbols: &[usize],
    labels: &[usize],
    alphabet: usize,
    classes: usize,
) -> Result<EmpiricalGap> {
    let needed = MIN_SAMPLES_PER_CELL * alphabet * classes;
    if symbols.len() < needed {
        return Err(Error::Statistical(format!(
            "{} samples for a {alphabet}x{classes} alphabet; need at least {needed}",
            symbols.len()
        )));
    }
    let joint = DiscreteJoint::from_samples(symbols, labels, alphabet, classes)?;
    let n = symbols.len() as f64;
    let mut counts = vec![0.0; alphabet * classes];
    for (&s, &u) in symbols.iter().zip(labels) {
        counts[s * classes + u] += 1.0;
    }

    let log_softmax = |z: &[f64]| {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect::<Vec<f64>>()
    };
    let objective = |w: &Tensor| {
        w.data()
            .chunks(classes)
            .zip(counts.chunks(classes))
            .map(|(z, c)| log_softmax(z).iter().zip(c).map(|(l, &k)| k * l).sum::<f64>())
            .sum::<f64>()
            / n
    };

    const ITERS: u64 = 3000;
    let (lr0, lr1) = (0.5f64, 1e-6f64);
    let mut w = Tensor::zeros([alphabet, classes]);
    let mut grad = Tensor::zeros([alphabet, classes]);
    // Short second-moment memory so steps stay near lr once gradients shrink
    // on separable symbols.
    let mut adam = Adam::new();
    adam.beta2 = 0.9;
    for t in 0..ITERS {
        for ((g, z), c) in grad
            .data_mut()
            .chunks_mut(classes)
            .zip(w.data().chunks(classes))
            .zip(counts.chunks(classes))
        {
            let total: f64 = c.iter().sum();
            for ((gi, l), &k) in g.iter_mut().zip(log_softmax(z)).zip(c) {
                *gi = (total * l.exp() - k) / n;
            }
        }
        let lr = lr0 * (lr1 / lr0).powf(t as f64 / (ITERS - 1) as f64);
        adam.step(&mut [&mut w], &[&grad], lr)?;
    }
    let achieved = objective(&w);
    let oracle = joint.objective_value();
    Ok(EmpiricalGap { achieved, oracle, gap: (achieved - oracle).abs() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub trials: usize,
    pub max_eq2_residual: f64,
    pub mean_eq2_residual: f64,
    pub max_jsd_residual: Option<f64>,
}

impl OracleReport {
    pub fn max_residual(&self) -> f64 {
        self.max_eq2_residual.max(self.max_jsd_residual.unwrap_or(0.0))
    }
}

/// Residual statistics over random joints with alphabet sizes 2 to 16 and
/// label counts 2 to 4, plus the balanced-binary JSD check when requested.
pub fn oracle_trials<R: Rng>(rng: &mut R, trials: usize, balanced_binary: bool) -> Result<OracleReport> {
    let mut max_eq2 = 0.0f64;
    let mut sum_eq2 = 0.0;
    for _ in 0..trials {
        let (symbols, labels) = (rng.gen_range(2..=16), rng.gen_range(2..=4));
        let j = random_joint(rng, symbols, labels);
        let r = j.eq2_residual();
        max_eq2 = max_eq2.max(r);
        sum_eq2 += r;
    }
    let max_jsd = if balanced_binary {
        let mut m = 0.0f64;
        for _ in 0..trials {
            let symbols = rng.gen_range(2..=16);
            let j = random_balanced_binary(rng, symbols);
            m = m.max(j.jsd_residual()?);
        }
        Some(m)
    } else {
        None
    };
    Ok(OracleReport {
        trials,
        max_eq2_residual: max_eq2,
        mean_eq2_residual: if trials > 0 { sum_eq2 / trials as f64 } else { 0.0 },
        max_jsd_residual: max_jsd,
    })
}
