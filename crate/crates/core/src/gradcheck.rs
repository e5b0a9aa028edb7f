//! Finite-difference checks of every differentiable primitive and loss.
//!
//! Each check draws a random configuration (shapes and values), reduces the
//! op's output to a scalar with a fixed random projection, and compares the
//! tape gradient of every input against central differences. Inputs to
//! non-smooth ops are drawn away from their kinks and ties so that the
//! difference step never crosses one.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Broadcast, Tape, Var};
use crate::error::Result;
use crate::objectives::{
    classifier_loss, combined_encoder_loss, encoder_privacy_loss, multi_desirable_labels, multi_desirable_loss,
    PrivacyUpdateMode,
};
use crate::seed::stream;
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-3;
/// Coordinates probed per input tensor.
pub const PROBES: usize = 24;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub configs: usize,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, DENOM_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Builds a scalar from `inputs` on a fresh tape. Called repeatedly with
/// perturbed inputs, so it must be a pure function of them.
type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Max relative error between tape and finite-difference gradients over
/// up to [`PROBES`] coordinates of each input.
pub fn check_graph(inputs: &[Tensor], graph: &Graph<'_>, rng: &mut impl Rng) -> Result<f64> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let y = graph(&mut tape, &vars)?;
        tape.value(y).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = graph(&mut tape, &vars)?;
    let grads = tape.backward(y)?;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).expect("leaf gradient");
        let mut coords: Vec<usize> = (0..x.len()).collect();
        coords.shuffle(rng);
        coords.truncate(PROBES);
        for i in coords {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] -= 2.0 * STEP;
            let down = eval(&xs)?;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(g.data()[i], numeric));
        }
    }
    Ok(worst)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values with |x| >= 0.05, so ReLU kinks are never crossed.
fn off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05..1.5);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart, so pooling maxima never tie.
fn distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("sized")
}

/// Logits whose per-row top two differ by at least 0.05.
fn separated_logits(n: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    loop {
        let t = uniform(&[n, k], -2.0, 2.0, rng);
        let ok = (0..n).all(|r| {
            let mut row = t.row(r).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            row[0] - row[1] > 0.05
        });
        if ok {
            return t;
        }
    }
}

fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    tape.sum(p)
}

fn run_check(
    name: &'static str,
    configs: usize,
    seed: u64,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<CheckResult> {
    let mut rng = stream(seed, &format!("gradcheck/{name}"));
    let mut worst = 0.0f64;
    for _ in 0..configs {
        worst = worst.max(one(&mut rng)?);
    }
    Ok(CheckResult { name, configs, max_rel_error: worst })
}

/// Runs every check with `configs` random configurations each.
pub fn check_all(configs: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    out.push(run_check("conv2d", configs, seed, |rng| {
        let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let k = rng.gen_range(1..4);
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
        let h = rng.gen_range(k.max(2)..6);
        let bias = rng.gen_bool(0.5);
        let x = uniform(&[n, c, h, h], -1.0, 1.0, rng);
        let w = uniform(&[o, c, k, k], -1.0, 1.0, rng);
        let ho = (h + 2 * pad - k) / stride + 1;
        let r = uniform(&[n, o, ho, ho], -1.0, 1.0, rng);
        let mut inputs = vec![x, w];
        if bias {
            inputs.push(uniform(&[o], -1.0, 1.0, rng));
        }
        check_graph(
            &inputs,
            &|t, v| {
                let y = t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)?;
                project(t, y, &r)
            },
            rng,
        )
    })?);

    out.push(run_check("dense", configs, seed, |rng| {
        let (n, fin, fout) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5));
        let bias = rng.gen_bool(0.5);
        let mut inputs = vec![uniform(&[n, fin], -1.0, 1.0, rng), uniform(&[fout, fin], -1.0, 1.0, rng)];
        if bias {
            inputs.push(uniform(&[fout], -1.0, 1.0, rng));
        }
        let r = uniform(&[n, fout], -1.0, 1.0, rng);
        check_graph(
            &inputs,
            &|t, v| {
                let y = t.affine(v[0], v[1], v.get(2).copied())?;
                project(t, y, &r)
            },
            rng,
        )
    })?);

    for (name, per_location) in [("per_location_norm", true), ("standard_batch_norm", false)] {
        out.push(run_check(name, configs, seed, |rng| {
            let (n, c, h) = (rng.gen_range(2..6), rng.gen_range(1..4), rng.gen_range(1..4));
            let shape = [n, c, h, h];
            let x = uniform(&shape, -2.0, 2.0, rng);
            let r = uniform(&shape, -1.0, 1.0, rng);
            check_graph(
                &[x],
                &|t, v| {
                    let (y, _) = t.batch_normalize(v[0], 1e-5, per_location)?;
                    project(t, y, &r)
                },
                rng,
            )
        })?);
    }

    out.push(run_check("normalization_eval", configs, seed, |rng| {
        let (n, c, h) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let shape = [n, c, h, h];
        let d = c * h * h;
        let scale: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..3.0)).collect();
        let shift: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = uniform(&shape, -1.0, 1.0, rng);
        let x = uniform(&shape, -2.0, 2.0, rng);
        check_graph(
            &[x],
            &|t, v| {
                let y = t.fixed_affine(v[0], &scale, &shift, Broadcast::PerLocation)?;
                project(t, y, &r)
            },
            rng,
        )
    })?);

    out.push(run_check("channel_affine", configs, seed, |rng| {
        let (n, c, h) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let shape = [n, c, h, h];
        let with_scale = rng.gen_bool(0.5);
        let mut inputs = vec![uniform(&shape, -1.0, 1.0, rng), uniform(&[c], -1.0, 1.0, rng)];
        if with_scale {
            inputs.push(uniform(&[c], 0.5, 2.0, rng));
        }
        let r = uniform(&shape, -1.0, 1.0, rng);
        check_graph(
            &inputs,
            &|t, v| {
                let y = t.channel_affine(v[0], v.get(2).copied(), Some(v[1]))?;
                project(t, y, &r)
            },
            rng,
        )
    })?);

    for (name, max) in [("max_pool", true), ("avg_pool", false)] {
        out.push(run_check(name, configs, seed, |rng| {
            let k = rng.gen_range(1..4);
            let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let h = k * rng.gen_range(1..4) + rng.gen_range(0..k);
            let shape = [n, c, h, h];
            let x = if max { distinct(&shape, rng) } else { uniform(&shape, -1.0, 1.0, rng) };
            let r = uniform(&[n, c, h / k, h / k], -1.0, 1.0, rng);
            check_graph(
                &[x],
                &|t, v| {
                    let y = if max { t.max_pool2d(v[0], k)? } else { t.avg_pool2d(v[0], k)? };
                    project(t, y, &r)
                },
                rng,
            )
        })?);
    }

    out.push(run_check("relu", configs, seed, |rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..8)];
        let r = uniform(&shape, -1.0, 1.0, rng);
        check_graph(
            &[off_zero(&shape, rng)],
            &|t, v| {
                let y = t.relu(v[0])?;
                project(t, y, &r)
            },
            rng,
        )
    })?);

    out.push(run_check("tanh", configs, seed, |rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..8)];
        let r = uniform(&shape, -1.0, 1.0, rng);
        check_graph(
            &[uniform(&shape, -3.0, 3.0, rng)],
            &|t, v| {
                let y = t.tanh(v[0])?;
                project(t, y, &r)
            },
            rng,
        )
    })?);

    out.push(run_check("flatten", configs, seed, |rng| {
        let shape = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4)];
        let r = uniform(&[shape[0], shape[1] * shape[2] * shape[3]], -1.0, 1.0, rng);
        check_graph(
            &[uniform(&shape, -1.0, 1.0, rng)],
            &|t, v| {
                let y = t.flatten(v[0])?;
                project(t, y, &r)
            },
            rng,
        )
    })?);

    out.push(run_check("mean_variance", configs, seed, |rng| {
        let shape = [rng.gen_range(2..5), rng.gen_range(1..5)];
        let a = rng.gen_range(-1.0..1.0);
        check_graph(
            &[uniform(&shape, -1.0, 1.0, rng)],
            &|t, v| {
                let m = t.mean(v[0])?;
                let s = t.variance(v[0])?;
                let m = t.scale(m, a)?;
                t.add(m, s)
            },
            rng,
        )
    })?);

    out.push(run_check("classifier_cross_entropy", configs, seed, |rng| {
        let (n, k) = (rng.gen_range(1..6), rng.gen_range(2..5));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        check_graph(&[uniform(&[n, k], -3.0, 3.0, rng)], &|t, v| classifier_loss(t, v[0], &labels), rng)
    })?);

    for (name, mode) in [
        ("label_flip_loss", PrivacyUpdateMode::LabelFlip),
        ("gan_flip_loss", PrivacyUpdateMode::GanFlipTrueLabel),
        ("negative_cross_entropy", PrivacyUpdateMode::NegativeCrossEntropy),
    ] {
        out.push(run_check(name, configs, seed, |rng| {
            let n = rng.gen_range(1..6);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            check_graph(
                &[separated_logits(n, 2, rng)],
                &|t, v| {
                    let p = t.softmax(v[0])?;
                    encoder_privacy_loss(t, p, &labels, mode)
                },
                rng,
            )
        })?);
    }

    out.push(run_check("combined_encoder_loss", configs, seed, |rng| {
        let n = rng.gen_range(1..6);
        let tasks = rng.gen_range(1..4);
        let private: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let per_task: Vec<Vec<usize>> = (0..tasks).map(|_| (0..n).map(|_| rng.gen_range(0..2)).collect()).collect();
        let refs: Vec<&[usize]> = per_task.iter().map(Vec::as_slice).collect();
        let joint = multi_desirable_labels(&refs)?;
        let alpha = rng.gen_range(0.01..1.0);
        let inputs = [separated_logits(n, 2, rng), uniform(&[n, tasks + 1], -3.0, 3.0, rng)];
        check_graph(
            &inputs,
            &|t, v| {
                let p = t.softmax(v[0])?;
                let privacy = encoder_privacy_loss(t, p, &private, PrivacyUpdateMode::LabelFlip)?;
                let d = multi_desirable_loss(t, v[1], &joint)?;
                combined_encoder_loss(t, privacy, &[d], alpha)
            },
            rng,
        )
    })?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // d/dx of x*x computed as if it were x*c: half the true gradient.
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = check_graph(
            &[x.clone()],
            &|t, v| {
                let c = t.constant(t.value(v[0]).clone());
                let y = t.mul(v[0], c)?;
                t.sum(y)
            },
            &mut stream(0, "t"),
        )
        .unwrap();
        assert!(err > 0.3, "{err}");
    }

    #[test]
    fn small_sweep_passes() {
        for r in check_all(3, 1).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{} {}", r.name, r.max_rel_error);
        }
    }
}
