use proptest::prelude::*;
use veil_core::layers::{Layer, Mode, PerLocationNorm, Sequential, StandardBatchNorm};
use veil_core::{Tape, Tensor};

/// Per-coordinate batch mean and (biased) variance of `(N, ...)`.
fn coordinate_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = t.batch();
    let d = t.sample_len();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(t.row(i)) {
            *m += x / n as f64;
        }
    }
    for i in 0..n {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(t.row(i)) {
            *v += (x - m) * (x - m) / n as f64;
        }
    }
    (mean, var)
}

fn normalize(x: &Tensor, per_location: bool) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let (y, _) = tape.batch_normalize(v, 1e-5, per_location).unwrap();
    tape.value(y).clone()
}

fn batch_strategy() -> impl Strategy<Value = Tensor> {
    (4usize..=64, 1usize..=3, 1usize..=4, 0.5f64..20.0).prop_flat_map(|(n, c, s, scale)| {
        proptest::collection::vec(-1.0f64..1.0, n * c * s * s)
            .prop_map(move |v| Tensor::new([n, c, s, s], v.into_iter().map(|x| x * scale).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn per_location_norm_standardizes_every_coordinate(x in batch_strategy()) {
        let (_, raw_var) = coordinate_stats(&x);
        let (mean, var) = coordinate_stats(&normalize(&x, true));
        for ((m, v), rv) in mean.iter().zip(&var).zip(&raw_var) {
            prop_assert!(m.abs() < 1e-6, "mean {m}");
            // var/(var+eps) is the exact output variance; it is within 1e-5
            // of one whenever the raw variance is not tiny.
            prop_assert!((v - rv / (rv + 1e-5)).abs() < 1e-9);
            if *rv > 1.0 {
                prop_assert!((v - 1.0).abs() < 1e-5, "var {v}");
            }
        }
    }

    #[test]
    fn standard_norm_standardizes_each_channel_pooled(x in batch_strategy()) {
        let y = normalize(&x, false);
        let (n, c) = (y.shape()[0], y.shape()[1]);
        let sp = y.sample_len() / c;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| y.row(i)[ch * sp..(ch + 1) * sp].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!(v <= 1.0 + 1e-9 && v > 0.0);
        }
    }
}

#[test]
fn location_dependent_constant_separates_the_two_norms() {
    // Every sample equals the same spatial ramp: constant per location,
    // varying across locations.
    let (n, c, s) = (8, 2, 4);
    let x = Tensor::from_fn([n, c, s, s], |i| (i % (c * s * s)) as f64 * 0.37 - 2.0);

    let per_loc = normalize(&x, true);
    assert!(per_loc.data().iter().all(|v| v.abs() < 1e-6));

    let std = normalize(&x, false);
    let (mean, var) = coordinate_stats(&std);
    // Standard norm keeps the ramp: coordinates are far from zero mean and
    // have no variance at all, so the per-coordinate contract fails.
    assert!(mean.iter().map(|m| m.abs()).fold(0.0, f64::max) > 1.0);
    assert!(var.iter().all(|&v| v < 1e-12));
}

#[test]
fn eval_mode_uses_running_statistics() {
    let shape = [2, 3, 3];
    let mut net = Sequential::new(vec![Layer::PerLocationNorm(PerLocationNorm::new(&shape))]);
    let x = Tensor::from_fn([6, 2, 3, 3], |i| ((i * 7919) % 23) as f64 * 0.5 - 3.0);
    // Eval mode before any training uses the initial running stats
    // (mean 0, var 1): the layer is nearly the identity.
    let before = net.infer(&x).unwrap();
    assert!(before.max_abs_diff(&x) < 1e-4);

    for _ in 0..200 {
        net.run(&x, Mode::Train).unwrap();
    }
    let train = normalize(&x, true);
    let eval = net.infer(&x).unwrap();
    assert!(eval.max_abs_diff(&train) < 1e-6);

    // One sample alone is normalized by the stored statistics, not its own.
    let one = x.gather_rows(&[3]).unwrap();
    let single = net.infer(&one).unwrap();
    assert_eq!(single.row(0), eval.row(3));
}

#[test]
fn standard_norm_eval_mode_uses_running_statistics() {
    let mut net = Sequential::new(vec![Layer::BatchNorm(StandardBatchNorm::new(2, false))]);
    let x = Tensor::from_fn([5, 2, 2, 2], |i| ((i * 31) % 11) as f64 - 4.0);
    for _ in 0..200 {
        net.run(&x, Mode::Train).unwrap();
    }
    let eval = net.infer(&x).unwrap();
    assert!(eval.max_abs_diff(&normalize(&x, false)) < 1e-6);
}
