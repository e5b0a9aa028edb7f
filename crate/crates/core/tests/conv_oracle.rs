use proptest::prelude::*;
use veil_core::{Tape, Tensor};

/// Direct nested-loop convolution with zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdata = w.data();
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += xd[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * wdata[((oi * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, ho, wo], out).unwrap()
}

fn tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..9, w in 3usize..9,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..3,
        seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = tensor([n, c, h, w], seed);
        let wt = tensor([o, c, k, k], seed ^ 0x9e37);
        let b: Vec<f64> = (0..o).map(|i| 0.1 * i as f64).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.leaf(wt.clone(), true);
        let bv = tape.constant(Tensor::new([o], b.clone()).unwrap());
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &wt, &b, stride, pad);
        prop_assert_eq!(tape.value(y).shape(), want.shape());
        prop_assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }
}
