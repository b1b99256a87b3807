use cmkd::tensor::{Conv2dParams, Padding};
use cmkd::{Fill, Tape, Tensor};
use proptest::prelude::*;

/// Direct seven-loop cross-correlation with explicit zero padding.
fn reference_conv(x: &Tensor, k: &Tensor, bias: &[f64], p: Conv2dParams) -> (Vec<usize>, Vec<f64>) {
    let (xs, ks) = (x.shape(), k.shape());
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let span = |k: usize| p.dilation * (k - 1) + 1;
    let (ho, wo, pt, pl) = match p.padding {
        Padding::Valid => (
            (h - span(kh)) / p.stride + 1,
            (w - span(kw)) / p.stride + 1,
            0,
            0,
        ),
        Padding::Same => {
            let ho = h.div_ceil(p.stride);
            let wo = w.div_ceil(p.stride);
            let ph = ((ho - 1) * p.stride + span(kh)).saturating_sub(h);
            let pw = ((wo - 1) * p.stride + span(kw)).saturating_sub(w);
            (ho, wo, ph / 2, pw / 2)
        }
    };
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky * p.dilation) as isize - pt as isize;
                                let ix = (ox * p.stride + kx * p.dilation) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.values()
                                    [((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.values()[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (vec![n, cout, ho, wo], out)
}

#[test]
fn matches_nested_loops() {
    let mut seed = 0;
    for stride in [1, 2] {
        for dilation in [1, 2] {
            for padding in [Padding::Same, Padding::Valid] {
                for (h, w) in [(7, 7), (8, 6), (9, 11)] {
                    seed += 1;
                    let p = Conv2dParams {
                        stride,
                        dilation,
                        padding,
                    };
                    let x = Tensor::new(
                        &[2, 3, h, w],
                        Fill::Normal {
                            mean: 0.0,
                            std: 1.0,
                            seed,
                        },
                    )
                    .unwrap();
                    let k = Tensor::new(
                        &[4, 3, 3, 3],
                        Fill::Normal {
                            mean: 0.0,
                            std: 1.0,
                            seed: seed + 50,
                        },
                    )
                    .unwrap();
                    let bias = [0.1, -0.2, 0.3, 0.0];
                    let (shape, want) = reference_conv(&x, &k, &bias, p);
                    let mut tape = Tape::new();
                    let xv = tape.constant(x);
                    let kv = tape.constant(k);
                    let bv = tape.constant(Tensor::from_vec(&[4], bias.to_vec()).unwrap());
                    let y = tape.conv2d(xv, kv, Some(bv), p).unwrap();
                    let got = tape.value(y).unwrap();
                    assert_eq!(got.shape(), shape.as_slice(), "{p:?} {h}x{w}");
                    for (g, w) in got.values().iter().zip(&want) {
                        assert!((g - w).abs() <= 1e-12, "{p:?}: {g} vs {w}");
                    }
                }
            }
        }
    }
}

#[test]
fn even_kernel_same_padding_puts_extra_row_after() {
    // 2×2 ones kernel over a 3×3 ramp: the single padding row/column goes
    // bottom/right, so output (0,0) sums x[0..2][0..2].
    let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
    let k = Tensor::new(&[1, 1, 2, 2], Fill::Constant(1.0)).unwrap();
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.conv2d(xv, kv, None, Conv2dParams::default()).unwrap();
    let (_, want) = reference_conv(&x, &k, &[0.0], Conv2dParams::default());
    assert_eq!(tape.value(y).unwrap().values(), want.as_slice());
    assert_eq!(want[0], 0.0 + 1.0 + 3.0 + 4.0);
}

proptest! {
    #[test]
    fn linear_in_the_input(seed in 0u64..10_000, stride in 1usize..3, dilation in 1usize..3) {
        let p = Conv2dParams { stride, dilation, padding: Padding::Same };
        let a = Tensor::new(&[1, 2, 6, 5], Fill::Normal { mean: 0.0, std: 1.0, seed }).unwrap();
        let b = Tensor::new(&[1, 2, 6, 5], Fill::Normal { mean: 0.0, std: 1.0, seed: seed + 1 }).unwrap();
        let k = Tensor::new(&[3, 2, 3, 3], Fill::Normal { mean: 0.0, std: 1.0, seed: seed + 2 }).unwrap();
        let mut tape = Tape::new();
        let (av, bv, kv) = (tape.constant(a), tape.constant(b), tape.constant(k));
        let s = tape.add(av, bv).unwrap();
        let ys = tape.conv2d(s, kv, None, p).unwrap();
        let ya = tape.conv2d(av, kv, None, p).unwrap();
        let yb = tape.conv2d(bv, kv, None, p).unwrap();
        let sum = tape.add(ya, yb).unwrap();
        for (l, r) in tape.value(ys).unwrap().values().iter().zip(tape.value(sum).unwrap().values()) {
            prop_assert!((l - r).abs() < 1e-10);
        }
    }
}
