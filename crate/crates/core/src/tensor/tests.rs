use super::gradcheck::{max_rel_error, rand_param};
use super::*;

fn approx(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ── conv2d ───────────────────────────────────────────────────────────

#[test]
fn conv_identity_kernel() {
    let tape = Tape::<f32>::no_grad();
    let x = Tensor::new(&[1, 4, 5], (0..20).map(|i| i as f32).collect()).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let b = Tensor::new(&[1], vec![0.0]).unwrap();
    let y = tape.conv2d(&x, &w, Some(&b), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 4, 5]);
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv_counting_kernel() {
    let tape = Tape::<f32>::no_grad();
    let x = Tensor::full(&[1, 5, 5], 1.0);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = tape.conv2d(&x, &w, None, 1, 1).unwrap();
    let v = y.to_vec();
    // interior pixel sees all nine ones
    assert_eq!(v[2 * 5 + 2], 9.0);
    // corner sees four
    assert_eq!(v[0], 4.0);
}

/// Independent sliding-window oracle: direct triple loop, no im2col.
fn conv_oracle(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    wt: &[f32],
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[ic * h * w + iy as usize * w + ix as usize]
                                * wt[((oc * c + ic) * k + ky) * k + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_matches_sliding_window_oracle_small() {
    let tape = Tape::<f32>::no_grad();
    let xd: Vec<f32> = gradcheck::smooth_random(3 * 5 * 5, 11).iter().map(|v| *v as f32).collect();
    let wd: Vec<f32> = gradcheck::smooth_random(1 * 3 * 3 * 3, 12).iter().map(|v| *v as f32).collect();
    let x = Tensor::new(&[3, 5, 5], xd.clone()).unwrap();
    let w = Tensor::new(&[1, 3, 3, 3], wd.clone()).unwrap();
    let y = tape.conv2d(&x, &w, None, 2, 0).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2]);
    let expect = conv_oracle(&xd, 3, 5, 5, &wd, 1, 3, 2, 0);
    for (a, b) in y.to_vec().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
    }
}

#[test]
fn conv_matches_sliding_window_oracle_large() {
    let tape = Tape::<f32>::no_grad();
    let (c, h, w, o, k) = (8, 32, 32, 4, 3);
    let xd: Vec<f32> = gradcheck::smooth_random(c * h * w, 21).iter().map(|v| *v as f32).collect();
    let wd: Vec<f32> = gradcheck::smooth_random(o * c * k * k, 22).iter().map(|v| *v as f32).collect();
    let x = Tensor::new(&[c, h, w], xd.clone()).unwrap();
    let wt = Tensor::new(&[o, c, k, k], wd.clone()).unwrap();
    let y = tape.conv2d(&x, &wt, None, 1, 1).unwrap();
    let expect = conv_oracle(&xd, c, h, w, &wd, o, k, 1, 1);
    for (a, b) in y.to_vec().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
    }
}

#[test]
fn conv_shape_mismatch_reports_axes() {
    let tape = Tape::<f32>::no_grad();
    let x = Tensor::zeros(&[3, 5, 5]);
    let w = Tensor::zeros(&[1, 4, 3, 3]);
    let err = tape.conv2d(&x, &w, None, 1, 1).unwrap_err();
    assert!(matches!(err, crate::error::FlowError::Shape { .. }));
}

// ── softmax ──────────────────────────────────────────────────────────

#[test]
fn softmax_symmetry() {
    let tape = Tape::<f64>::no_grad();
    let x = Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap();
    let y = tape.softmax(&x, 0).unwrap();
    for v in y.to_vec() {
        assert!(approx(v, 1.0 / 3.0, 1e-12));
    }
}

#[test]
fn softmax_closed_form() {
    let tape = Tape::<f64>::no_grad();
    let x = Tensor::new(&[2], vec![0.0, 3.0f64.ln()]).unwrap();
    let y = tape.softmax(&x, 0).unwrap();
    let v = y.to_vec();
    assert!(approx(v[0], 0.25, 1e-12));
    assert!(approx(v[1], 0.75, 1e-12));
}

#[test]
fn softmax_no_overflow() {
    let tape = Tape::<f32>::no_grad();
    let x = Tensor::new(&[2], vec![1000.0, 0.0]).unwrap();
    let y = tape.softmax(&x, 0).unwrap();
    let v = y.to_vec();
    assert!(v[0].is_finite() && v[1].is_finite());
    assert!(approx(v[0] as f64, 1.0, 1e-6));
    assert!(approx(v[1] as f64, 0.0, 1e-6));
}

#[test]
fn softmax_slices_sum_to_one() {
    let tape = Tape::<f64>::no_grad();
    let data = gradcheck::smooth_random(2 * 5 * 3, 31);
    let x = Tensor::new(&[2, 5, 3], data).unwrap();
    let y = tape.softmax(&x, 1).unwrap();
    let v = y.to_vec();
    for o in 0..2 {
        for i in 0..3 {
            let s: f64 = (0..5).map(|l| v[o * 15 + l * 3 + i]).sum();
            assert!(approx(s, 1.0, 1e-6));
            for l in 0..5 {
                assert!(v[o * 15 + l * 3 + i] > 0.0);
            }
        }
    }
}

// ── misc ops ─────────────────────────────────────────────────────────

#[test]
fn relu_values() {
    let tape = Tape::<f32>::no_grad();
    let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(tape.relu(&x).to_vec(), vec![0.0, 0.0, 2.0]);
}

#[test]
fn concat_channel_axis() {
    let tape = Tape::<f32>::no_grad();
    let a = Tensor::zeros(&[2, 4, 4]);
    let b = Tensor::zeros(&[3, 4, 4]);
    let y = tape.concat(&[&a, &b], 0).unwrap();
    assert_eq!(y.shape(), &[5, 4, 4]);
}

#[test]
fn bilinear_resize_preserves_constants() {
    let tape = Tape::<f32>::no_grad();
    let x = Tensor::full(&[2, 4, 6], 3.25);
    for (oh, ow) in [(8, 12), (3, 5), (4, 6), (13, 7)] {
        let y = tape.bilinear_resize(&x, oh, ow).unwrap();
        assert_eq!(y.shape(), &[2, oh, ow]);
        for v in y.to_vec() {
            assert!(approx(v as f64, 3.25, 1e-6));
        }
    }
}

#[test]
fn avg_downsample_means() {
    let tape = Tape::<f32>::no_grad();
    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let y = tape.avg_downsample(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1]);
    assert_eq!(y.to_vec(), vec![3.0]);
}

// ── backward ─────────────────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let tape = Tape::<f64>::new();
    let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let loss = tape.sum_all(&x);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_softmax_sum_is_zero_grad() {
    let tape = Tape::<f64>::new();
    let x = Tensor::param(&[4], vec![0.3, -1.0, 2.0, 0.1]).unwrap();
    let y = tape.softmax(&x, 0).unwrap();
    let loss = tape.sum_all(&y);
    tape.backward(&loss).unwrap();
    for g in x.grad().unwrap() {
        assert!(g.abs() < 1e-12);
    }
}

#[test]
fn backward_twice_errors() {
    let tape = Tape::<f64>::new();
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let loss = tape.sum_all(&x);
    tape.backward(&loss).unwrap();
    assert!(matches!(
        tape.backward(&loss),
        Err(crate::error::FlowError::TapeConsumed)
    ));
}

#[test]
fn backward_accumulates_for_shared_tensors() {
    let tape = Tape::<f64>::new();
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let y = tape.add(&x, &x).unwrap();
    let loss = tape.sum_all(&y);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::<f64>::new();
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let y = tape.add(&x, &x).unwrap();
    assert!(tape.backward(&y).is_err());
}

// ── spot gradient checks (the full per-op sweep lives in the suite) ──

#[test]
fn gradcheck_conv2d_spot() {
    let x = rand_param::<f64>(&[2, 5, 5], 41);
    let w = rand_param::<f64>(&[3, 2, 3, 3], 42);
    let b = rand_param::<f64>(&[3], 43);
    let err = max_rel_error(&[x.clone(), w.clone(), b.clone()], &move |tape, inp| {
        tape.conv2d(&inp[0], &inp[1], Some(&inp[2]), 1, 1)
    })
    .unwrap();
    assert!(err <= 1e-5, "max rel err {}", err);
}

#[test]
fn gradcheck_softmax_spot() {
    let x = rand_param::<f64>(&[2, 4, 3], 44);
    let err = max_rel_error(&[x], &|tape, inp| tape.softmax(&inp[0], 1)).unwrap();
    assert!(err <= 1e-5, "max rel err {}", err);
}
