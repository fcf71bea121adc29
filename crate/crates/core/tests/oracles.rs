//! Convolution kernels against direct loops.

use faster_core::{Graph, Tensor, Window3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Straight transcription of padded, strided cross-correlation.
fn conv_loops(x: &Tensor<f64>, k: &Tensor<f64>, stride: [usize; 3], pad: [usize; 3]) -> Option<Tensor<f64>> {
    let [n, t, h, w, cin] = x.shape().try_into().unwrap();
    let [kt, kh, kw, _, cout] = k.shape().try_into().unwrap();
    let ext = [t, h, w];
    let kern = [kt, kh, kw];
    let mut out = [0; 3];
    for a in 0..3 {
        if ext[a] + 2 * pad[a] < kern[a] {
            return None;
        }
        out[a] = (ext[a] + 2 * pad[a] - kern[a]) / stride[a] + 1;
    }
    let xs = |b: usize, i: usize, j: usize, l: usize, c: usize| x.data()[(((b * t + i) * h + j) * w + l) * cin + c];
    let ks = |a: usize, i: usize, j: usize, ci: usize, co: usize| k.data()[(((a * kh + i) * kw + j) * cin + ci) * cout + co];
    let mut y = Tensor::zeros(&[n, out[0], out[1], out[2], cout]);
    let mut idx = 0;
    for b in 0..n {
        for ot in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for a in 0..kt {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let it = (ot * stride[0] + a) as isize - pad[0] as isize;
                                    let ih = (oh * stride[1] + i) as isize - pad[1] as isize;
                                    let iw = (ow * stride[2] + j) as isize - pad[2] as isize;
                                    if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        acc += xs(b, it as usize, ih as usize, iw as usize, ci) * ks(a, i, j, ci, co);
                                    }
                                }
                            }
                        }
                        y.data_mut()[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    Some(y)
}

fn tape_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: [usize; 3], pad: [usize; 3]) -> faster_core::Result<Tensor<f64>> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let kv = g.constant(k.clone());
    let y = g.conv3d(xv, kv, Window3::new(stride, pad))?;
    Ok(g.value(y).clone())
}

/// Every (extent, kernel, stride, padding) combination per axis with extents
/// and kernels up to 4, strides and paddings up to 1 and 2.
#[test]
fn conv3d_matches_direct_summation_exhaustively() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut axis = Vec::new();
    for e in 1..=4 {
        for k in 1..=4 {
            for s in 1..=2 {
                for p in 0..=1 {
                    axis.push((e, k, s, p));
                }
            }
        }
    }
    let (mut compared, mut rejected) = (0usize, 0usize);
    for &(et, kt, st, pt) in &axis {
        for &(eh, kh, sh, ph) in &axis {
            for &(ew, kw, sw, pw) in &axis {
                let x = random(&[1, et, eh, ew, 2], &mut rng);
                let k = random(&[kt, kh, kw, 2, 2], &mut rng);
                let (stride, pad) = ([st, sh, sw], [pt, ph, pw]);
                match (conv_loops(&x, &k, stride, pad), tape_conv(&x, &k, stride, pad)) {
                    (Some(want), Ok(got)) => {
                        assert_eq!(got.shape(), want.shape());
                        let d = got.max_abs_diff(&want).unwrap();
                        assert!(d < 1e-6, "diff {d} at x {:?} k {:?} s {:?} p {:?}", x.shape(), k.shape(), stride, pad);
                        compared += 1;
                    }
                    (None, Err(_)) => rejected += 1,
                    (want, got) => panic!("disagreement on emptiness: {:?} vs {:?}", want.map(|t| t.shape().to_vec()), got),
                }
            }
        }
    }
    assert_eq!(compared + rejected, axis.len().pow(3));
    assert!(compared > 100_000);
}

#[test]
fn conv3d_channels_and_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in 1..=3 {
        for cin in 1..=4 {
            for cout in 1..=4 {
                let x = random(&[n, 3, 4, 2, cin], &mut rng);
                let k = random(&[2, 3, 1, cin, cout], &mut rng);
                let want = conv_loops(&x, &k, [1, 2, 1], [1, 1, 0]).unwrap();
                let got = tape_conv(&x, &k, [1, 2, 1], [1, 1, 0]).unwrap();
                assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
            }
        }
    }
}

#[test]
fn pointwise_conv_is_a_matrix_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..=2 {
        for l in 1..=4 {
            for hw in 1..=4 {
                for cin in 1..=4 {
                    for cout in 1..=4 {
                        let x = random(&[n, l, hw, hw, cin], &mut rng);
                        let w = random(&[cin, cout], &mut rng);
                        let b = random(&[cout], &mut rng);
                        let mut g = Graph::inference();
                        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
                        let y = g.pointwise_conv(xv, wv, Some(bv)).unwrap();
                        let got = g.value(y);
                        assert_eq!(got.shape(), &[n, l, hw, hw, cout]);
                        let rows = n * l * hw * hw;
                        for r in 0..rows {
                            for co in 0..cout {
                                let mut acc = b.data()[co];
                                for ci in 0..cin {
                                    acc += x.data()[r * cin + ci] * w.data()[ci * cout + co];
                                }
                                assert!((got.data()[r * cout + co] - acc).abs() < 1e-6);
                            }
                        }
                    }
                }
            }
        }
    }
}
