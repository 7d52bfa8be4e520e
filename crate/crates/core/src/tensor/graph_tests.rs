use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fft::{self, ComplexTensor};
use super::gradcheck::{grad_check, grad_check_args};
use super::*;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for n in 0..bs {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(&[n, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_and_constant_cases() {
    let x = rand_tensor(&[1, 1, 4, 4], 1);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let w = g.input(Tensor::ones(&[1, 1, 1, 1]));
    let b = g.input(Tensor::zeros(&[1]));
    let y = g.conv2d(xv, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.data(y), x.data());

    let c = g.input(Tensor::full(&[1, 1, 5, 5], 2.0));
    let w3 = g.input(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(c, w3, None, 1, 1).unwrap();
    assert_eq!(g.value(y).at(&[0, 0, 2, 2]), 18.0);
}

#[test]
fn conv_matches_direct_loop() {
    let x = rand_tensor(&[2, 3, 5, 5], 2);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 1, 0)] {
        let w = rand_tensor(&[4, 3, k, k], 3);
        let b = rand_tensor(&[4], 4);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = conv_oracle(&x, &w, b.data(), stride, pad);
        let diff = g.data(y).iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "k={k} s={stride} p={pad}: {diff}");
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.input(Tensor::zeros(&[3, 4, 3, 3]));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("C_in"), "{err}");
    let w5 = g.input(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(g.conv2d(x, w5, None, 1, 2).is_err());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let a = g.input(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let s = g.softmax(a, 0).unwrap();
    assert_eq!(g.data(s), &[0.5, 0.5]);
    let b = g.input(Tensor::new(&[2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap());
    let s = g.softmax(b, 0).unwrap();
    assert!((g.data(s)[0] - 0.25).abs() < 1e-15 && (g.data(s)[1] - 0.75).abs() < 1e-15);
    let big = g.input(Tensor::new(&[2], vec![1000.0, 1001.0]).unwrap());
    let small = g.input(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
    let (sb, ss) = (g.softmax(big, 0).unwrap(), g.softmax(small, 0).unwrap());
    assert!(g.value(sb).is_finite());
    assert!(g.value(sb).max_abs_diff(g.value(ss)) < 1e-15);
}

#[test]
fn attention_matches_per_head_loop() {
    let (n, d, heads) = (4, 6, 2);
    let dh = d / heads;
    let q = rand_tensor(&[1, n, d], 10);
    let k = rand_tensor(&[1, n, d], 11);
    let v = rand_tensor(&[1, n, d], 12);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let p = g.attn_probs(qv, kv, heads).unwrap();
    let o = g.attn_apply(p, vv, heads).unwrap();
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|t| q.at(&[0, i, h * dh + t]) * k.at(&[0, j, h * dh + t])).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            for j in 0..n {
                assert!((g.value(p).at(&[0, h, i, j]) - probs[j]).abs() < 1e-12);
            }
            for t in 0..dh {
                let want: f64 = (0..n).map(|j| probs[j] * v.at(&[0, j, h * dh + t])).sum();
                assert!((g.value(o).at(&[0, i, h * dh + t]) - want).abs() < 1e-12);
            }
        }
    }
    assert!(g.attn_probs(qv, kv, 4).is_err());
}

#[test]
fn bilinear_examples() {
    let mut g = Graph::new();
    let c = g.input(Tensor::full(&[1, 1, 2, 2], 7.0));
    let up = g.bilinear_upsample(c, 4, 4).unwrap();
    assert!(g.data(up).iter().all(|v| (v - 7.0).abs() < 1e-15));
    let x = rand_tensor(&[1, 2, 3, 3], 5);
    let xv = g.input(x.clone());
    let same = g.bilinear_upsample(xv, 3, 3).unwrap();
    assert_eq!(g.data(same), x.data());
    assert!(g.bilinear_upsample(xv, 0, 3).is_err());
    assert!(g.bilinear_upsample(xv, 2, 3).is_err());
}

#[test]
fn bilinear_matches_weight_table() {
    // 2→3 with half-pixel centres: sources 0, 0.5, 1 give weights
    // (1,0), (0.5,0.5), (0,1) along each axis.
    let table = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]];
    let x = rand_tensor(&[1, 1, 2, 2], 6);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.bilinear_upsample(xv, 3, 3).unwrap();
    for oy in 0..3 {
        for ox in 0..3 {
            let mut want = 0.0;
            for iy in 0..2 {
                for ix in 0..2 {
                    want += table[oy][iy] * table[ox][ix] * x.at(&[0, 0, iy, ix]);
                }
            }
            assert!((g.value(y).at(&[0, 0, oy, ox]) - want).abs() < 1e-12);
        }
    }
}

fn direct_dft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            for y in 0..h {
                for xx in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    re[u * w + v] += x[y * w + xx] * ang.cos();
                    im[u * w + v] += x[y * w + xx] * ang.sin();
                }
            }
        }
    }
    (re, im)
}

#[test]
fn fft_matches_direct_dft_and_parseval() {
    let x = rand_tensor(&[8, 8], 7);
    let s = fft::fft2(&x).unwrap();
    let (re, im) = direct_dft(x.data(), 8, 8);
    for i in 0..64 {
        assert!((s.re()[i] - re[i]).abs() < 1e-10 && (s.im()[i] - im[i]).abs() < 1e-10);
    }
    let energy: f64 = x.data().iter().map(|v| v * v).sum();
    let oracle: f64 = re.iter().zip(&im).map(|(r, i)| r * r + i * i).sum::<f64>() / 64.0;
    assert!((energy - oracle).abs() < 1e-10);
    assert!((energy - s.norm_sqr_sum() / 64.0).abs() < 1e-10);
}

#[test]
fn fftshift_matches_quadrant_swap() {
    let re = rand_tensor(&[8, 8], 8).into_data();
    let im = rand_tensor(&[8, 8], 9).into_data();
    let s = fft::fftshift(&ComplexTensor::new(&[8, 8], re.clone(), im.clone()).unwrap()).unwrap();
    // Quadrants [A B; C D] become [D C; B A].
    for y in 0..8 {
        for x in 0..8 {
            let (sy, sx) = (if y < 4 { y + 4 } else { y - 4 }, if x < 4 { x + 4 } else { x - 4 });
            assert_eq!(s.re()[y * 8 + x], re[sy * 8 + sx]);
            assert_eq!(s.im()[y * 8 + x], im[sy * 8 + sx]);
        }
    }
}

#[test]
fn graph_fft_ops_agree_with_free_functions() {
    let x = rand_tensor(&[2, 4, 8], 13);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let s = g.fft2(xv).unwrap();
    let want = fft::fft2(&x).unwrap();
    for i in 0..64 {
        assert_eq!(g.data(s)[2 * i], want.re()[i]);
        assert_eq!(g.data(s)[2 * i + 1], want.im()[i]);
    }
    let sh = g.fftshift(s).unwrap();
    let want_sh = fft::fftshift(&want).unwrap();
    for i in 0..64 {
        assert_eq!(g.data(sh)[2 * i], want_sh.re()[i]);
    }
    let back = g.ifft2(s).unwrap();
    for i in 0..64 {
        assert!((g.data(back)[2 * i] - x.data()[i]).abs() < 1e-12);
        assert!(g.data(back)[2 * i + 1].abs() < 1e-12);
    }
}

#[test]
fn backward_basics() {
    let x = rand_tensor(&[3, 2], 14);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let s = g.sum(xv);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[1.0; 6]);
    assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    let l = g.scale(s, 0.5);
    g.backward(l).unwrap();
    assert_eq!(g.grad(xv).unwrap(), x.data());

    let mut g = Graph::new();
    let xv = g.param(x);
    assert!(matches!(g.backward(xv), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[2], 3.0));
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
}

fn composite_loss(g: &mut Graph, x: Var, w: &Tensor, targets: &[usize]) -> Result<Var> {
    let wv = g.input(w.clone());
    let y = g.conv2d(x, wv, None, 1, 1)?;
    let r = g.relu(y);
    let _p = g.softmax(r, 1)?;
    g.cross_entropy(r, targets)
}

#[test]
fn composite_conv_relu_softmax_ce_gradient() {
    let mut x = rand_tensor(&[1, 2, 4, 4], 15);
    x.data_mut().iter_mut().for_each(|v| *v += 0.05 * v.signum());
    let w = rand_tensor(&[3, 2, 3, 3], 16);
    let targets: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let err = grad_check(|g, v| composite_loss(g, v, &w, &targets), &x, 1e-6).unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let x = rand_tensor(&[1, 2, 4, 4], 17);
    let w = rand_tensor(&[3, 2, 3, 3], 18);
    let targets: Vec<usize> = (0..16).map(|i| (i * 7) % 3).collect();
    let run = || {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let l = composite_loss(&mut g, xv, &w, &targets).unwrap();
        g.backward(l).unwrap();
        g.grad(xv).unwrap().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn nll_ignores_marked_pixels() {
    let mut g = Graph::new();
    let lp = g.input(Tensor::new(&[1, 2, 2], vec![-0.1, -2.0, -2.3, -0.2]).unwrap());
    let l = g.nll(lp, &[0, IGNORE_INDEX]).unwrap();
    assert!((g.value(l).item() - 0.1).abs() < 1e-15);
    let none = g.nll(lp, &[IGNORE_INDEX, IGNORE_INDEX]).unwrap();
    assert_eq!(g.value(none).item(), 0.0);
    assert!(g.nll(lp, &[2, 0]).is_err());
}

#[test]
fn max_pool_and_adaptive_pool_oracles() {
    let x = rand_tensor(&[1, 1, 5, 5], 19);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let m = g.max_pool2d(xv, 3, 2).unwrap();
    for oy in 0..2 {
        for ox in 0..2 {
            let mut best = f64::NEG_INFINITY;
            for ky in 0..3 {
                for kx in 0..3 {
                    best = best.max(x.at(&[0, 0, oy * 2 + ky, ox * 2 + kx]));
                }
            }
            assert_eq!(g.value(m).at(&[0, 0, oy, ox]), best);
        }
    }
    let a = g.adaptive_avg_pool2d(xv, 3, 3).unwrap();
    // 5→3 bins: [0,2), [1,4), [3,5).
    let bins = [(0, 2), (1, 4), (3, 5)];
    for (by, &(y0, y1)) in bins.iter().enumerate() {
        for (bx, &(x0, x1)) in bins.iter().enumerate() {
            let mut s = 0.0;
            for y in y0..y1 {
                for xx in x0..x1 {
                    s += x.at(&[0, 0, y, xx]);
                }
            }
            let want = s / ((y1 - y0) * (x1 - x0)) as f64;
            assert!((g.value(a).at(&[0, 0, by, bx]) - want).abs() < 1e-14);
        }
    }
    let one = g.adaptive_avg_pool2d(xv, 1, 1).unwrap();
    assert!((g.value(one).item() - x.data().iter().sum::<f64>() / 25.0).abs() < 1e-14);
}

#[test]
fn norms_match_stepwise_formulas() {
    let x = rand_tensor(&[3, 2, 2], 20);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let gm = g.input(Tensor::ones(&[2]));
    let bt = g.input(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm(xv, gm, bt, 1e-5).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|b| (0..2).map(move |i| (b, i))).map(|(b, i)| x.at(&[b, c, i])).collect();
        let mean = vals.iter().sum::<f64>() / 6.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!((stats.mean[c] - mean).abs() < 1e-14);
        assert!((stats.var[c] - var * 6.0 / 5.0).abs() < 1e-14);
        let want = (x.at(&[1, c, 0]) - mean) / (var + 1e-5).sqrt();
        assert!((g.value(y).at(&[1, c, 0]) - want).abs() < 1e-12);
    }
    let ev = g.batch_norm_eval(xv, gm, bt, &[0.0, 1.0], &[1.0 - 1e-5, 4.0 - 1e-5], 1e-5).unwrap();
    assert!((g.value(ev).at(&[0, 1, 0]) - (x.at(&[0, 1, 0]) - 1.0) / 2.0).abs() < 1e-12);

    let ln = g.layer_norm(xv, gm, bt, 1e-5).unwrap();
    for row in g.data(ln).chunks(2) {
        assert!(row.iter().sum::<f64>().abs() < 1e-12);
    }
}

#[test]
fn concat_permute_and_mean_axis() {
    let mut g = Graph::new();
    let a = g.input(Tensor::from_fn(&[2, 1, 2], |i| i as f64));
    let b = g.input(Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 2]);
    assert_eq!(g.data(c), &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]);
    let p = g.permute(c, &[2, 0, 1]).unwrap();
    assert_eq!(g.shape(p), &[2, 2, 3]);
    assert_eq!(g.value(p).at(&[1, 0, 2]), g.value(c).at(&[0, 2, 1]));
    let m = g.mean_axis(c, 1).unwrap();
    assert_eq!(g.data(m), &[22.0 / 3.0, 25.0 / 3.0, 32.0 / 3.0, 35.0 / 3.0]);
}

#[test]
fn kl_and_one_hot_argmax_roundtrip() {
    let mut g = Graph::new();
    let t = g.input(Tensor::new(&[1, 2], vec![0.75, 0.25]).unwrap());
    let q = g.input(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
    let kl = g.kl_div(t, q, 1e-12).unwrap();
    let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
    assert!((g.value(kl).item() - want).abs() < 1e-15);
    let same = g.kl_div(t, t, 1e-12).unwrap();
    assert_eq!(g.value(same).item(), 0.0);

    let x = rand_tensor(&[2, 4, 3], 21);
    let (shape, idx) = x.argmax(1).unwrap();
    let oh = one_hot(&idx, &shape, 4, 1).unwrap();
    assert_eq!(oh.argmax(1).unwrap().1, idx);
}

#[test]
fn each_argument_gradient_of_linear_and_conv() {
    let args = [rand_tensor(&[2, 3, 4], 22), rand_tensor(&[4, 5], 23), rand_tensor(&[5], 24)];
    let r = rand_tensor(&[2, 3, 5], 25);
    let err = grad_check_args::<_, TensorError>(
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let rv = g.input(r.clone());
            let m = g.mul(y, rv)?;
            Ok(g.sum(m))
        },
        &args,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = rand_tensor(&[3, 5, 2], seed);
        let mut g = Graph::new();
        let xv = g.input(x);
        let xs = g.scale(xv, scale);
        let s = g.softmax(xs, 1).unwrap();
        let t = g.value(s);
        for o in 0..3 {
            for i in 0..2 {
                let sum: f64 = (0..5).map(|a| t.at(&[o, a, i])).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!((0..5).all(|a| t.at(&[o, a, i]) > 0.0));
            }
        }
    }

    #[test]
    fn fft_roundtrip_and_linearity(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = rand_tensor(&[2, 8, 4], seed);
        let y = rand_tensor(&[2, 8, 4], seed ^ 0x5555);
        let fx = fft::fft2(&x).unwrap();
        let back = fft::ifft2(&fx).unwrap();
        prop_assert!(back.real().max_abs_diff(&x) <= 1e-10);
        prop_assert!(back.im().iter().all(|v| v.abs() <= 1e-10));
        let fy = fft::fft2(&y).unwrap();
        let comb = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let fc = fft::fft2(&comb).unwrap();
        for i in 0..x.numel() {
            prop_assert!((fc.re()[i] - (a * fx.re()[i] + b * fy.re()[i])).abs() <= 1e-10);
            prop_assert!((fc.im()[i] - (a * fx.im()[i] + b * fy.im()[i])).abs() <= 1e-10);
        }
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        prop_assert!((energy - fx.norm_sqr_sum() / 32.0).abs() <= 1e-10);
    }

    #[test]
    fn fftshift_is_an_involution(seed in any::<u64>(), hp in 1u32..4, wp in 1u32..4) {
        let (h, w) = (1usize << hp, 1usize << wp);
        let c = ComplexTensor::new(&[h, w], rand_tensor(&[h, w], seed).into_data(), rand_tensor(&[h, w], seed + 1).into_data()).unwrap();
        prop_assert_eq!(fft::fftshift(&fft::fftshift(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn bilinear_preserves_constants(v in -5.0f64..5.0, h in 1usize..5, w in 1usize..5, dh in 0usize..5, dw in 0usize..5) {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 2, h, w], v));
        let y = g.bilinear_upsample(x, h + dh, w + dw).unwrap();
        prop_assert!(g.data(y).iter().all(|o| (o - v).abs() < 1e-12));
    }
}
