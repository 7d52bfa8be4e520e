//! Named finite-difference checks over every differentiable operation and
//! the composite objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{gaussian_filter, freq_channel_gate, FilterKind, ProbMap};
use crate::losses::{self, LossParts, LossWeights, Mode};
use crate::nn::{mhsa, MhsaWeights};
use crate::tensor::gradcheck::grad_check_args;
use crate::{Error, Graph, Result, Tensor, Var};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-5;
pub const STEP: f64 = 1e-6;
/// Registered check whose backward rule is wrong on purpose; excluded from
/// `all`.
pub const BROKEN_FIXTURE: &str = "fixture-broken";

type Build = fn(&mut ChaCha8Rng) -> Case;

/// Arguments and a scalar-valued function of them.
pub struct Case {
    pub args: Vec<Tensor>,
    pub f: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
}

fn rt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ y ⊙ W` for a fixed pseudo-random `W`, so every output entry carries
/// a distinct weight.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w = Tensor::from_fn(g.shape(y), |i| ((i * 7919 + 13) % 97) as f64 / 97.0 - 0.45 + 1.0 / (n + 1) as f64);
    let wv = g.input(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn case(args: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { args, f: Box::new(f) }
}

fn unary(rng: &mut ChaCha8Rng, lo: f64, hi: f64, op: fn(&mut Graph, Var) -> Var) -> Case {
    case(vec![rt(rng, &[3, 4], lo, hi)], move |g, v| {
        let y = op(g, v[0]);
        project(g, y)
    })
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

fn stochastic(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = *shape.last().expect("rank ≥ 1");
    let mut t = rt(rng, shape, 0.1, 1.0);
    for row in t.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// The registry, in report order.
pub fn registry() -> Vec<(&'static str, Build)> {
    vec![
        ("add", |r| case(vec![rt(r, &[2, 3], -1.0, 1.0), rt(r, &[2, 3], -1.0, 1.0)], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        })),
        ("sub", |r| case(vec![rt(r, &[2, 3], -1.0, 1.0), rt(r, &[2, 3], -1.0, 1.0)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y)
        })),
        ("mul", |r| case(vec![rt(r, &[2, 3], -1.0, 1.0), rt(r, &[2, 3], -1.0, 1.0)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        })),
        ("scale", |r| unary(r, -1.0, 1.0, |g, x| g.scale(x, -1.7))),
        ("add_scalar", |r| unary(r, -1.0, 1.0, |g, x| g.add_scalar(x, 0.3))),
        ("add_trailing", |r| case(vec![rt(r, &[2, 3, 4], -1.0, 1.0), rt(r, &[3, 4], -1.0, 1.0)], |g, v| {
            let y = g.add_trailing(v[0], v[1])?;
            project(g, y)
        })),
        ("narrow", |r| case(vec![rt(r, &[4, 3, 2], -1.0, 1.0)], |g, v| {
            let y = g.narrow(v[0], 0, 1, 2)?;
            project(g, y)
        })),
        ("relu", |r| unary(r, -1.0, 1.0, |g, x| g.relu(x))),
        ("sigmoid", |r| unary(r, -3.0, 3.0, |g, x| g.sigmoid(x))),
        ("gelu", |r| unary(r, -3.0, 3.0, |g, x| g.gelu(x))),
        ("exp", |r| unary(r, -1.0, 1.0, |g, x| g.exp(x))),
        ("log", |r| unary(r, 0.2, 2.0, |g, x| g.log(x, 1e-12))),
        ("sin", |r| unary(r, -3.0, 3.0, |g, x| g.sin(x))),
        ("sum", |r| unary(r, -1.0, 1.0, |g, x| g.sum(x))),
        ("mean", |r| unary(r, -1.0, 1.0, |g, x| g.mean(x))),
        ("mean_axis", |r| case(vec![rt(r, &[2, 3, 4], -1.0, 1.0)], |g, v| {
            let y = g.mean_axis(v[0], 1)?;
            project(g, y)
        })),
        ("reshape", |r| case(vec![rt(r, &[2, 6], -1.0, 1.0)], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            project(g, y)
        })),
        ("permute", |r| case(vec![rt(r, &[2, 3, 4], -1.0, 1.0)], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            project(g, y)
        })),
        ("matmul", |r| case(vec![rt(r, &[3, 4], -1.0, 1.0), rt(r, &[4, 2], -1.0, 1.0)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        })),
        ("linear", |r| {
            case(vec![rt(r, &[2, 3, 4], -1.0, 1.0), rt(r, &[4, 5], -1.0, 1.0), rt(r, &[5], -1.0, 1.0)], |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y)
            })
        }),
        ("conv2d_3x3", |r| {
            case(vec![rt(r, &[2, 2, 5, 5], -1.0, 1.0), rt(r, &[3, 2, 3, 3], -1.0, 1.0), rt(r, &[3], -1.0, 1.0)], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                project(g, y)
            })
        }),
        ("conv2d_3x3_stride2", |r| case(vec![rt(r, &[1, 2, 6, 6], -1.0, 1.0), rt(r, &[2, 2, 3, 3], -1.0, 1.0)], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            project(g, y)
        })),
        ("conv2d_1x1", |r| {
            case(vec![rt(r, &[2, 3, 4, 4], -1.0, 1.0), rt(r, &[2, 3, 1, 1], -1.0, 1.0), rt(r, &[2], -1.0, 1.0)], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
                project(g, y)
            })
        }),
        ("batch_norm", |r| {
            case(vec![rt(r, &[3, 2, 3, 3], -1.0, 1.0), rt(r, &[2], 0.5, 1.5), rt(r, &[2], -1.0, 1.0)], |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y)
            })
        }),
        ("layer_norm", |r| {
            case(vec![rt(r, &[2, 3, 5], -1.0, 1.0), rt(r, &[5], 0.5, 1.5), rt(r, &[5], -1.0, 1.0)], |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
                project(g, y)
            })
        }),
        ("softmax", |r| case(vec![rt(r, &[2, 4, 3], -2.0, 2.0)], |g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y)
        })),
        ("log_softmax", |r| case(vec![rt(r, &[2, 4, 3], -2.0, 2.0)], |g, v| {
            let y = g.log_softmax(v[0], 1)?;
            project(g, y)
        })),
        ("max_pool2d", |r| case(vec![rt(r, &[1, 2, 4, 4], -1.0, 1.0)], |g, v| {
            let y = g.max_pool2d(v[0], 2, 2)?;
            project(g, y)
        })),
        ("adaptive_avg_pool2d", |r| case(vec![rt(r, &[1, 2, 5, 5], -1.0, 1.0)], |g, v| {
            let y = g.adaptive_avg_pool2d(v[0], 3, 2)?;
            project(g, y)
        })),
        ("bilinear_upsample", |r| case(vec![rt(r, &[1, 2, 3, 2], -1.0, 1.0)], |g, v| {
            let y = g.bilinear_upsample(v[0], 5, 4)?;
            project(g, y)
        })),
        ("concat", |r| case(vec![rt(r, &[2, 2, 3], -1.0, 1.0), rt(r, &[2, 1, 3], -1.0, 1.0)], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            project(g, y)
        })),
        ("mul_channel", |r| case(vec![rt(r, &[2, 3, 2, 2], -1.0, 1.0), rt(r, &[2, 3], -1.0, 1.0)], |g, v| {
            let y = g.mul_channel(v[0], v[1])?;
            project(g, y)
        })),
        ("attn_probs", |r| case(vec![rt(r, &[2, 3, 4], -1.0, 1.0), rt(r, &[2, 3, 4], -1.0, 1.0)], |g, v| {
            let y = g.attn_probs(v[0], v[1], 2)?;
            project(g, y)
        })),
        ("attn_apply", |r| case(vec![stochastic(r, &[2, 2, 3, 3]), rt(r, &[2, 3, 4], -1.0, 1.0)], |g, v| {
            let y = g.attn_apply(v[0], v[1], 2)?;
            project(g, y)
        })),
        ("row_normalize", |r| case(vec![rt(r, &[2, 3, 4], 0.2, 1.0)], |g, v| {
            let y = g.row_normalize(v[0])?;
            project(g, y)
        })),
        ("fft2", |r| case(vec![rt(r, &[2, 4, 4], -1.0, 1.0)], |g, v| {
            let y = g.fft2(v[0])?;
            project(g, y)
        })),
        ("ifft2", |r| case(vec![rt(r, &[4, 2, 2], -1.0, 1.0)], |g, v| {
            let y = g.ifft2(v[0])?;
            project(g, y)
        })),
        ("fftshift", |r| case(vec![rt(r, &[4, 4, 2], -1.0, 1.0)], |g, v| {
            let y = g.fftshift(v[0])?;
            project(g, y)
        })),
        ("mask_mul", |r| {
            let mask = rt(r, &[4, 4], 0.0, 1.0);
            case(vec![rt(r, &[4, 4, 2], -1.0, 1.0)], move |g, v| {
                let y = g.mask_mul(v[0], &mask)?;
                project(g, y)
            })
        }),
        ("complex_abs", |r| case(vec![rt(r, &[3, 2, 2], -1.0, 1.0)], |g, v| {
            let y = g.complex_abs(v[0], 1e-12)?;
            project(g, y)
        })),
        ("nll", |r| {
            let t = labels(r, 2 * 3, 4);
            case(vec![rt(r, &[2, 4, 3], -3.0, -0.1)], move |g, v| Ok(g.nll(v[0], &t)?))
        }),
        ("cross_entropy", |r| {
            let t = labels(r, 2 * 2 * 2, 3);
            case(vec![rt(r, &[2, 3, 2, 2], -2.0, 2.0)], move |g, v| Ok(g.cross_entropy(v[0], &t)?))
        }),
        ("kl_div", |r| case(vec![stochastic(r, &[2, 4]), stochastic(r, &[2, 4])], |g, v| Ok(g.kl_div(v[0], v[1], 1e-12)?))),
        ("mhsa", |r| {
            let d = 4;
            let mut args = vec![rt(r, &[2, 3, d], -1.0, 1.0)];
            for _ in 0..4 {
                args.push(rt(r, &[d, d], -0.7, 0.7));
            }
            case(args, |g, v| {
                let w = MhsaWeights { wq: v[1], wk: v[2], wv: v[3], wo: v[4], bias: None };
                let (out, map) = mhsa(g, v[0], &w, 2)?;
                let a = project(g, out)?;
                let b = project(g, map)?;
                Ok(g.add(a, b)?)
            })
        }),
        ("freq_channel_gate", |r| {
            let mask = gaussian_filter(FilterKind::HighPass, 1.0, 4, 4).expect("valid filter");
            case(vec![rt(r, &[2, 3, 4, 4], -1.0, 1.0), rt(r, &[3, 3], -1.0, 1.0), rt(r, &[3], -1.0, 1.0)], move |g, v| {
                let (y, z) = freq_channel_gate(g, v[0], &mask, v[1], v[2])?;
                let a = project(g, y)?;
                let b = project(g, z)?;
                Ok(g.add(a, b)?)
            })
        }),
        ("spatial_loss", |r| case(vec![rt(r, &[2, 3, 2, 2], -1.0, 1.0), rt(r, &[2, 3, 2, 2], -1.0, 1.0)], |g, v| {
            losses::spatial_loss(g, v[0], v[1])
        })),
        // Attention maps enter as logits so that perturbed inputs stay
        // row-stochastic.
        ("attention_loss", |r| case(vec![rt(r, &[2, 4, 4], -2.0, 2.0), rt(r, &[2, 2, 2], -2.0, 2.0)], |g, v| {
            let a = g.softmax(v[0], 2)?;
            let b = g.softmax(v[1], 2)?;
            losses::attention_loss(g, a, b)
        })),
        ("attention_loss_same_size", |r| case(vec![rt(r, &[2, 4, 4], -2.0, 2.0), rt(r, &[2, 4, 4], -2.0, 2.0)], |g, v| {
            let a = g.softmax(v[0], 2)?;
            let b = g.softmax(v[1], 2)?;
            losses::attention_loss(g, a, b)
        })),
        ("seg_ce", |r| {
            let t = labels(r, 2 * 3 * 3, 3);
            case(vec![rt(r, &[2, 3, 3, 3], -2.0, 2.0)], move |g, v| {
                let lp = g.log_softmax(v[0], 1)?;
                losses::seg_ce(g, ProbMap { log_probs: lp }, &t)
            })
        }),
        ("cps", |r| {
            let shape = [2, 3, 2, 2];
            case(vec![rt(r, &shape, -2.0, 2.0), rt(r, &shape, -2.0, 2.0), rt(r, &shape, -2.0, 2.0)], |g, v| {
                let mut p = [ProbMap { log_probs: v[0] }; 3];
                for i in 0..3 {
                    p[i] = ProbMap { log_probs: g.log_softmax(v[i], 1)? };
                }
                let c = losses::cps_losses(g, p)?;
                let s = g.add(c[0], c[1])?;
                Ok(g.add(s, c[2])?)
            })
        }),
        ("total_loss", |r| {
            let shape = [2, 3, 2, 2];
            let t = labels(r, 2 * 2 * 2, 3);
            let mut args: Vec<Tensor> = (0..3).map(|_| rt(r, &shape, -2.0, 2.0)).collect();
            args.push(rt(r, &[2, 2, 2, 2], -1.0, 1.0));
            args.push(rt(r, &[2, 2, 2, 2], -1.0, 1.0));
            args.push(rt(r, &[2, 4, 4], -2.0, 2.0));
            args.push(rt(r, &[2, 2, 2], -2.0, 2.0));
            case(args, move |g, v| {
                let mut p = [ProbMap { log_probs: v[0] }; 3];
                for i in 0..3 {
                    p[i] = ProbMap { log_probs: g.log_softmax(v[i], 1)? };
                }
                let seg = [
                    losses::seg_ce(g, p[0], &t)?,
                    losses::seg_ce(g, p[1], &t)?,
                    losses::seg_ce(g, p[2], &t)?,
                ];
                let cps = Some(losses::cps_losses(g, p)?);
                let spa = losses::spatial_loss(g, v[3], v[4])?;
                let (a, b) = (g.softmax(v[5], 2)?, g.softmax(v[6], 2)?);
                let att = losses::attention_loss(g, a, b)?;
                losses::total_loss(g, &LossParts { seg, cps, spa, att }, &LossWeights::default(), Mode::Semi)
            })
        }),
        (BROKEN_FIXTURE, |r| unary(r, -1.0, 1.0, |g, x| g.custom_unary(x, |t| t * t * t, |t| 2.0 * t))),
    ]
}

/// Names `all` expands to: every entry except the broken fixture.
pub fn all_names() -> Vec<&'static str> {
    registry().into_iter().map(|(n, _)| n).filter(|n| *n != BROKEN_FIXTURE).collect()
}

/// Worst relative error of `name` over `seeds`.
pub fn check(name: &str, seeds: std::ops::Range<u64>) -> Result<f64> {
    let build = registry()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| b)
        .ok_or_else(|| Error::Config { key: "op".into(), detail: format!("unknown op `{name}`") })?;
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let c = build(&mut ChaCha8Rng::seed_from_u64(seed));
        let f = &c.f;
        worst = worst.max(grad_check_args::<_, Error>(|g, v| f(g, v), &c.args, STEP)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_unique() {
        let names: Vec<_> = registry().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(!all_names().contains(&BROKEN_FIXTURE));
    }

    #[test]
    fn softmax_passes_and_fixture_fails() {
        assert!(check("softmax", 0..3).unwrap() <= TOLERANCE);
        assert!(check(BROKEN_FIXTURE, 0..1).unwrap() > TOLERANCE);
        assert!(matches!(check("nope", 0..1), Err(Error::Config { .. })));
    }
}
