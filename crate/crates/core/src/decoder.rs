//! Dual-frequency decoder: pyramid pooling on stage 4, spectral channel
//! gating on stages 1–3 (high-pass on 1–2, low-pass on 3), per-stage
//! reduction, top-down fusion and a per-pixel class head.

use crate::config::ModelConfig;
use crate::nn::{self, Bound, Init, SpecList};
use crate::{Error, Graph, Result, Tensor, Var};

/// Smoothing inside the magnitude square root.
pub const MAG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    LowPass,
    HighPass,
}

/// Gaussian mask over a shifted `H×W` spectrum.
#[derive(Clone, Debug)]
pub struct FilterMask {
    pub kind: FilterKind,
    pub d0: f64,
    pub mask: Tensor,
}

/// `exp(−D²/(2·D0²))` around the shifted centre `(H/2, W/2)`, or its
/// complement for the high-pass kind.
pub fn gaussian_filter(kind: FilterKind, d0: f64, h: usize, w: usize) -> Result<FilterMask> {
    if d0.is_nan() || d0 <= 0.0 {
        return Err(Error::Invalid(format!("filter cutoff must be positive, got {d0}")));
    }
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("filter extents {h}x{w} must be even")));
    }
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let mask = Tensor::from_fn(&[h, w], |i| {
        let (u, v) = ((i / w) as f64, (i % w) as f64);
        let d2 = (u - cy).powi(2) + (v - cx).powi(2);
        let low = (-d2 / (2.0 * d0 * d0)).exp();
        match kind {
            FilterKind::LowPass => low,
            FilterKind::HighPass => 1.0 - low,
        }
    });
    Ok(FilterMask { kind, d0, mask })
}

/// Spectral channel gate on `x[B, C, H, W]`.
///
/// Scores `z = GAP(|mask · fftshift(fft2(x))|)` per channel, then returns
/// `R = σ(z·W + b) ⊗ x` and `z`. `w` is `[C, C]`, `bias` is `[C]`.
pub fn freq_channel_gate(g: &mut Graph, x: Var, mask: &FilterMask, w: Var, bias: Var) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Invalid(format!("gate input must be [B, C, H, W], got {s:?}")));
    }
    if s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::Invalid(format!("gate input extents {}x{} must be even", s[2], s[3])));
    }
    let spec = g.fft2(x)?;
    let shifted = g.fftshift(spec)?;
    let filtered = g.mask_mul(shifted, &mask.mask)?;
    let mag = g.complex_abs(filtered, MAG_EPS)?;
    let flat = g.reshape(mag, &[s[0], s[1], s[2] * s[3]])?;
    let z = g.mean_axis(flat, 2)?;
    let logits = g.linear(z, w, Some(bias))?;
    let gate = g.sigmoid(logits);
    Ok((g.mul_channel(x, gate)?, z))
}

/// Concatenates `f` and `r` on channels and applies a 1×1 conv with bias
/// (`{name}.weight`, `{name}.bias`).
pub fn stage_reduce(g: &mut Graph, b: &mut Bound, name: &str, f: Var, r: Var) -> Result<Var> {
    if g.shape(f) != g.shape(r) {
        return Err(Error::Invalid(format!("stage_reduce: F {:?} vs R {:?}", g.shape(f), g.shape(r))));
    }
    let c = g.concat(&[f, r], 1)?;
    nn::conv(g, b, name, c, 1, 0)
}

/// Bin sizes actually used for a `h×w` input: each clamped to `min(h, w)`.
pub fn clamp_bins(bins: &[usize], h: usize, w: usize) -> Vec<usize> {
    bins.iter().map(|&n| n.min(h).min(w)).collect()
}

fn ppm_branch_width(c4: usize) -> usize {
    (c4 / 4).max(1)
}

/// Pyramid pooling: each bin branch pools, 1×1 conv-BN-ReLUs and upsamples
/// back; branches are concatenated with the input and reduced by a 1×1
/// conv-BN-ReLU.
pub fn ppm(g: &mut Graph, b: &mut Bound, name: &str, f4: Var, bins: &[usize]) -> Result<Var> {
    let s = g.shape(f4).to_vec();
    let (h, w) = (s[2], s[3]);
    let mut parts = vec![f4];
    for (i, &n) in clamp_bins(bins, h, w).iter().enumerate() {
        let pooled = g.adaptive_avg_pool2d(f4, n, n)?;
        let c = nn::conv_bn_relu(g, b, &format!("{name}.branch{}", i + 1), pooled, 1, 0)?;
        parts.push(g.bilinear_upsample(c, h, w)?);
    }
    let cat = g.concat(&parts, 1)?;
    nn::conv_bn_relu(g, b, &format!("{name}.out"), cat, 1, 0)
}

/// Per-pixel class log-probabilities `[B, classes, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct ProbMap {
    pub log_probs: Var,
}

/// Top-down fusion of `reduced` (coarsest first): each step upsamples the
/// running map 2×, matches the finer width with a 1×1 conv
/// (`{name}.lat{k}`) and adds. The result goes through the 1×1 class head
/// (`{name}.head`), bilinear upsampling to `out_size` and log-softmax.
pub fn fuse_and_predict(g: &mut Graph, b: &mut Bound, name: &str, reduced: &[Var], out_size: usize) -> Result<ProbMap> {
    let mut y = *reduced.first().ok_or_else(|| Error::Invalid("no decoder stages".into()))?;
    for (i, &finer) in reduced.iter().enumerate().skip(1) {
        let fs = g.shape(finer).to_vec();
        let up = g.bilinear_upsample(y, fs[2], fs[3])?;
        let lat = nn::conv(g, b, &format!("{name}.lat{}", reduced.len() - i), up, 1, 0)?;
        if g.shape(lat) != fs.as_slice() {
            return Err(Error::Invalid(format!(
                "fusion width mismatch: matched map {:?} vs finer stage {:?}",
                g.shape(lat),
                fs
            )));
        }
        y = g.add(lat, finer)?;
    }
    let logits = nn::conv(g, b, &format!("{name}.head"), y, 1, 0)?;
    let up = g.bilinear_upsample(logits, out_size, out_size)?;
    Ok(ProbMap { log_probs: g.log_softmax(up, 1)? })
}

/// Declares the parameters of one decoder named `name`.
pub fn decoder_specs(name: &str, cfg: &ModelConfig, pyramid: [usize; 4], widths: [usize; 3]) -> SpecList {
    let mut s = SpecList::new();
    for i in 0..3 {
        let c = pyramid[i];
        s.push(format!("{name}.gate{}.weight", i + 1), &[c, c], Init::Zeros);
        s.push(format!("{name}.gate{}.bias", i + 1), &[c], Init::Zeros);
        s.conv(&format!("{name}.reduce{}", i + 1), widths[i], 2 * c, 1, true);
        s.bn(&format!("{name}.reduce{}.bn", i + 1), widths[i]);
    }
    let c4 = pyramid[3];
    let bw = ppm_branch_width(c4);
    for i in 0..cfg.ppm_bins.len() {
        s.conv_bn(&format!("{name}.ppm.branch{}", i + 1), bw, c4, 1);
    }
    s.conv_bn(&format!("{name}.ppm.out"), widths[2], c4 + bw * cfg.ppm_bins.len(), 1);
    s.conv(&format!("{name}.lat3"), widths[2], widths[2], 1, true);
    s.conv(&format!("{name}.lat2"), widths[1], widths[2], 1, true);
    s.conv(&format!("{name}.lat1"), widths[0], widths[1], 1, true);
    s.conv(&format!("{name}.head"), cfg.classes, widths[0], 1, true);
    s
}

pub struct DecoderOutput {
    pub probs: ProbMap,
    /// Channel scores `[B, C_s]` of the three gates.
    pub scores: [Var; 3],
}

/// Stage kinds: high-pass on stages 1–2, low-pass on stage 3.
pub const STAGE_FILTERS: [FilterKind; 3] = [FilterKind::HighPass, FilterKind::HighPass, FilterKind::LowPass];

pub fn stage_mask(cfg: &ModelConfig, s: usize, h: usize, w: usize) -> Result<FilterMask> {
    let d0 = cfg.filter_d0.unwrap_or(h.min(w) as f64 / 4.0);
    gaussian_filter(STAGE_FILTERS[s], d0, h, w)
}

/// Full decoder over a four-stage pyramid.
pub fn decoder_forward(g: &mut Graph, b: &mut Bound, name: &str, cfg: &ModelConfig, stages: &[Var; 4]) -> Result<DecoderOutput> {
    let mut reduced = Vec::with_capacity(4);
    let mut scores = Vec::with_capacity(3);
    for (s, &f) in stages.iter().take(3).enumerate() {
        let shape = g.shape(f).to_vec();
        let mask = stage_mask(cfg, s, shape[2], shape[3])?;
        let w = b.p(g, &format!("{name}.gate{}.weight", s + 1))?;
        let bias = b.p(g, &format!("{name}.gate{}.bias", s + 1))?;
        let (r, z) = freq_channel_gate(g, f, &mask, w, bias)?;
        let red = stage_reduce(g, b, &format!("{name}.reduce{}", s + 1), f, r)?;
        let red = nn::batch_norm(g, b, &format!("{name}.reduce{}.bn", s + 1), red)?;
        reduced.push(g.relu(red));
        scores.push(z);
    }
    let top = ppm(g, b, &format!("{name}.ppm"), stages[3], &cfg.ppm_bins)?;
    let order = [top, reduced[2], reduced[1], reduced[0]];
    let probs = fuse_and_predict(g, b, name, &order, cfg.image_size)?;
    Ok(DecoderOutput { probs, scores: [scores[0], scores[1], scores[2]] })
}

/// Mask as CSV rows (one row per frequency row).
pub fn mask_csv(m: &FilterMask) -> String {
    let w = m.mask.shape()[1];
    m.mask.data().chunks(w).map(|r| r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",") + "\n").collect()
}

/// Channel scores `[B, C]` as CSV rows (one row per sample).
pub fn scores_csv(z: &Tensor) -> String {
    let c = z.shape()[z.rank() - 1];
    z.data().chunks(c).map(|r| r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",") + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::nn::ParamStore;
    use crate::tensor::fft;
    use crate::tensor::gradcheck::grad_check_args;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn filter_centre_and_cutoff() {
        let lp = gaussian_filter(FilterKind::LowPass, 2.0, 8, 8).unwrap();
        let hp = gaussian_filter(FilterKind::HighPass, 2.0, 8, 8).unwrap();
        assert_eq!(lp.mask.at(&[4, 4]), 1.0);
        assert_eq!(hp.mask.at(&[4, 4]), 0.0);
        assert!((lp.mask.at(&[4, 6]) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((lp.mask.at(&[4, 6]) - 0.60653).abs() < 1e-5);
        assert!(gaussian_filter(FilterKind::LowPass, 0.0, 8, 8).is_err());
        assert!(gaussian_filter(FilterKind::LowPass, 1.0, 7, 8).is_err());
    }

    #[test]
    fn zero_gate_halves_input() {
        let x = rand_tensor(&[2, 3, 4, 4], 1);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let w = g.input(Tensor::zeros(&[3, 3]));
        let b = g.input(Tensor::zeros(&[3]));
        let m = gaussian_filter(FilterKind::HighPass, 1.0, 4, 4).unwrap();
        let (r, _) = freq_channel_gate(&mut g, xv, &m, w, b).unwrap();
        for (o, i) in g.data(r).iter().zip(x.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn constant_channels_have_no_high_frequency_energy() {
        let x = Tensor::from_fn(&[1, 2, 8, 8], |i| if i < 64 { 3.0 } else { -1.5 });
        let mut g = Graph::new();
        let xv = g.input(x);
        let w = g.input(Tensor::zeros(&[2, 2]));
        let b = g.input(Tensor::zeros(&[2]));
        let m = gaussian_filter(FilterKind::HighPass, 2.0, 8, 8).unwrap();
        let (_, z) = freq_channel_gate(&mut g, xv, &m, w, b).unwrap();
        assert!(g.data(z).iter().all(|v| v.abs() < 1e-6), "{:?}", g.data(z));
    }

    #[test]
    fn gate_matches_stepwise_oracle() {
        let (c, n) = (2, 8);
        let x = rand_tensor(&[1, c, n, n], 2);
        let wt = rand_tensor(&[c, c], 3);
        let bt = rand_tensor(&[c], 4);
        let m = gaussian_filter(FilterKind::LowPass, 2.0, n, n).unwrap();
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(wt.clone()), g.input(bt.clone()));
        let (r, z) = freq_channel_gate(&mut g, xv, &m, wv, bv).unwrap();

        let mut zs = vec![0.0; c];
        for ch in 0..c {
            let plane = &x.data()[ch * n * n..(ch + 1) * n * n];
            let mut mags = 0.0;
            for u in 0..n {
                for v in 0..n {
                    let (mut re, mut im) = (0.0, 0.0);
                    // Bin (u, v) of the shifted spectrum holds frequency (u+n/2, v+n/2) mod n.
                    let (fu, fv) = ((u + n / 2) % n, (v + n / 2) % n);
                    for y in 0..n {
                        for xx in 0..n {
                            let a = -2.0 * std::f64::consts::PI * ((fu * y + fv * xx) as f64) / n as f64;
                            re += plane[y * n + xx] * a.cos();
                            im += plane[y * n + xx] * a.sin();
                        }
                    }
                    let k = m.mask.at(&[u, v]);
                    mags += ((k * re).powi(2) + (k * im).powi(2) + MAG_EPS).sqrt();
                }
            }
            zs[ch] = mags / (n * n) as f64;
        }
        for ch in 0..c {
            assert!((g.data(z)[ch] - zs[ch]).abs() < 1e-9);
            let logit: f64 = (0..c).map(|i| zs[i] * wt.at(&[i, ch])).sum::<f64>() + bt.data()[ch];
            let s = 1.0 / (1.0 + (-logit).exp());
            for i in 0..n * n {
                let idx = ch * n * n + i;
                assert!((g.data(r)[idx] - s * x.data()[idx]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn all_pass_mask_scores_full_spectrum() {
        let x = rand_tensor(&[1, 2, 4, 4], 5);
        let ones = FilterMask { kind: FilterKind::LowPass, d0: 1.0, mask: Tensor::ones(&[4, 4]) };
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let w = g.input(Tensor::zeros(&[2, 2]));
        let b = g.input(Tensor::zeros(&[2]));
        let (_, z) = freq_channel_gate(&mut g, xv, &ones, w, b).unwrap();
        let s = fft::fft2(&x).unwrap();
        for ch in 0..2 {
            let mean: f64 = (0..16).map(|i| (s.re()[ch * 16 + i].powi(2) + s.im()[ch * 16 + i].powi(2) + MAG_EPS).sqrt()).sum::<f64>() / 16.0;
            assert!((g.data(z)[ch] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_gradient_check() {
        let args = [rand_tensor(&[1, 2, 4, 4], 6), rand_tensor(&[2, 2], 7), rand_tensor(&[2], 8)];
        let r = rand_tensor(&[1, 2, 4, 4], 9);
        let m = gaussian_filter(FilterKind::HighPass, 1.0, 4, 4).unwrap();
        let err = grad_check_args::<_, Error>(
            |g, v| {
                let (out, _) = freq_channel_gate(g, v[0], &m, v[1], v[2])?;
                let rv = g.input(r.clone());
                let p = g.mul(out, rv)?;
                Ok(g.sum(p))
            },
            &args,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    fn store_with(specs: &SpecList) -> ParamStore {
        ParamStore::init(specs, 10)
    }

    #[test]
    fn stage_reduce_selector_kernel() {
        let mut specs = SpecList::new();
        specs.conv("r", 2, 4, 1, true);
        let mut store = store_with(&specs);
        let sel = store.get_mut("r.weight").unwrap();
        sel.data_mut().iter_mut().for_each(|v| *v = 0.0);
        // Output 0 picks F channel 1, output 1 picks R channel 0.
        sel.data_mut()[1] = 1.0;
        sel.data_mut()[4 + 2] = 1.0;
        let f = rand_tensor(&[1, 2, 3, 3], 11);
        let r = rand_tensor(&[1, 2, 3, 3], 12);
        let mut g = Graph::new();
        let mut b = Bound::new(&store, false);
        let (fv, rv) = (g.input(f.clone()), g.input(r.clone()));
        let y = stage_reduce(&mut g, &mut b, "r", fv, rv).unwrap();
        assert_eq!(&g.data(y)[..9], &f.data()[9..]);
        assert_eq!(&g.data(y)[9..], &r.data()[..9]);
        let bad = g.input(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(stage_reduce(&mut g, &mut b, "r", fv, bad).is_err());
    }

    fn ppm_specs(c4: usize, out: usize, nb: usize) -> SpecList {
        let mut s = SpecList::new();
        let bw = ppm_branch_width(c4);
        for i in 0..nb {
            s.conv_bn(&format!("p.branch{}", i + 1), bw, c4, 1);
        }
        s.conv_bn("p.out", out, c4 + bw * nb, 1);
        s
    }

    #[test]
    fn ppm_constant_input_gives_constant_output() {
        let store = store_with(&ppm_specs(8, 4, 4));
        let mut g = Graph::new();
        let mut b = Bound::new(&store, false);
        let x = g.input(Tensor::from_fn(&[1, 8, 6, 6], |i| (i / 36) as f64 * 0.3 - 1.0));
        let y = ppm(&mut g, &mut b, "p", x, &[1, 2, 3, 6]).unwrap();
        for plane in g.data(y).chunks(36) {
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
        assert_eq!(clamp_bins(&[1, 2, 3, 6], 2, 2), vec![1, 2, 2, 2]);
    }

    #[test]
    fn ppm_matches_per_branch_oracle() {
        let store = store_with(&ppm_specs(4, 3, 2));
        let x = rand_tensor(&[1, 4, 4, 4], 13);
        let mut g = Graph::new();
        let mut b = Bound::new(&store, false);
        let xv = g.input(x.clone());
        let y = ppm(&mut g, &mut b, "p", xv, &[1, 2]).unwrap();

        let mut o = Graph::new();
        let mut ob = Bound::new(&store, false);
        let xo = o.input(x.clone());
        let p1 = o.adaptive_avg_pool2d(xo, 1, 1).unwrap();
        // Bin-1 pooling is the channel mean.
        for c in 0..4 {
            let mean = x.data()[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
            assert!((o.data(p1)[c] - mean).abs() < 1e-15);
        }
        let b1 = nn::conv_bn_relu(&mut o, &mut ob, "p.branch1", p1, 1, 0).unwrap();
        let u1 = o.bilinear_upsample(b1, 4, 4).unwrap();
        let p2 = o.adaptive_avg_pool2d(xo, 2, 2).unwrap();
        let b2 = nn::conv_bn_relu(&mut o, &mut ob, "p.branch2", p2, 1, 0).unwrap();
        let u2 = o.bilinear_upsample(b2, 4, 4).unwrap();
        let cat = o.concat(&[xo, u1, u2], 1).unwrap();
        let want = nn::conv_bn_relu(&mut o, &mut ob, "p.out", cat, 1, 0).unwrap();
        assert_eq!(g.data(y), o.data(want));
    }

    #[test]
    fn head_only_pathway_and_forced_logits() {
        let mut specs = SpecList::new();
        specs.conv("d.head", 3, 2, 1, true);
        let mut store = store_with(&specs);
        let head_b = store.get_mut("d.head.bias").unwrap();
        head_b.data_mut().copy_from_slice(&[0.0, 50.0, 0.0]);
        store.get_mut("d.head.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let mut b = Bound::new(&store, false);
        let x = g.input(rand_tensor(&[2, 2, 4, 4], 14));
        let p = fuse_and_predict(&mut g, &mut b, "d", &[x], 8).unwrap();
        assert_eq!(g.shape(p.log_probs), &[2, 3, 8, 8]);
        let probs = g.value(p.log_probs).data().iter().map(|v| v.exp()).collect::<Vec<_>>();
        let t = Tensor::new(&[2, 3, 8, 8], probs).unwrap();
        let (_, labels) = t.argmax(1).unwrap();
        assert!(labels.iter().all(|&l| l == 1));
        for s in 0..2 {
            for i in 0..64 {
                let sum: f64 = (0..3).map(|c| t.data()[(s * 3 + c) * 64 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fusion_rejects_width_mismatch() {
        let mut specs = SpecList::new();
        specs.conv("d.lat1", 5, 4, 1, true);
        specs.conv("d.head", 2, 3, 1, true);
        let store = store_with(&specs);
        let mut g = Graph::new();
        let mut b = Bound::new(&store, false);
        let coarse = g.input(Tensor::zeros(&[1, 4, 2, 2]));
        let fine = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(fuse_and_predict(&mut g, &mut b, "d", &[coarse, fine], 8).unwrap_err().to_string().contains("width"));
    }

    #[test]
    fn full_decoder_shapes_and_gates() {
        let cfg = ModelConfig::preset(Preset::Desk, 4);
        let specs = decoder_specs("dec", &cfg, cfg.cnn_channels(), cfg.dec_cnn);
        let store = store_with(&specs);
        let mut g = Graph::new();
        let mut b = Bound::new(&store, true);
        let stages = [0, 1, 2, 3].map(|s| {
            let n = cfg.stage_extent(s);
            g.input(rand_tensor(&[2, cfg.cnn_channels()[s], n, n], 20 + s as u64))
        });
        let out = decoder_forward(&mut g, &mut b, "dec", &cfg, &stages).unwrap();
        assert_eq!(g.shape(out.probs.log_probs), &[2, 4, 64, 64]);
        assert_eq!(store.accesses("dec"), specs.params.len() as u64);
        assert_eq!(g.shape(out.scores[2]), &[2, 64]);
    }
}
