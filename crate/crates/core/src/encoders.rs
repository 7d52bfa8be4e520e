//! The three encoders: residual ConvNet, plain ViT with a pyramid neck, and
//! the hybrid (convolutional stage 1, transformer stages 2–4).
//!
//! Parameter names are prefixed `cnn.`, `vit.` and `hyb.`; the low-level
//! projection used by the spatial distillation loss lives under `kd.`.

use crate::config::ModelConfig;
use crate::nn::{self, Bound, Init, SpecList};
use crate::{Error, Graph, Result, Var};

pub const CNN: &str = "cnn";
pub const VIT: &str = "vit";
pub const HYB: &str = "hyb";
pub const PROJ: &str = "kd.proj";

/// Four stage feature maps `[B, C_s, H_s, W_s]`, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: [Var; 4],
}

impl FeaturePyramid {
    /// Checks the `(H_s, W_s, C_s)` schedule of every stage.
    pub fn check(&self, g: &Graph, schedule: &[(usize, usize, usize); 4]) -> Result<()> {
        for (s, (&v, &(h, w, c))) in self.stages.iter().zip(schedule).enumerate() {
            let shape = g.shape(v);
            if shape.len() != 4 || shape[1..] != [c, h, w] {
                return Err(Error::Invalid(format!(
                    "stage {} has shape {:?}, schedule wants (C, H, W) = ({c}, {h}, {w})",
                    s + 1,
                    shape
                )));
            }
        }
        Ok(())
    }
}

pub fn schedule(cfg: &ModelConfig, channels: [usize; 4]) -> [(usize, usize, usize); 4] {
    [0, 1, 2, 3].map(|s| (cfg.stage_extent(s), cfg.stage_extent(s), channels[s]))
}

fn check_input(g: &Graph, cfg: &ModelConfig, x: Var) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(Error::Invalid(format!("encoder input must be [B, {}, H, W], got {s:?}", cfg.in_channels)));
    }
    if s[2] % 32 != 0 || s[3] % 32 != 0 {
        return Err(Error::Invalid(format!("input extents {}x{} are not divisible by 32", s[2], s[3])));
    }
    if s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::Invalid(format!("input {}x{} does not match the configured size {}", s[2], s[3], cfg.image_size)));
    }
    Ok(s[0])
}

fn res_block_specs(s: &mut SpecList, name: &str, cin: usize, cout: usize) {
    s.conv_bn(&format!("{name}.c1"), cout, cin, 3);
    s.conv_bn(&format!("{name}.c2"), cout, cout, 3);
    if cin != cout {
        s.conv_bn(&format!("{name}.down"), cout, cin, 1);
    }
}

/// Two 3×3 conv-BN layers plus a shortcut (1×1 conv-BN when the shape
/// changes), followed by ReLU.
fn res_block(g: &mut Graph, b: &mut Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let h = nn::conv_bn_relu(g, b, &format!("{name}.c1"), x, stride, 1)?;
    let h = nn::conv_bn(g, b, &format!("{name}.c2"), h, 1, 1)?;
    let down = format!("{name}.down");
    let sc = if b.has(&format!("{down}.conv.weight")) { nn::conv_bn(g, b, &down, x, stride, 0)? } else { x };
    let y = g.add(h, sc)?;
    Ok(g.relu(y))
}

pub fn convnet_specs(cfg: &ModelConfig) -> SpecList {
    let mut s = SpecList::new();
    let ch = cfg.cnn_channels();
    s.conv_bn("cnn.stem", ch[0], cfg.in_channels, 3);
    res_block_specs(&mut s, "cnn.stage1", ch[0], ch[0]);
    for i in 1..4 {
        res_block_specs(&mut s, &format!("cnn.stage{}", i + 1), ch[i - 1], ch[i]);
    }
    s
}

/// Stem (3×3 stride-2 conv, 2×2 max pool) to `H/4`, then one residual block
/// per stage, stages 2–4 downsampling by 2 and doubling channels.
pub fn convnet_forward(g: &mut Graph, b: &mut Bound, cfg: &ModelConfig, x: Var) -> Result<FeaturePyramid> {
    check_input(g, cfg, x)?;
    let h = nn::conv_bn_relu(g, b, "cnn.stem", x, 2, 1)?;
    let h = g.max_pool2d(h, 2, 2)?;
    let s1 = res_block(g, b, "cnn.stage1", h, 1)?;
    let s2 = res_block(g, b, "cnn.stage2", s1, 2)?;
    let s3 = res_block(g, b, "cnn.stage3", s2, 2)?;
    let s4 = res_block(g, b, "cnn.stage4", s3, 2)?;
    Ok(FeaturePyramid { stages: [s1, s2, s3, s4] })
}

pub fn vit_specs(cfg: &ModelConfig) -> SpecList {
    let mut s = SpecList::new();
    let d = cfg.vit_dim;
    s.linear("vit.patch", cfg.in_channels * cfg.vit_patch * cfg.vit_patch, d);
    s.push("vit.pos", &[cfg.vit_tokens(), d], Init::Uniform(0.02));
    for l in 0..cfg.vit_layers {
        nn::block_specs(&mut s, &format!("vit.layer{}", l + 1), d, cfg.vit_mlp_ratio);
    }
    for (i, &c) in cfg.vit_pyramid.iter().enumerate() {
        s.conv(&format!("vit.neck{}", i + 1), c, d, 1, true);
    }
    s
}

pub struct VitOutput {
    /// Tokens `[B, N, C]` after each layer.
    pub layers: Vec<Var>,
    pub pyramid: FeaturePyramid,
    /// Head-averaged attention map of the last layer, `[B, N, N]`.
    pub attention: Var,
}

/// Splits `[B, C, H, W]` into non-overlapping `P×P` patches, giving
/// `[B, (H/P)·(W/P), C·P·P]`.
pub fn patchify(g: &mut Graph, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::Invalid(format!("patch size {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let r = g.reshape(x, &[b, c, gh, p, gw, p])?;
    let t = g.permute(r, &[0, 2, 4, 1, 3, 5])?;
    Ok(g.reshape(t, &[b, gh * gw, c * p * p])?)
}

fn resample(g: &mut Graph, x: Var, target: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let n = s[s.len() - 1];
    Ok(if target > n {
        g.bilinear_upsample(x, target, target)?
    } else if target < n {
        g.adaptive_avg_pool2d(x, target, target)?
    } else {
        x
    })
}

/// Patch embedding plus learned positions, pre-norm transformer layers,
/// and a neck turning the quarter-point taps into a four-level pyramid.
pub fn vit_forward(g: &mut Graph, b: &mut Bound, cfg: &ModelConfig, x: Var) -> Result<VitOutput> {
    check_input(g, cfg, x)?;
    let patches = patchify(g, x, cfg.vit_patch)?;
    if g.shape(patches)[1] != cfg.vit_tokens() {
        return Err(Error::Invalid(format!("{} tokens, position table holds {}", g.shape(patches)[1], cfg.vit_tokens())));
    }
    let e = nn::linear(g, b, "vit.patch", patches)?;
    let pos = b.p(g, "vit.pos")?;
    let mut t = g.add_trailing(e, pos)?;
    let mut layers = Vec::with_capacity(cfg.vit_layers);
    let mut attention = None;
    for l in 0..cfg.vit_layers {
        let (nt, a) = nn::transformer_block(g, b, &format!("vit.layer{}", l + 1), t, cfg.vit_heads)?;
        t = nt;
        layers.push(t);
        attention = Some(a);
    }
    let grid = cfg.vit_grid();
    let taps = cfg.vit_taps();
    let mut stages = Vec::with_capacity(4);
    for (s, &tap) in taps.iter().enumerate() {
        let m = nn::tokens_to_map(g, layers[tap - 1], grid, grid)?;
        let c = nn::conv(g, b, &format!("vit.neck{}", s + 1), m, 1, 0)?;
        stages.push(resample(g, c, cfg.stage_extent(s))?);
    }
    Ok(VitOutput {
        layers,
        pyramid: FeaturePyramid { stages: [stages[0], stages[1], stages[2], stages[3]] },
        attention: attention.expect("at least one layer"),
    })
}

pub fn hybrid_specs(cfg: &ModelConfig) -> SpecList {
    let mut s = SpecList::new();
    let ch = cfg.hyb_channels;
    s.conv_bn("hyb.stem1", ch[0], cfg.in_channels, 3);
    s.conv_bn("hyb.stem2", ch[0], ch[0], 3);
    res_block_specs(&mut s, "hyb.stage1", ch[0], ch[0]);
    for k in 1..4 {
        let name = format!("hyb.stage{}", k + 1);
        s.conv_bn(&format!("{name}.down"), ch[k], ch[k - 1], 3);
        let l = cfg.stage_extent(k) * cfg.stage_extent(k);
        s.push(format!("{name}.pos"), &[l, ch[k]], Init::Uniform(0.02));
        for d in 0..cfg.hyb_depths[k - 1] {
            nn::block_specs(&mut s, &format!("{name}.block{}", d + 1), ch[k], cfg.hyb_mlp_ratio);
        }
    }
    s
}

pub struct HybridOutput {
    pub pyramid: FeaturePyramid,
    /// Stage token sequences `[B, L_k, C_k]` for stages 2–4.
    pub tokens: [Var; 3],
    /// Head-averaged attention of the last stage-4 block, `[B, L_4, L_4]`.
    pub attention: Var,
}

/// Convolutional stage 1 at `H/4`; stages 2–4 each downsample with a
/// stride-2 conv and run transformer blocks over the flattened tokens.
pub fn hybrid_forward(g: &mut Graph, b: &mut Bound, cfg: &ModelConfig, x: Var) -> Result<HybridOutput> {
    check_input(g, cfg, x)?;
    let h = nn::conv_bn_relu(g, b, "hyb.stem1", x, 2, 1)?;
    let h = nn::conv_bn_relu(g, b, "hyb.stem2", h, 2, 1)?;
    let s1 = res_block(g, b, "hyb.stage1", h, 1)?;
    let mut stages = vec![s1];
    let mut tokens = Vec::with_capacity(3);
    let mut attention = None;
    let mut prev = s1;
    for k in 1..4 {
        let name = format!("hyb.stage{}", k + 1);
        let d = nn::conv_bn(g, b, &format!("{name}.down"), prev, 2, 1)?;
        let n = cfg.stage_extent(k);
        let t = nn::map_to_tokens(g, d)?;
        let pos = b.p(g, &format!("{name}.pos"))?;
        let mut t = g.add_trailing(t, pos)?;
        for blk in 0..cfg.hyb_depths[k - 1] {
            let (nt, a) = nn::transformer_block(g, b, &format!("{name}.block{}", blk + 1), t, cfg.hyb_heads(k))?;
            t = nt;
            attention = Some(a);
        }
        tokens.push(t);
        prev = nn::tokens_to_map(g, t, n, n)?;
        stages.push(prev);
    }
    Ok(HybridOutput {
        pyramid: FeaturePyramid { stages: [stages[0], stages[1], stages[2], stages[3]] },
        tokens: [tokens[0], tokens[1], tokens[2]],
        attention: attention.ok_or_else(|| Error::Invalid("hybrid stage 4 has no transformer blocks".into()))?,
    })
}

pub fn project_specs(cfg: &ModelConfig) -> SpecList {
    let mut s = SpecList::new();
    s.conv(&format!("{PROJ}.conv"), cfg.cnn_c1, cfg.hyb_channels[0], 1, true);
    s.bn(&format!("{PROJ}.bn"), cfg.cnn_c1);
    s
}

/// `ReLU(BN(Conv1×1(F1_hyb)))`, mapping the hybrid stage-1 feature to the
/// ConvNet stage-1 width. `cnn_shape` is the ConvNet stage-1 shape it must
/// match spatially.
pub fn project_lowlevel(g: &mut Graph, b: &mut Bound, f1_hyb: Var, cnn_shape: &[usize]) -> Result<Var> {
    let hs = g.shape(f1_hyb);
    if hs.len() != 4 || cnn_shape.len() != 4 || hs[2..] != cnn_shape[2..] {
        return Err(Error::Invalid(format!("hybrid stage-1 {hs:?} does not match ConvNet stage-1 {cnn_shape:?} spatially")));
    }
    let y = nn::conv(g, b, &format!("{PROJ}.conv"), f1_hyb, 1, 0)?;
    let y = nn::batch_norm(g, b, &format!("{PROJ}.bn"), y)?;
    Ok(g.relu(y))
}

/// Parameter scalars of each encoder: `(conv, vit, hybrid)`.
pub fn param_counts(cfg: &ModelConfig) -> (usize, usize, usize) {
    (
        convnet_specs(cfg).count(""),
        vit_specs(cfg).count(""),
        hybrid_specs(cfg).count(""),
    )
}
