//! Model architecture presets.

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 64×64 inputs, trainable in minutes on one core.
    Desk,
    /// Full-size shapes, used only for shape and parameter accounting.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config {
                key: "preset".into(),
                detail: format!("expected desk or paper, got `{s}`"),
            }),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub classes: usize,
    /// Stage-1 width of the convolutional encoder; later stages double it.
    pub cnn_c1: usize,
    pub vit_patch: usize,
    pub vit_dim: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    pub vit_mlp_ratio: usize,
    /// Channels of the transformer encoder's four-level neck output.
    pub vit_pyramid: [usize; 4],
    pub hyb_channels: [usize; 4],
    /// Transformer blocks in hybrid stages 2–4.
    pub hyb_depths: [usize; 3],
    pub hyb_head_dim: usize,
    pub hyb_mlp_ratio: usize,
    /// Reduced widths of decoder stages 1–3.
    pub dec_cnn: [usize; 3],
    pub dec_vit: [usize; 3],
    pub dec_hyb: [usize; 3],
    pub ppm_bins: Vec<usize>,
    /// Gaussian cutoff in frequency bins; `None` uses `min(H, W) / 4` of
    /// each gated map.
    pub filter_d0: Option<f64>,
}

impl ModelConfig {
    pub fn preset(p: Preset, classes: usize) -> Self {
        match p {
            Preset::Desk => ModelConfig {
                image_size: 64,
                in_channels: 3,
                classes,
                cnn_c1: 16,
                vit_patch: 8,
                vit_dim: 64,
                vit_layers: 4,
                vit_heads: 4,
                vit_mlp_ratio: 2,
                vit_pyramid: [16, 32, 64, 128],
                hyb_channels: [16, 32, 64, 128],
                hyb_depths: [1, 1, 1],
                hyb_head_dim: 32,
                hyb_mlp_ratio: 2,
                dec_cnn: [16, 32, 32],
                dec_vit: [12, 24, 48],
                dec_hyb: [12, 24, 48],
                ppm_bins: vec![1, 2, 3, 6],
                filter_d0: None,
            },
            Preset::Paper => ModelConfig {
                image_size: 512,
                in_channels: 3,
                classes,
                cnn_c1: 256,
                vit_patch: 16,
                vit_dim: 768,
                vit_layers: 12,
                vit_heads: 12,
                vit_mlp_ratio: 4,
                vit_pyramid: [96, 192, 384, 768],
                hyb_channels: [64, 128, 256, 448],
                hyb_depths: [2, 6, 2],
                hyb_head_dim: 32,
                hyb_mlp_ratio: 4,
                dec_cnn: [128, 256, 256],
                dec_vit: [48, 96, 192],
                dec_hyb: [48, 96, 192],
                ppm_bins: vec![1, 2, 3, 6],
                filter_d0: None,
            },
        }
    }

    pub fn cnn_channels(&self) -> [usize; 4] {
        [self.cnn_c1, 2 * self.cnn_c1, 4 * self.cnn_c1, 8 * self.cnn_c1]
    }

    /// Spatial extent of stage `s` (0-based): `H / 2^(s+2)`.
    pub fn stage_extent(&self, s: usize) -> usize {
        self.image_size >> (s + 2)
    }

    pub fn vit_grid(&self) -> usize {
        self.image_size / self.vit_patch
    }

    pub fn vit_tokens(&self) -> usize {
        self.vit_grid() * self.vit_grid()
    }

    /// 1-based layer indices tapped for the pyramid: quarter points of
    /// the stack.
    pub fn vit_taps(&self) -> [usize; 4] {
        [1, 2, 3, 4].map(|q| q * self.vit_layers / 4)
    }

    /// Heads of hybrid transformer stage `s` (1..=3 for stages 2–4).
    pub fn hyb_heads(&self, s: usize) -> usize {
        (self.hyb_channels[s] / self.hyb_head_dim).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Err(Error::Config { key: key.into(), detail });
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad("image_size", format!("{} is not divisible by 32", self.image_size));
        }
        if self.classes < 2 {
            return bad("classes", format!("need at least 2 classes, got {}", self.classes));
        }
        if self.vit_patch == 0 || self.image_size % self.vit_patch != 0 {
            return bad("vit_patch", format!("{} does not divide image size {}", self.vit_patch, self.image_size));
        }
        if self.vit_heads == 0 || self.vit_dim % self.vit_heads != 0 {
            return bad("vit_heads", format!("{} heads do not divide width {}", self.vit_heads, self.vit_dim));
        }
        if self.vit_layers < 4 {
            return bad("vit_layers", format!("need at least 4 layers for four taps, got {}", self.vit_layers));
        }
        for s in 1..4 {
            if self.hyb_channels[s] % self.hyb_heads(s) != 0 {
                return bad("hyb_channels", format!("stage {} width {} not divisible into heads", s + 1, self.hyb_channels[s]));
            }
        }
        if let Some(d0) = self.filter_d0 {
            if d0.is_nan() || d0 <= 0.0 {
                return bad("filter_d0", format!("cutoff must be positive, got {d0}"));
            }
        }
        if self.ppm_bins.is_empty() || self.ppm_bins.contains(&0) {
            return bad("ppm_bins", "bins must be positive".into());
        }
        Ok(())
    }
}
