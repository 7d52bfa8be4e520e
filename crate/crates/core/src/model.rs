//! The three encoder/decoder views wired together.
//!
//! Decoder parameters sit under their encoder's prefix (`cnn.dec`,
//! `vit.dec`, `hyb.dec`), so a prefix covers a whole view.

use crate::config::ModelConfig;
use crate::decoder::{self, DecoderOutput, ProbMap};
use crate::encoders::{self, CNN, HYB, VIT};
use crate::nn::{Bound, SpecList};
use crate::{Graph, Result, Var};

pub const VIEWS: [&str; 3] = [CNN, VIT, HYB];

pub fn decoder_name(view: &str) -> String {
    format!("{view}.dec")
}

/// Every trainable tensor of the triple-view model.
pub fn model_specs(cfg: &ModelConfig) -> SpecList {
    let mut s = SpecList::new();
    s.extend(encoders::convnet_specs(cfg));
    s.extend(encoders::vit_specs(cfg));
    s.extend(encoders::hybrid_specs(cfg));
    s.extend(encoders::project_specs(cfg));
    s.extend(decoder::decoder_specs(&decoder_name(CNN), cfg, cfg.cnn_channels(), cfg.dec_cnn));
    s.extend(decoder::decoder_specs(&decoder_name(VIT), cfg, cfg.vit_pyramid, cfg.dec_vit));
    s.extend(decoder::decoder_specs(&decoder_name(HYB), cfg, cfg.hyb_channels, cfg.dec_hyb));
    s
}

/// Everything a training step needs from one forward pass.
pub struct TriOutput {
    /// Log-probabilities of the cnn, vit and hybrid views.
    pub probs: [ProbMap; 3],
    pub f1_cnn: Var,
    /// Hybrid stage-1 feature projected to the ConvNet stage-1 width.
    pub f1_proj: Var,
    pub att_vit: Var,
    pub att_hyb: Var,
}

pub fn forward_all(g: &mut Graph, b: &mut Bound, cfg: &ModelConfig, x: Var) -> Result<TriOutput> {
    let cnn = encoders::convnet_forward(g, b, cfg, x)?;
    let vit = encoders::vit_forward(g, b, cfg, x)?;
    let hyb = encoders::hybrid_forward(g, b, cfg, x)?;
    let d_cnn = decoder::decoder_forward(g, b, &decoder_name(CNN), cfg, &cnn.stages)?;
    let d_vit = decoder::decoder_forward(g, b, &decoder_name(VIT), cfg, &vit.pyramid.stages)?;
    let d_hyb = decoder::decoder_forward(g, b, &decoder_name(HYB), cfg, &hyb.pyramid.stages)?;
    let cnn_shape = g.shape(cnn.stages[0]).to_vec();
    let f1_proj = encoders::project_lowlevel(g, b, hyb.pyramid.stages[0], &cnn_shape)?;
    Ok(TriOutput {
        probs: [d_cnn.probs, d_vit.probs, d_hyb.probs],
        f1_cnn: cnn.stages[0],
        f1_proj,
        att_vit: vit.attention,
        att_hyb: hyb.attention,
    })
}

/// Inference path: hybrid encoder and its decoder only.
pub fn forward_hybrid(g: &mut Graph, b: &mut Bound, cfg: &ModelConfig, x: Var) -> Result<DecoderOutput> {
    let hyb = encoders::hybrid_forward(g, b, cfg, x)?;
    decoder::decoder_forward(g, b, &decoder_name(HYB), cfg, &hyb.pyramid.stages)
}
