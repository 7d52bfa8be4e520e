//! Training objectives: segmentation cross-entropy, tri-view cross pseudo
//! supervision, spatial and attention distillation, and their weighted sum.

use crate::decoder::ProbMap;
use crate::tensor::IGNORE_INDEX;
use crate::{Error, Graph, Result, Var};

/// Clamp inside the KL logarithms.
pub const KL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Semi,
    /// Labeled data only; the CPS term is dropped.
    Supervised,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi" => Ok(Mode::Semi),
            "supervised" => Ok(Mode::Supervised),
            _ => Err(Error::Config {
                key: "mode".into(),
                detail: format!("expected semi or supervised, got `{s}`"),
            }),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Semi => "semi",
            Mode::Supervised => "supervised",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Spatial distillation.
    pub spa: f64,
    /// Attention distillation.
    pub att: f64,
    /// Cross pseudo supervision.
    pub cps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { spa: 0.5, att: 0.5, cps: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("lambda1", self.spa), ("lambda2", self.att), ("lambda", self.cps)] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config { key: key.into(), detail: format!("weight must be non-negative, got {v}") });
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// cnn, vit, hybrid.
    pub seg: [f64; 3],
    pub cps: [f64; 3],
    pub spa: f64,
    pub att: f64,
    pub total: f64,
}

impl LossReport {
    pub fn seg_sum(&self) -> f64 {
        self.seg.iter().sum()
    }

    pub fn cps_sum(&self) -> f64 {
        self.cps.iter().sum()
    }
}

/// Mean negative log-likelihood of the ground-truth class over labeled
/// pixels; [`IGNORE_INDEX`] pixels are skipped.
pub fn seg_ce(g: &mut Graph, pred: ProbMap, labels: &[usize]) -> Result<Var> {
    Ok(g.nll(pred.log_probs, labels)?)
}

/// Hard pseudo-labels (lowest index on ties) from a prediction's values.
pub fn pseudo_labels(g: &Graph, pred: ProbMap) -> Result<Vec<usize>> {
    Ok(g.value(pred.log_probs).argmax(1)?.1)
}

/// Cross pseudo supervision for three views on the same unlabeled batch.
///
/// Each view is supervised by the argmax labels of the other two; the
/// labels are plain integers, so no gradient reaches the supervisors.
pub fn cps_losses(g: &mut Graph, preds: [ProbMap; 3]) -> Result<[Var; 3]> {
    let shape = g.shape(preds[0].log_probs).to_vec();
    for p in &preds[1..] {
        if g.shape(p.log_probs) != shape.as_slice() {
            return Err(Error::Invalid(format!("cps: prediction shapes {:?} vs {:?}", g.shape(p.log_probs), shape)));
        }
    }
    let labels = [pseudo_labels(g, preds[0])?, pseudo_labels(g, preds[1])?, pseudo_labels(g, preds[2])?];
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let a = g.nll(preds[i].log_probs, &labels[j])?;
        let b = g.nll(preds[i].log_probs, &labels[k])?;
        out.push(g.add(a, b)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Mean squared difference between two same-shape feature maps.
pub fn spatial_loss(g: &mut Graph, f_cnn: Var, f_proj: Var) -> Result<Var> {
    if g.shape(f_cnn) != g.shape(f_proj) {
        return Err(Error::Invalid(format!("spatial loss: {:?} vs {:?}", g.shape(f_cnn), g.shape(f_proj))));
    }
    let d = g.sub(f_cnn, f_proj)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

fn check_row_stochastic(g: &Graph, a: Var, what: &str) -> Result<()> {
    let s = g.shape(a);
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Invalid(format!("{what} attention must be [B, N, N], got {s:?}")));
    }
    let n = s[2];
    for row in g.data(a).chunks(n) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < -1e-12) {
            return Err(Error::Invalid(format!("{what} attention rows are not stochastic (row sum {sum})")));
        }
    }
    Ok(())
}

/// Attention distillation: the hybrid map is bilinearly upsampled to the
/// ViT's `N×N` (unless already that size), each row renormalized, and
/// `KL(A_vit ‖ ·) / N²` averaged over the batch.
pub fn attention_loss(g: &mut Graph, a_vit: Var, a_hyb: Var) -> Result<Var> {
    check_row_stochastic(g, a_vit, "ViT")?;
    check_row_stochastic(g, a_hyb, "hybrid")?;
    let (b, n) = (g.shape(a_vit)[0], g.shape(a_vit)[1]);
    let (bh, l) = (g.shape(a_hyb)[0], g.shape(a_hyb)[1]);
    if bh != b || l > n {
        return Err(Error::Invalid(format!("attention loss: hybrid map {bh}x{l}x{l} vs ViT map {b}x{n}x{n}")));
    }
    let q = if l == n {
        a_hyb
    } else {
        let up = g.bilinear_upsample(a_hyb, n, n)?;
        g.row_normalize(up)?
    };
    let kl = g.kl_div(a_vit, q, KL_EPS)?;
    Ok(g.scale(kl, 1.0 / (n * n * b) as f64))
}

/// Loss terms recorded on a graph.
pub struct LossParts {
    pub seg: [Var; 3],
    pub cps: Option<[Var; 3]>,
    pub spa: Var,
    pub att: Var,
}

/// `Σ seg + λ1·spa + λ2·att + λ·Σ cps`; CPS is left out in supervised mode.
pub fn total_loss(g: &mut Graph, parts: &LossParts, w: &LossWeights, mode: Mode) -> Result<Var> {
    w.validate()?;
    let mut t = g.add(parts.seg[0], parts.seg[1])?;
    t = g.add(t, parts.seg[2])?;
    let spa = g.scale(parts.spa, w.spa);
    t = g.add(t, spa)?;
    let att = g.scale(parts.att, w.att);
    t = g.add(t, att)?;
    if let (Mode::Semi, Some(c)) = (mode, parts.cps) {
        let s = g.add(c[0], c[1])?;
        let s = g.add(s, c[2])?;
        let s = g.scale(s, w.cps);
        t = g.add(t, s)?;
    }
    Ok(t)
}

/// Scalar form of [`total_loss`].
pub fn total_value(seg_sum: f64, spa: f64, att: f64, cps_sum: f64, w: &LossWeights, mode: Mode) -> Result<f64> {
    w.validate()?;
    let cps = if mode == Mode::Semi { w.cps * cps_sum } else { 0.0 };
    Ok(seg_sum + w.spa * spa + w.att * att + cps)
}

/// Rejects labels outside `[0, classes)` other than the ignore marker.
pub fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes && l != IGNORE_INDEX) {
        Some(l) => Err(Error::Invalid(format!("label {l} outside [0, {classes})"))),
        None => Ok(()),
    }
}
