//! Confusion-matrix mIoU and the metrics CSV.

use crate::losses::LossReport;
use crate::tensor::IGNORE_INDEX;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// IoU per class; `None` where prediction and ground truth are both empty.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Ground-truth pixel count per class.
    pub pixels: Vec<u64>,
}

/// Row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Invalid(format!("confusion: {} predictions vs {} labels", pred.len(), truth.len())));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_INDEX {
                continue;
            }
            if p >= self.classes || t >= self.classes {
                return Err(Error::Invalid(format!("confusion: class {} outside {}", p.max(t), self.classes)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn report(&self) -> Result<EvalReport> {
        let c = self.classes;
        let mut iou = Vec::with_capacity(c);
        let mut pixels = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.get(k, k);
            let gt: u64 = (0..c).map(|p| self.get(k, p)).sum();
            let pr: u64 = (0..c).map(|t| self.get(t, k)).sum();
            let union = gt + pr - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            pixels.push(gt);
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Invalid("evaluation saw no labeled pixels".into()));
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(EvalReport { iou, miou, pixels })
    }
}

pub const CSV_HEADER: &str = "step,lr,seg,cps,spa,att,total,miou_eval";

/// One CSV row; `miou` is left blank on steps without evaluation.
pub fn csv_row(step: u64, lr: f64, r: &LossReport, miou: Option<f64>) -> String {
    let m = miou.map_or(String::new(), |v| v.to_string());
    format!("{step},{lr},{},{},{},{},{},{m}", r.seg_sum(), r.cps_sum(), r.spa, r.att, r.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn miou(pred: &[usize], gt: &[usize], c: usize) -> f64 {
        let mut m = Confusion::new(c);
        m.add(pred, gt).unwrap();
        m.report().unwrap().miou
    }

    #[test]
    fn hand_examples() {
        assert_eq!(miou(&[0, 1, 2, 2], &[0, 1, 2, 2], 3), 1.0);
        assert_eq!(miou(&[1, 0, 0, 1], &[0, 1, 1, 0], 2), 0.0);
        let r = {
            let mut m = Confusion::new(2);
            m.add(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
            m.report().unwrap()
        };
        assert_eq!(r.iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(r.pixels, vec![1, 3]);
    }

    #[test]
    fn absent_classes_and_ignore() {
        let mut m = Confusion::new(4);
        m.add(&[0, 1, 3], &[0, 1, IGNORE_INDEX]).unwrap();
        let r = m.report().unwrap();
        assert_eq!(r.iou[2], None);
        assert_eq!(r.iou[3], None);
        assert_eq!(r.miou, 1.0);
        assert!(Confusion::new(2).report().is_err());
        assert!(Confusion::new(2).add(&[2], &[0]).is_err());
    }

    #[test]
    fn csv_row_format() {
        let r = LossReport { seg: [1.0, 0.5, 0.25], cps: [0.0; 3], spa: 0.125, att: 2.0, total: 3.0 };
        assert_eq!(csv_row(3, 0.01, &r, None), "3,0.01,1.75,0,0.125,2,3,");
        assert_eq!(csv_row(3, 0.01, &r, Some(0.5)), "3,0.01,1.75,0,0.125,2,3,0.5");
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let tp: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
            prop_assert!((miou(&p, &t, 4) - miou(&pp, &tp, 4)).abs() < 1e-12);
        }
    }
}
