//! Top-1 accuracy and mean intersection-over-union.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Index of the largest entry of each `k`-wide row.
pub fn argmax_rows(logits: &[f32], k: usize) -> Vec<usize> {
    logits
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::invalid("accuracy needs equally sized, non-empty label lists"));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `k×k` confusion counts, row = ground truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::invalid("prediction and ground truth differ in length"));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= self.classes || t >= self.classes {
                return Err(Error::invalid("class index outside the confusion matrix"));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Mean over classes present in the ground truth of `TP / (TP + FP + FN)`.
    pub fn mean_iou(&self) -> f64 {
        let k = self.classes;
        let mut total = 0.0;
        let mut present = 0;
        for c in 0..k {
            let gt: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
            if gt == 0 {
                continue;
            }
            let tp = self.counts[c * k + c];
            let predicted: u64 = (0..k).map(|r| self.counts[r * k + c]).sum();
            total += tp as f64 / (gt + predicted - tp) as f64;
            present += 1;
        }
        if present == 0 {
            0.0
        } else {
            total / present as f64
        }
    }
}

pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    let mut c = Confusion::new(classes);
    c.add(pred, truth)?;
    Ok(c.mean_iou())
}
