//! Confusion matrices, per-class IoU and mIoU.

use crate::error::{Error, Result};

/// `counts[truth][pred]` over non-ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Rows are truth classes.
    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.num_classes.max(1))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one prediction/truth pair of equal length. Truth pixels equal to
    /// `ignore` are skipped; any other out-of-range value is an error.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "accumulate_confusion",
                &[pred.len()],
                &[truth.len()],
            ));
        }
        let n = self.num_classes;
        // validate first so a failed call leaves the matrix untouched
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore {
                continue;
            }
            if p as usize >= n {
                return Err(Error::arg(
                    "accumulate_confusion",
                    format!("prediction {p} outside {n} classes"),
                ));
            }
            if t as usize >= n {
                return Err(Error::arg(
                    "accumulate_confusion",
                    format!("truth {t} outside {n} classes"),
                ));
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != ignore {
                self.counts[t as usize * n + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(
                "merge",
                &[self.num_classes],
                &[other.num_classes],
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` of class `i`.
    pub fn class_counts(&self, i: usize) -> (u64, u64, u64) {
        let n = self.num_classes;
        let tp = self.get(i, i);
        let row: u64 = (0..n).map(|j| self.get(i, j)).sum();
        let col: u64 = (0..n).map(|j| self.get(j, i)).sum();
        (tp, col - tp, row - tp)
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from both
    /// prediction and truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|i| {
                let (tp, fp, fn_) = self.class_counts(i);
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over present classes.
    pub fn miou(&self) -> Result<f64> {
        mean_present(&self.iou_per_class())
    }
}

pub fn mean_present(ious: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::arg(
            "miou",
            "no class is present in prediction or truth",
        ));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
