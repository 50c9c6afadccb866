//! Confusion-matrix metrics.
//!
//! Rows index ground truth, columns index prediction. Pixels whose ground
//! truth equals the ignore index are skipped. Classes absent from both
//! ground truth and prediction have no IoU and are left out of the mean.

use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::Serialize;
use thiserror::Error;

use crate::tensor::{LabelMap, Planar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction is {0:?} but ground truth is {1:?}")]
    DimMismatch((usize, usize), (usize, usize)),
    #[error("{which} label {label} is out of range for {classes} classes")]
    LabelOutOfRange {
        which: &'static str,
        label: u8,
        classes: usize,
    },
    #[error("no class has a defined IoU")]
    NoDefinedClasses,
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("matrices have {0} and {1} classes")]
    ClassMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let classes = rows.len();
        assert!(rows.iter().all(|r| r.len() == classes), "confusion matrix must be square");
        Self {
            classes,
            counts: rows.concat(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<(), EvalError> {
        let (pd, gd) = ((pred.height(), pred.width()), (gt.height(), gt.width()));
        if pd != gd {
            return Err(EvalError::DimMismatch(pd, gd));
        }
        let c = self.classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == ignore {
                continue;
            }
            if g as usize >= c {
                return Err(EvalError::LabelOutOfRange {
                    which: "ground truth",
                    label: g,
                    classes: c,
                });
            }
            if p as usize >= c {
                return Err(EvalError::LabelOutOfRange {
                    which: "predicted",
                    label: p,
                    classes: c,
                });
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// `IoU_c = tp / (row + col - tp)`, or `None` when the denominator is 0.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..self.classes).map(|i| self.get(i, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64, EvalError> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(EvalError::NoDefinedClasses);
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if self.classes != other.classes {
            return Err(EvalError::ClassMismatch(self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        self.merge(rhs).expect("merging matrices with different class counts");
    }
}

/// Convenience for a single prediction/ground-truth pair.
pub fn evaluate_pair(pred: &LabelMap, gt: &LabelMap, classes: usize, ignore: u8) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfPoint {
    pub edge: f64,
    pub fraction: f64,
}

/// Cumulative fraction of values `<=` each of the `bins + 1` evenly spaced
/// edges over `[0, 1]`.
pub fn iou_cdf(values: &[f64], bins: usize) -> Result<Vec<CdfPoint>, EvalError> {
    if values.is_empty() || bins == 0 {
        return Err(EvalError::EmptyInput);
    }
    let n = values.len() as f64;
    Ok((0..=bins)
        .map(|i| {
            let edge = i as f64 / bins as f64;
            let below = values.iter().filter(|&&v| v <= edge).count();
            CdfPoint {
                edge,
                fraction: below as f64 / n,
            }
        })
        .collect())
}

pub fn cdf_csv(points: &[CdfPoint]) -> String {
    let mut s = String::from("edge,fraction\n");
    for p in points {
        let _ = writeln!(s, "{},{}", p.edge, p.fraction);
    }
    s
}
