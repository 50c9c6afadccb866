//! Uncertainty maps, refinement scores and top-k point selection.
//!
//! Confidence at a pixel is the gap between the two largest class
//! probabilities; uncertainty is `1 - confidence`. The default refinement
//! score favours pixels where the running map is uncertain while the
//! combined map is confident: `median(Yu * (1 - Ru))`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Grid, Planar, ProbMap, ScalarMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("median kernel must be odd and at least 1, got {0}")]
    EvenKernel(usize),
    #[error("map dims differ: {0:?} vs {1:?}")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("pixel ({row}, {col}) is outside a {height}x{width} map")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid score strategy: {0}")]
    Strategy(String),
}

/// Which uncertainty terms enter the score map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `Yu`
    UncertaintyOnly,
    /// `1 - Ru`
    CertaintyOnly,
    /// `Yu * (1 - Ru)`
    Product,
    /// `alpha * Yu + (1 - alpha) * (1 - Ru)`
    Linear,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::UncertaintyOnly => "uncertainty_only",
            ScoreKind::CertaintyOnly => "certainty_only",
            ScoreKind::Product => "product",
            ScoreKind::Linear => "linear",
        }
    }
}

impl FromStr for ScoreKind {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "uncertainty_only" => ScoreKind::UncertaintyOnly,
            "certainty_only" => ScoreKind::CertaintyOnly,
            "product" => ScoreKind::Product,
            "linear" => ScoreKind::Linear,
            other => return Err(SelectError::Strategy(format!("unknown score kind {other:?}"))),
        })
    }
}

/// A validated score recipe. `alpha` is set iff the kind is linear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreStrategy {
    kind: ScoreKind,
    alpha: Option<f32>,
    median_kernel: usize,
}

impl ScoreStrategy {
    pub fn new(kind: ScoreKind, alpha: Option<f32>, median_kernel: usize) -> Result<Self, SelectError> {
        if median_kernel == 0 || median_kernel.is_multiple_of(2) {
            return Err(SelectError::EvenKernel(median_kernel));
        }
        match (kind, alpha) {
            (ScoreKind::Linear, Some(a)) if (0.0..=1.0).contains(&a) => {}
            (ScoreKind::Linear, Some(a)) => {
                return Err(SelectError::Strategy(format!("alpha {a} outside [0, 1]")))
            }
            (ScoreKind::Linear, None) => return Err(SelectError::Strategy("linear scoring needs alpha".into())),
            (_, Some(_)) => {
                return Err(SelectError::Strategy(format!(
                    "alpha is only meaningful for linear scoring, not {}",
                    kind.as_str()
                )))
            }
            (_, None) => {}
        }
        Ok(Self {
            kind,
            alpha,
            median_kernel,
        })
    }

    pub fn product(median_kernel: usize) -> Result<Self, SelectError> {
        Self::new(ScoreKind::Product, None, median_kernel)
    }

    pub fn linear(alpha: f32, median_kernel: usize) -> Result<Self, SelectError> {
        Self::new(ScoreKind::Linear, Some(alpha), median_kernel)
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn alpha(&self) -> Option<f32> {
        self.alpha
    }

    pub fn median_kernel(&self) -> usize {
        self.median_kernel
    }

    pub fn with_kernel(self, median_kernel: usize) -> Result<Self, SelectError> {
        Self::new(self.kind, self.alpha, median_kernel)
    }
}

impl Default for ScoreStrategy {
    fn default() -> Self {
        Self::product(3).expect("3 is odd")
    }
}

impl fmt::Display for ScoreStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.alpha {
            Some(a) => write!(f, "{}:{}", self.kind.as_str(), a),
            None => f.write_str(self.kind.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

/// Per-pixel `1 - (p_top1 - p_top2)`.
pub fn uncertainty_map(m: &ProbMap) -> ScalarMap {
    let (h, w, _) = m.dims();
    let data = m
        .pixels()
        .map(|px| {
            let (mut a, mut b) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
            for &v in px {
                if v > a {
                    b = a;
                    a = v;
                } else if v > b {
                    b = v;
                }
            }
            (1.0 - (a - b)).clamp(0.0, 1.0)
        })
        .collect();
    ScalarMap::new(h, w, data).expect("one value per pixel")
}

/// Median over a `kernel x kernel` neighbourhood with edge replication.
pub fn median_blur(m: &ScalarMap, kernel: usize) -> Result<ScalarMap, SelectError> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(SelectError::EvenKernel(kernel));
    }
    if kernel == 1 {
        return Ok(m.clone());
    }
    let (h, w) = (m.height(), m.width());
    let r = (kernel / 2) as isize;
    let src = m.data();
    let mid = kernel * kernel / 2;
    let mut window = Vec::with_capacity(kernel * kernel);
    let mut out = Vec::with_capacity(h * w);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for row in 0..h as isize {
        for col in 0..w as isize {
            window.clear();
            for dy in -r..=r {
                let y = clamp(row + dy, h);
                for dx in -r..=r {
                    window.push(src[y * w + clamp(col + dx, w)]);
                }
            }
            let (_, med, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
            out.push(*med);
        }
    }
    Ok(ScalarMap::new(h, w, out).expect("one value per pixel"))
}

/// Refinement priority for every pixel of a patch.
pub fn score_map(yu: &ScalarMap, ru: &ScalarMap, strategy: &ScoreStrategy) -> Result<ScalarMap, SelectError> {
    if yu.grid().dims() != ru.grid().dims() {
        return Err(SelectError::DimMismatch(yu.grid().dims(), ru.grid().dims()));
    }
    let raw: Vec<f32> = match strategy.kind {
        ScoreKind::UncertaintyOnly => yu.data().to_vec(),
        ScoreKind::CertaintyOnly => ru.data().iter().map(|&r| 1.0 - r).collect(),
        ScoreKind::Product => yu.data().iter().zip(ru.data()).map(|(&y, &r)| y * (1.0 - r)).collect(),
        ScoreKind::Linear => {
            let a = strategy.alpha.expect("linear strategy carries alpha");
            yu.data()
                .iter()
                .zip(ru.data())
                .map(|(&y, &r)| a * y + (1.0 - a) * (1.0 - r))
                .collect()
        }
    };
    let raw = raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let q = ScalarMap::new(yu.height(), yu.width(), raw).expect("same shape as inputs");
    median_blur(&q, strategy.median_kernel)
}

/// The `k` highest-scoring pixels, best first. Equal scores keep row-major
/// order.
pub fn select_top_k(q: &ScalarMap, k: usize) -> Vec<PixelCoord> {
    let scores = q.data();
    let n = scores.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| -> Ordering { scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)) };
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    let w = q.width();
    idx.into_iter()
        .map(|i| PixelCoord { row: i / w, col: i % w })
        .collect()
}

/// Copies the class vector of `r` into `y` at each listed pixel.
pub fn selective_replace(y: &ProbMap, r: &ProbMap, points: &[PixelCoord]) -> Result<ProbMap, SelectError> {
    if y.dims() != r.dims() {
        return Err(SelectError::DimMismatch(y.dims(), r.dims()));
    }
    let (h, w, c) = y.dims();
    let mut out: Grid<f32> = y.grid().clone();
    for p in points {
        if p.row >= h || p.col >= w {
            return Err(SelectError::OutOfBounds {
                row: p.row,
                col: p.col,
                height: h,
                width: w,
            });
        }
        out.pixel_mut(p.row, p.col).copy_from_slice(r.pixel(p.row, p.col));
    }
    debug_assert_eq!(out.channels(), c);
    Ok(ProbMap::from_grid_unchecked(out))
}
