use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{confidence, BackendError, Combiner};
use crate::tensor::{Grid, Planar, ProbMap};

/// Non-learned reference combiners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    /// `R = O`
    PassthroughO,
    /// `R = normalize((Y + O) / 2)`
    #[default]
    Mean,
    /// Per pixel, whichever of `Y`, `O` is more confident; `Y` on ties.
    ConfidenceGate,
}

impl CombinerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CombinerKind::PassthroughO => "passthrough_o",
            CombinerKind::Mean => "mean",
            CombinerKind::ConfidenceGate => "confidence_gate",
        }
    }
}

impl FromStr for CombinerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "passthrough_o" => Ok(CombinerKind::PassthroughO),
            "mean" => Ok(CombinerKind::Mean),
            "confidence_gate" => Ok(CombinerKind::ConfidenceGate),
            other => Err(format!("unknown combiner {other:?}")),
        }
    }
}

impl Combiner for CombinerKind {
    fn combine(&self, y: &ProbMap, o: &ProbMap) -> Result<ProbMap, BackendError> {
        if y.dims() != o.dims() {
            return Err(BackendError::DimMismatch(y.dims(), o.dims()));
        }
        match self {
            CombinerKind::PassthroughO => Ok(o.clone()),
            CombinerKind::Mean => {
                let (h, w, c) = y.dims();
                let data = y.data().iter().zip(o.data()).map(|(a, b)| (a + b) * 0.5).collect();
                Ok(ProbMap::new(h, w, c, data)?.normalize_prob()?)
            }
            CombinerKind::ConfidenceGate => {
                let (h, w, c) = y.dims();
                let mut out: Grid<f32> = y.grid().clone();
                for row in 0..h {
                    for col in 0..w {
                        let op = o.pixel(row, col);
                        if confidence(op) > confidence(y.pixel(row, col)) {
                            out.pixel_mut(row, col).copy_from_slice(op);
                        }
                    }
                }
                debug_assert_eq!(out.channels(), c);
                Ok(ProbMap::from_grid_unchecked(out))
            }
        }
    }
}
