//! Segmentation and combiner contracts plus the built-in implementations.
//!
//! A [`SegmentationBackend`] turns a processing-size image patch into class
//! probabilities. A [`Combiner`] merges the running map `Y` with the
//! scale-specific map `O` into a candidate map `R`. Both must return
//! normalized probability maps of the input's spatial size.

mod combine;
pub mod external;
mod oracle;
pub mod protocol;

use thiserror::Error;

use crate::tensor::{Image, Planar, ProbMap, TensorError};
use crate::tiling::{ScalePlan, Window};

pub use combine::CombinerKind;
pub use external::{ExternalBackend, ExternalCombiner, Endpoint, EndpointPool};
pub use oracle::{OracleBackend, OracleBackendConfig};

/// Tolerance used when checking backend outputs against the probability
/// contract.
pub const PROB_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend failure: {0}")]
    Failure(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error (status {status}): {message}")]
    Server { status: u8, message: String },
    #[error("no response from external process within {0:?}")]
    Timeout(std::time::Duration),
    #[error("input dims {0:?} and {1:?} differ")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Where a patch sits in the pyramid.
#[derive(Debug, Clone, Copy)]
pub struct PatchContext<'a> {
    /// 1-based scale level.
    pub level: usize,
    /// Window in canvas coordinates.
    pub window: Window,
    pub plan: &'a ScalePlan,
}

pub trait SegmentationBackend: Send + Sync {
    fn classes(&self) -> usize;

    fn segment(&self, patch: &Image, ctx: &PatchContext<'_>) -> Result<ProbMap, BackendError>;
}

pub trait Combiner: Send + Sync {
    fn combine(&self, y: &ProbMap, o: &ProbMap) -> Result<ProbMap, BackendError>;
}

impl<T: SegmentationBackend + ?Sized> SegmentationBackend for Box<T> {
    fn classes(&self) -> usize {
        (**self).classes()
    }

    fn segment(&self, patch: &Image, ctx: &PatchContext<'_>) -> Result<ProbMap, BackendError> {
        (**self).segment(patch, ctx)
    }
}

impl<T: Combiner + ?Sized> Combiner for Box<T> {
    fn combine(&self, y: &ProbMap, o: &ProbMap) -> Result<ProbMap, BackendError> {
        (**self).combine(y, o)
    }
}

/// Predicts one class everywhere.
#[derive(Debug, Clone)]
pub struct ConstantBackend {
    class: usize,
    classes: usize,
}

impl ConstantBackend {
    pub fn new(class: usize, classes: usize) -> Result<Self, BackendError> {
        if classes < 2 || class >= classes {
            return Err(BackendError::Failure(format!(
                "constant class {class} invalid for {classes} classes"
            )));
        }
        Ok(Self { class, classes })
    }
}

impl SegmentationBackend for ConstantBackend {
    fn classes(&self) -> usize {
        self.classes
    }

    fn segment(&self, patch: &Image, ctx: &PatchContext<'_>) -> Result<ProbMap, BackendError> {
        check_patch(patch, ctx)?;
        let (h, w) = (patch.height(), patch.width());
        let mut data = vec![0.0; h * w * self.classes];
        for px in data.chunks_exact_mut(self.classes) {
            px[self.class] = 1.0;
        }
        Ok(ProbMap::new(h, w, self.classes, data)?)
    }
}

pub(crate) fn check_patch(patch: &Image, ctx: &PatchContext<'_>) -> Result<(), BackendError> {
    let proc = ctx.plan.proc_size();
    if (patch.height(), patch.width()) != proc {
        return Err(BackendError::Failure(format!(
            "patch is {}x{} but the processing size is {}x{}",
            patch.height(),
            patch.width(),
            proc.0,
            proc.1
        )));
    }
    Ok(())
}

/// Confidence of one pixel vector: top-1 minus top-2.
pub(crate) fn confidence(px: &[f32]) -> f32 {
    let (mut a, mut b) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
    for &v in px {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    a - b
}
