//! Scale plans, per-scale window grids, and patch crop/paste.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Grid, Planar};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TilingError {
    #[error("scale plan needs at least one level")]
    EmptyLevels,
    #[error("scale levels must strictly decrease in both height and width: {0:?}")]
    NonMonotonicScales(Vec<(usize, usize)>),
    #[error("scale levels must run from the canvas {canvas:?} down to the processing size {proc:?}, got {first:?} .. {last:?}")]
    EndpointsMismatch {
        canvas: (usize, usize),
        proc: (usize, usize),
        first: (usize, usize),
        last: (usize, usize),
    },
    #[error("{height}x{width} is not divisible into {win_h}x{win_w} windows")]
    IndivisibleGrid {
        height: usize,
        width: usize,
        win_h: usize,
        win_w: usize,
    },
    #[error("scale level {0} is outside the plan")]
    NoSuchLevel(usize),
    #[error("window {window:?} exceeds a {height}x{width} map")]
    OutOfBounds {
        window: Window,
        height: usize,
        width: usize,
    },
    #[error("patch is {got:?} but the window is {expected:?}")]
    DimMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

/// How image dimensions relate to the coarsest level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    /// The image must equal level 1 exactly.
    #[default]
    Strict,
    /// The image may be smaller than level 1; it is edge-replicated up to it
    /// and results are cropped back.
    Pad,
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Window {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Ordered scale levels from the whole canvas down to the processing size.
///
/// Levels are `(height, width)` pairs and are addressed 1-based: level 1 is
/// the coarsest (whole canvas) and level `depth()` the finest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalePlan {
    levels: Vec<(usize, usize)>,
    proc_h: usize,
    proc_w: usize,
}

/// Validates a scale plan for an image of `height x width`.
pub fn build_scale_plan(
    height: usize,
    width: usize,
    proc_h: usize,
    proc_w: usize,
    levels: &[(usize, usize)],
    mode: GridMode,
) -> Result<ScalePlan, TilingError> {
    let (first, last) = match (levels.first(), levels.last()) {
        (Some(&f), Some(&l)) => (f, l),
        _ => return Err(TilingError::EmptyLevels),
    };
    if levels.iter().any(|&(h, w)| h == 0 || w == 0)
        || levels.windows(2).any(|p| p[1].0 >= p[0].0 || p[1].1 >= p[0].1)
    {
        return Err(TilingError::NonMonotonicScales(levels.to_vec()));
    }
    let canvas_ok = match mode {
        GridMode::Strict => first == (height, width),
        GridMode::Pad => height <= first.0 && width <= first.1 && height > 0 && width > 0,
    };
    if !canvas_ok || last != (proc_h, proc_w) {
        return Err(TilingError::EndpointsMismatch {
            canvas: (height, width),
            proc: (proc_h, proc_w),
            first,
            last,
        });
    }
    for &(h, w) in levels {
        if first.0 % h != 0 || first.1 % w != 0 {
            return Err(TilingError::IndivisibleGrid {
                height: first.0,
                width: first.1,
                win_h: h,
                win_w: w,
            });
        }
    }
    Ok(ScalePlan {
        levels: levels.to_vec(),
        proc_h,
        proc_w,
    })
}

impl ScalePlan {
    /// Number of levels, `m`.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[(usize, usize)] {
        &self.levels
    }

    /// `(height, width)` of 1-based level `s`.
    pub fn level(&self, s: usize) -> Result<(usize, usize), TilingError> {
        s.checked_sub(1)
            .and_then(|i| self.levels.get(i).copied())
            .ok_or(TilingError::NoSuchLevel(s))
    }

    /// Dims of level 1, the (possibly padded) working canvas.
    pub fn canvas(&self) -> (usize, usize) {
        self.levels[0]
    }

    pub fn proc_size(&self) -> (usize, usize) {
        (self.proc_h, self.proc_w)
    }

    /// Height ratio between level `s` windows and the processing size.
    pub fn downsample_factor(&self, s: usize) -> Result<f64, TilingError> {
        let (h, _) = self.level(s)?;
        Ok(h as f64 / self.proc_h as f64)
    }

    /// Row-major window grid of level `s` over the canvas.
    pub fn windows(&self, s: usize) -> Result<Vec<Window>, TilingError> {
        let (h, w) = self.level(s)?;
        let (ch, cw) = self.canvas();
        grid_windows(ch, cw, h, w)
    }
}

/// Level-`s` windows over an explicit `height x width` extent.
pub fn windows_for_scale(plan: &ScalePlan, s: usize, height: usize, width: usize) -> Result<Vec<Window>, TilingError> {
    let (h, w) = plan.level(s)?;
    grid_windows(height, width, h, w)
}

/// Non-overlapping row-major grid of `win_h x win_w` windows covering the
/// extent exactly.
pub fn grid_windows(height: usize, width: usize, win_h: usize, win_w: usize) -> Result<Vec<Window>, TilingError> {
    if win_h == 0 || win_w == 0 || !height.is_multiple_of(win_h) || !width.is_multiple_of(win_w) {
        return Err(TilingError::IndivisibleGrid {
            height,
            width,
            win_h,
            win_w,
        });
    }
    let mut out = Vec::with_capacity((height / win_h) * (width / win_w));
    for y in (0..height).step_by(win_h) {
        for x in (0..width).step_by(win_w) {
            out.push(Window::new(x, y, win_w, win_h));
        }
    }
    Ok(out)
}

pub fn extract_patch<M: Planar>(m: &M, win: Window) -> Result<M, TilingError> {
    let g = m.grid();
    if !win.fits(g.height(), g.width()) {
        return Err(TilingError::OutOfBounds {
            window: win,
            height: g.height(),
            width: g.width(),
        });
    }
    let c = g.channels();
    let mut data = Vec::with_capacity(win.area() * c);
    for row in win.y..win.y + win.h {
        let start = g.offset(row, win.x);
        data.extend_from_slice(&g.data()[start..start + win.w * c]);
    }
    let grid = Grid::new(win.h, win.w, c, data).expect("crop buffer matches its window");
    Ok(M::from_grid_unchecked(grid))
}

/// Overwrites the region of `dst` under `win` with `patch`.
pub fn paste_patch<M: Planar>(dst: &mut M, win: Window, patch: &M) -> Result<(), TilingError> {
    let (dh, dw) = (dst.height(), dst.width());
    if !win.fits(dh, dw) {
        return Err(TilingError::OutOfBounds {
            window: win,
            height: dh,
            width: dw,
        });
    }
    let p = patch.grid();
    if (p.height(), p.width()) != (win.h, win.w) || p.channels() != dst.grid().channels() {
        return Err(TilingError::DimMismatch {
            expected: (win.h, win.w),
            got: (p.height(), p.width()),
        });
    }
    let c = p.channels();
    let g = dst.grid_mut();
    for r in 0..win.h {
        let d = g.offset(win.y + r, win.x);
        let s = p.offset(r, 0);
        g.data_mut()[d..d + win.w * c].copy_from_slice(&p.data()[s..s + win.w * c]);
    }
    Ok(())
}

/// Edge-replicates `m` up to `height x width` (bottom and right borders).
pub fn pad_edge<M: Planar>(m: &M, height: usize, width: usize) -> M {
    let g = m.grid();
    assert!(height >= g.height() && width >= g.width() && g.height() > 0 && g.width() > 0);
    let c = g.channels();
    let mut data = Vec::with_capacity(height * width * c);
    for row in 0..height {
        let sr = row.min(g.height() - 1);
        for col in 0..width {
            data.extend_from_slice(g.pixel(sr, col.min(g.width() - 1)));
        }
    }
    M::from_grid_unchecked(Grid::new(height, width, c, data).expect("padded buffer matches its shape"))
}
