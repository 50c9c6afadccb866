//! Dense per-pixel containers shared by every stage.
//!
//! All maps are stored row-major as `(row, col, channel)` in a single flat
//! buffer. [`ProbMap`] carries class probabilities, [`ScalarMap`] carries
//! uncertainty and score fields, [`Image`] carries RGB in `[0, 1]` and
//! [`LabelMap`] carries hard class indices.

use thiserror::Error;

/// Label value excluded from metrics.
pub const IGNORE_INDEX: u8 = 255;

const ZERO_SUM_EPS: f32 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("pixel ({row}, {col}) has a probability sum of zero")]
    ZeroSumPixel { row: usize, col: usize },
    #[error("buffer of length {len} does not match shape {height}x{width}x{channels}")]
    ShapeMismatch {
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    },
    #[error("invalid value {value} at flat index {index}: {reason}")]
    InvalidValue {
        index: usize,
        value: f32,
        reason: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Plain `height x width x channels` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if channels == 0 || data.len() != height * width * channels {
            return Err(TensorError::ShapeMismatch {
                height,
                width,
                channels,
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let o = self.offset(row, col);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let o = self.offset(row, col);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.channels)
    }
}

impl Grid<f32> {
    /// Bilinear resampling with the align-corners=false convention.
    ///
    /// Identical output dims return an exact copy.
    pub fn resample_bilinear(&self, out_h: usize, out_w: usize) -> Grid<f32> {
        assert!(out_h >= 1 && out_w >= 1, "resample target must be at least 1x1");
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let ys = axis_taps(self.height, out_h);
        let xs = axis_taps(self.width, out_w);
        let c = self.channels;
        let mut out = Vec::with_capacity(out_h * out_w * c);
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let a = self.pixel(y0, x0);
                let b = self.pixel(y0, x1);
                let d = self.pixel(y1, x0);
                let e = self.pixel(y1, x1);
                for ch in 0..c {
                    let top = a[ch] + lx * (b[ch] - a[ch]);
                    let bot = d[ch] + lx * (e[ch] - d[ch]);
                    out.push(top + ly * (bot - top));
                }
            }
        }
        Grid {
            height: out_h,
            width: out_w,
            channels: c,
            data: out,
        }
    }
}

/// Source taps `(lo, hi, frac)` for each output coordinate along one axis.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f32 };
            (lo, hi, frac)
        })
        .collect()
}

/// Common access to the grid behind each map kind.
pub trait Planar: Sized + Clone {
    type Elem: Copy;

    fn grid(&self) -> &Grid<Self::Elem>;

    fn grid_mut(&mut self) -> &mut Grid<Self::Elem>;

    /// Rewraps a buffer produced by a geometric operation (crop, paste) on
    /// maps of this kind. Values are copied, never synthesized, so the
    /// kind's invariants carry over.
    fn from_grid_unchecked(grid: Grid<Self::Elem>) -> Self;

    fn height(&self) -> usize {
        self.grid().height()
    }

    fn width(&self) -> usize {
        self.grid().width()
    }
}

/// Maps that can be bilinearly resampled.
pub trait Resample: Planar<Elem = f32> {
    /// Post-processing applied to freshly interpolated data.
    fn finish_resample(grid: Grid<f32>) -> Self {
        Self::from_grid_unchecked(grid)
    }

    fn resample_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height() && out_w == self.width() {
            return self.clone();
        }
        Self::finish_resample(self.grid().resample_bilinear(out_h, out_w))
    }
}

macro_rules! planar_impl {
    ($ty:ty, $elem:ty) => {
        impl Planar for $ty {
            type Elem = $elem;

            fn grid(&self) -> &Grid<$elem> {
                &self.0
            }

            fn grid_mut(&mut self) -> &mut Grid<$elem> {
                &mut self.0
            }

            fn from_grid_unchecked(grid: Grid<$elem>) -> Self {
                Self(grid)
            }
        }
    };
}

/// Per-pixel class probabilities, `height x width x classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Grid<f32>);

planar_impl!(ProbMap, f32);

impl Resample for ProbMap {
    fn finish_resample(grid: Grid<f32>) -> Self {
        // Interpolated vectors are convex combinations of valid ones, so the
        // sum stays positive.
        ProbMap(grid)
            .normalize_prob()
            .expect("bilinear combination of non-negative vectors with positive sums")
    }
}

impl ProbMap {
    /// Wraps raw values; requires `classes >= 2` and non-negative finite data.
    /// Does not normalize.
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if classes < 2 {
            return Err(TensorError::Invalid(format!(
                "probability maps need at least 2 classes, got {classes}"
            )));
        }
        let grid = Grid::new(height, width, classes, data)?;
        check_values(grid.data(), |v| v.is_finite() && v >= 0.0, "must be finite and non-negative")?;
        Ok(Self(grid))
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        assert!(classes >= 2);
        Self(Grid::filled(height, width, classes, 1.0 / classes as f32))
    }

    /// One-hot encoding of `labels`; ignore pixels become uniform.
    pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<Self, TensorError> {
        if classes < 2 {
            return Err(TensorError::Invalid(format!(
                "probability maps need at least 2 classes, got {classes}"
            )));
        }
        let mut data = vec![0.0f32; labels.height() * labels.width() * classes];
        for (i, &l) in labels.data().iter().enumerate() {
            let px = &mut data[i * classes..(i + 1) * classes];
            if l == IGNORE_INDEX {
                px.fill(1.0 / classes as f32);
            } else if (l as usize) < classes {
                px[l as usize] = 1.0;
            } else {
                return Err(TensorError::Invalid(format!(
                    "label {l} at flat index {i} is out of range for {classes} classes"
                )));
            }
        }
        Ok(Self(Grid::new(labels.height(), labels.width(), classes, data)?))
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims()
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        self.0.pixel(row, col)
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f32> {
        self.0.pixels()
    }

    /// Scales every pixel vector to sum to one.
    pub fn normalize_prob(mut self) -> Result<Self, TensorError> {
        let (_, w, c) = self.0.dims();
        for (i, px) in self.0.data_mut().chunks_exact_mut(c).enumerate() {
            let sum: f32 = px.iter().sum();
            if sum <= ZERO_SUM_EPS {
                return Err(TensorError::ZeroSumPixel {
                    row: i / w,
                    col: i % w,
                });
            }
            for v in px.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self)
    }

    /// Checks the probability-map contract: finite, non-negative, and every
    /// pixel summing to one within `tol`.
    pub fn validate(&self, tol: f32) -> Result<(), TensorError> {
        check_values(self.data(), |v| v.is_finite() && v >= 0.0, "must be finite and non-negative")?;
        let w = self.0.width();
        for (i, px) in self.pixels().enumerate() {
            let sum: f32 = px.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(TensorError::Invalid(format!(
                    "pixel ({}, {}) sums to {sum}",
                    i / w,
                    i % w
                )));
            }
        }
        Ok(())
    }

    /// Hard labels; ties go to the lowest class index.
    pub fn argmax_labels(&self) -> LabelMap {
        let data = self.pixels().map(|px| argmax(px) as u8).collect();
        LabelMap(Grid {
            height: self.0.height(),
            width: self.0.width(),
            channels: 1,
            data,
        })
    }
}

/// Index of the largest value, first index on ties.
#[inline]
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Single-channel real field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap(Grid<f32>);

planar_impl!(ScalarMap, f32);

impl Resample for ScalarMap {}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Ok(Self(Grid::new(height, width, 1, data)?))
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self(Grid::filled(height, width, 1, value))
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.0.data_mut()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.0.data()[row * self.0.width() + col]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Self(Grid {
            data,
            ..self.0.clone_shape()
        })
    }
}

impl<T: Copy> Grid<T> {
    fn clone_shape(&self) -> Grid<T> {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: Vec::new(),
        }
    }
}

/// RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Grid<f32>);

planar_impl!(Image, f32);

impl Resample for Image {}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        let grid = Grid::new(height, width, 3, data)?;
        check_values(grid.data(), |v| (0.0..=1.0).contains(&v), "must lie in [0, 1]")?;
        Ok(Self(grid))
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self, TensorError> {
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(height, width, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }
}

/// Hard class indices, with [`IGNORE_INDEX`] for unlabeled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap(Grid<u8>);

planar_impl!(LabelMap, u8);

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, TensorError> {
        Ok(Self(Grid::new(height, width, 1, data)?))
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self(Grid::filled(height, width, 1, value))
    }

    pub fn data(&self) -> &[u8] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        self.0.data_mut()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.0.data()[row * self.0.width() + col]
    }

    /// Rejects any non-ignore label `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<(), TensorError> {
        match self
            .data()
            .iter()
            .position(|&l| l != IGNORE_INDEX && l as usize >= classes)
        {
            Some(i) => Err(TensorError::Invalid(format!(
                "label {} at flat index {i} is out of range for {classes} classes",
                self.data()[i]
            ))),
            None => Ok(()),
        }
    }
}

fn check_values(data: &[f32], ok: impl Fn(f32) -> bool, reason: &'static str) -> Result<(), TensorError> {
    match data.iter().position(|&v| !ok(v)) {
        Some(index) => Err(TensorError::InvalidValue {
            index,
            value: data[index],
            reason,
        }),
        None => Ok(()),
    }
}
