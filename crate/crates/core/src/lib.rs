//! Progressive coarse-to-fine semantic segmentation over a tiled scale
//! pyramid.
//!
//! A coarse whole-image prediction is refined level by level. At each level
//! the image is cut into a grid of windows, each window is segmented at a
//! fixed processing size, and only the pixels whose score marks them as
//! most in need of correction are overwritten.

pub mod backend;
pub mod config;
pub mod eval;
pub mod fixtures;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod select;
pub mod tensor;
pub mod tiling;
