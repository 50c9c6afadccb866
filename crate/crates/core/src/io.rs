//! On-disk formats: `.mgt` tensors and 8-bit PNG images/labels.
//!
//! `.mgt` layout: `b"MGT1"`, `u32` LE ndim, ndim `u32` LE dims, then `f32` LE
//! values in row-major order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Image, LabelMap, Planar, ProbMap, ScalarMap, TensorError};

pub const MGT_MAGIC: &[u8; 4] = b"MGT1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: io::Error },
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error("png {path}: {message}")]
    Png { path: String, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Raw n-dimensional f32 tensor as stored on disk or on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn element_count(dims: &[u32]) -> Option<usize> {
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
    }

    /// Writes `ndim, dims..., data...` without a magic prefix.
    pub fn write_body<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads a body written by [`RawTensor::write_body`]. `max_elems` bounds
    /// the allocation a corrupt header can request.
    pub fn read_body<R: Read>(r: &mut R, max_elems: usize) -> Result<Self, BodyError> {
        let ndim = read_u32(r)? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(BodyError::Format(format!("unsupported ndim {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(r)?);
        }
        let n = Self::element_count(&dims)
            .filter(|&n| n <= max_elems)
            .ok_or_else(|| BodyError::Format(format!("tensor dims {dims:?} exceed the size limit")))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

#[derive(Debug, Error)]
pub enum BodyError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Format(String),
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl From<&ProbMap> for RawTensor {
    fn from(m: &ProbMap) -> Self {
        let (h, w, c) = m.dims();
        Self {
            dims: vec![h as u32, w as u32, c as u32],
            data: m.data().to_vec(),
        }
    }
}

impl From<&ScalarMap> for RawTensor {
    fn from(m: &ScalarMap) -> Self {
        Self {
            dims: vec![m.height() as u32, m.width() as u32],
            data: m.data().to_vec(),
        }
    }
}

impl From<&Image> for RawTensor {
    fn from(m: &Image) -> Self {
        Self {
            dims: vec![m.height() as u32, m.width() as u32, 3],
            data: m.data().to_vec(),
        }
    }
}

pub fn encode_mgt(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + t.dims.len() * 4 + t.data.len() * 4);
    out.extend_from_slice(MGT_MAGIC);
    t.write_body(&mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn decode_mgt(bytes: &[u8]) -> Result<RawTensor, IoError> {
    if bytes.len() < 4 || &bytes[..4] != MGT_MAGIC {
        return Err(IoError::Format("missing MGT1 magic".into()));
    }
    let mut cur = &bytes[4..];
    let t = RawTensor::read_body(&mut cur, bytes.len() / 4).map_err(|e| IoError::Format(e.to_string()))?;
    if !cur.is_empty() {
        return Err(IoError::Format(format!("{} trailing bytes", cur.len())));
    }
    Ok(t)
}

pub fn write_mgt(path: &Path, t: &RawTensor) -> Result<(), IoError> {
    fs::write(path, encode_mgt(t)).map_err(|source| file_err(path, source))
}

pub fn read_mgt(path: &Path) -> Result<RawTensor, IoError> {
    let bytes = fs::read(path).map_err(|source| file_err(path, source))?;
    decode_mgt(&bytes)
}

pub fn prob_map_from_raw(t: RawTensor) -> Result<ProbMap, IoError> {
    match t.dims[..] {
        [h, w, c] => Ok(ProbMap::new(h as usize, w as usize, c as usize, t.data)?),
        _ => Err(IoError::Format(format!("expected a 3-d probability tensor, got dims {:?}", t.dims))),
    }
}

pub fn scalar_map_from_raw(t: RawTensor) -> Result<ScalarMap, IoError> {
    match t.dims[..] {
        [h, w] => Ok(ScalarMap::new(h as usize, w as usize, t.data)?),
        _ => Err(IoError::Format(format!("expected a 2-d scalar tensor, got dims {:?}", t.dims))),
    }
}

pub fn read_image_png(path: &Path) -> Result<Image, IoError> {
    let img = image::open(path).map_err(|e| png_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::from_rgb8(h as usize, w as usize, img.as_raw())?)
}

pub fn write_image_png(path: &Path, img: &Image) -> Result<(), IoError> {
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width() as u32,
        img.height() as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| png_err(path, e))
}

pub fn read_label_png(path: &Path) -> Result<LabelMap, IoError> {
    let img = image::open(path).map_err(|e| png_err(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(IoError::Png {
                path: path.display().to_string(),
                message: format!("label maps must be 8-bit single channel, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    Ok(LabelMap::new(h as usize, w as usize, gray.into_raw())?)
}

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<(), IoError> {
    image::save_buffer(
        path,
        labels.data(),
        labels.width() as u32,
        labels.height() as u32,
        image::ColorType::L8,
    )
    .map_err(|e| png_err(path, e))
}

fn file_err(path: &Path, source: io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
}

fn png_err(path: &Path, e: image::ImageError) -> IoError {
    IoError::Png {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = RawTensor {
            dims: vec![1, 2],
            data: vec![1.0, -0.5],
        };
        let bytes = encode_mgt(&t);
        let mut expect = b"MGT1".to_vec();
        expect.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_mgt(b"MGT2\x01\0\0\0\x01\0\0\0\0\0\0\0").is_err());
        let mut bytes = encode_mgt(&RawTensor {
            dims: vec![3],
            data: vec![1.0, 2.0, 3.0],
        });
        bytes.pop();
        assert!(decode_mgt(&bytes).is_err());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 255, 1, 0]).unwrap();
        let p = dir.path().join("l.png");
        write_label_png(&p, &labels).unwrap();
        assert_eq!(read_label_png(&p).unwrap(), labels);

        let img = Image::from_rgb8(1, 2, &[0, 128, 255, 10, 20, 30]).unwrap();
        let p = dir.path().join("i.png");
        write_image_png(&p, &img).unwrap();
        assert_eq!(read_image_png(&p).unwrap(), img);
    }

    proptest! {
        #[test]
        fn mgt_round_trip(dims in proptest::collection::vec(1u32..5, 1..4), seed in any::<u32>()) {
            let n = RawTensor::element_count(&dims).unwrap();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = RawTensor { dims, data };
            prop_assert_eq!(decode_mgt(&encode_mgt(&t)).unwrap(), t);
        }
    }
}
