//! Seeded synthetic segmentation datasets.
//!
//! Each label map is a Voronoi partition into large regions, overlaid with
//! thin curves (1-3 px wide) and small blobs of a dedicated detail class.
//! The matching image paints every class with its own colour plus mild
//! texture noise. Output is a function of the parameters alone.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};
use crate::tensor::{Image, LabelMap};

pub const IMAGE_SUFFIX: &str = "_image.png";
pub const LABEL_SUFFIX: &str = "_label.png";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub count: usize,
    /// Square side length in pixels.
    pub size: usize,
    pub classes: usize,
    /// Density of thin structures; 0 disables them.
    pub detail_scale: f32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureItem {
    pub stem: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Generates one `(image, labels)` pair. `index` selects the item within
/// the seeded sequence.
pub fn generate(spec: &FixtureSpec, index: usize) -> (Image, LabelMap) {
    assert!(spec.classes >= 2 && spec.classes < 255, "fixtures need 2..255 classes");
    assert!(spec.size > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = spec.size;
    let detail = (spec.classes - 1) as u8;
    let region_classes = if spec.classes > 2 { spec.classes - 1 } else { 1 };

    // Large regions.
    let sites: Vec<(f32, f32, u8)> = (0..rng.gen_range(5..9))
        .map(|i| {
            let class = if i < region_classes { i } else { rng.gen_range(0..region_classes) };
            (rng.gen_range(0.0..n as f32), rng.gen_range(0.0..n as f32), class as u8)
        })
        .collect();
    let mut labels = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let nearest = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - px).powi(2) + (a.1 - py).powi(2);
                    let db = (b.0 - px).powi(2) + (b.1 - py).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one site");
            labels[y * n + x] = nearest.2;
        }
    }

    if spec.detail_scale > 0.0 {
        let curves = (6.0 * spec.detail_scale).round() as usize;
        for _ in 0..curves {
            let width = rng.gen_range(1..=3usize);
            let (mut x, mut y) = (rng.gen_range(0.0..n as f32), rng.gen_range(0.0..n as f32));
            let mut angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let len = rng.gen_range(n / 2..=n * 3 / 2);
            for _ in 0..len {
                stamp_square(&mut labels, n, x, y, width, detail);
                angle += rng.gen_range(-0.08..0.08);
                x += angle.cos();
                y += angle.sin();
                if x < 0.0 || y < 0.0 || x >= n as f32 || y >= n as f32 {
                    break;
                }
            }
        }
        let blobs = (10.0 * spec.detail_scale).round() as usize;
        for _ in 0..blobs {
            let r = rng.gen_range(2.0..5.0f32);
            let (cx, cy) = (rng.gen_range(0.0..n as f32), rng.gen_range(0.0..n as f32));
            let (lo_y, hi_y) = ((cy - r).max(0.0) as usize, ((cy + r) as usize + 1).min(n));
            let (lo_x, hi_x) = ((cx - r).max(0.0) as usize, ((cx + r) as usize + 1).min(n));
            for yy in lo_y..hi_y {
                for xx in lo_x..hi_x {
                    if (xx as f32 + 0.5 - cx).powi(2) + (yy as f32 + 0.5 - cy).powi(2) <= r * r {
                        labels[yy * n + xx] = detail;
                    }
                }
            }
        }
    }

    let mut rgb = Vec::with_capacity(n * n * 3);
    for &l in &labels {
        let base = class_colour(l);
        for b in base {
            let noise: i16 = rng.gen_range(-12..=12);
            rgb.push((b as i16 + noise).clamp(0, 255) as u8);
        }
    }
    let image = Image::from_rgb8(n, n, &rgb).expect("bytes map into [0, 1]");
    let labels = LabelMap::new(n, n, labels).expect("n*n labels");
    (image, labels)
}

fn stamp_square(labels: &mut [u8], n: usize, x: f32, y: f32, width: usize, class: u8) {
    let (x0, y0) = (x as usize, y as usize);
    for yy in y0..(y0 + width).min(n) {
        for xx in x0..(x0 + width).min(n) {
            labels[yy * n + xx] = class;
        }
    }
}

fn class_colour(class: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [70, 130, 60],
        [150, 150, 150],
        [200, 170, 90],
        [60, 90, 170],
        [170, 60, 60],
        [110, 60, 150],
        [40, 170, 170],
        [230, 230, 60],
    ];
    let base = PALETTE[class as usize % PALETTE.len()];
    let shift = (class as usize / PALETTE.len()) as u8 * 17;
    [base[0].wrapping_add(shift), base[1], base[2].wrapping_sub(shift)]
}

/// Writes `count` fixture pairs and a `fixtures.json` description into
/// `dir`.
pub fn make_fixtures(dir: &Path, spec: &FixtureSpec) -> Result<Vec<FixtureItem>, IoError> {
    fs::create_dir_all(dir).map_err(|source| IoError::File {
        path: dir.display().to_string(),
        source,
    })?;
    let mut items = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (image, labels) = generate(spec, i);
        let stem = format!("fixture_{i:04}");
        let item = FixtureItem {
            image: dir.join(format!("{stem}{IMAGE_SUFFIX}")),
            label: dir.join(format!("{stem}{LABEL_SUFFIX}")),
            stem,
        };
        io::write_image_png(&item.image, &image)?;
        io::write_label_png(&item.label, &labels)?;
        items.push(item);
    }
    let meta = serde_json::to_string_pretty(spec).expect("spec serializes");
    let path = dir.join("fixtures.json");
    fs::write(&path, meta + "\n").map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })?;
    Ok(items)
}

/// Image/label pairs in `dir`, sorted by stem.
pub fn list_fixtures(dir: &Path) -> Result<Vec<FixtureItem>, IoError> {
    let entries = fs::read_dir(dir).map_err(|source| IoError::File {
        path: dir.display().to_string(),
        source,
    })?;
    let mut items = Vec::new();
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(IMAGE_SUFFIX) {
            let label = dir.join(format!("{stem}{LABEL_SUFFIX}"));
            if label.exists() {
                items.push(FixtureItem {
                    stem: stem.to_string(),
                    image: entry.path(),
                    label,
                });
            }
        }
    }
    items.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(items)
}
