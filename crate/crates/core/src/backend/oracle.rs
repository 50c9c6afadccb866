//! Ground-truth-derived stand-in for a trained segmentation network.
//!
//! Each patch prediction is the one-hot ground truth under the patch's
//! window, area-averaged down to the processing size, blurred with a
//! scale-dependent Gaussian, softened toward uniform, and finally hit with
//! seeded argmax flips. Coarse levels therefore lose thin structures while
//! the finest level sees them intact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_patch, BackendError, PatchContext, SegmentationBackend};
use crate::tensor::{argmax, Image, LabelMap, ProbMap, Resample};
use crate::tiling::extract_patch;

#[derive(Debug, Clone)]
pub struct OracleBackendConfig {
    /// Canvas-sized ground truth.
    pub gt: LabelMap,
    pub classes: usize,
    /// Blur sigma, in processing-size pixels, applied at level 1.
    pub blur_sigma_at_coarsest: f32,
    /// Probability of moving each pixel's argmax to another class.
    pub label_noise_rate: f32,
    /// Weight kept on the blurred distribution; the rest goes to uniform.
    pub softness: f32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct OracleBackend {
    cfg: OracleBackendConfig,
}

impl OracleBackend {
    pub fn new(cfg: OracleBackendConfig) -> Result<Self, BackendError> {
        let bad = |m: String| Err(BackendError::Failure(m));
        if cfg.classes < 2 || cfg.classes > crate::tensor::IGNORE_INDEX as usize {
            return bad(format!("oracle needs 2..=255 classes, got {}", cfg.classes));
        }
        if !(cfg.blur_sigma_at_coarsest >= 0.0 && cfg.blur_sigma_at_coarsest.is_finite()) {
            return bad(format!("blur sigma must be >= 0, got {}", cfg.blur_sigma_at_coarsest));
        }
        if !(0.0..1.0).contains(&cfg.label_noise_rate) {
            return bad(format!("label noise rate must be in [0, 1), got {}", cfg.label_noise_rate));
        }
        if !(cfg.softness > 0.0 && cfg.softness <= 1.0) {
            return bad(format!("softness must be in (0, 1], got {}", cfg.softness));
        }
        cfg.gt.check_classes(cfg.classes)?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &OracleBackendConfig {
        &self.cfg
    }

    /// Blur sigma for level `s`: zero at the finest level, the configured
    /// maximum at level 1, linear in the downsampling factor in between.
    pub fn sigma_for(&self, ctx: &PatchContext<'_>) -> f32 {
        let f_s = ctx.plan.downsample_factor(ctx.level).unwrap_or(1.0);
        let f_1 = ctx.plan.downsample_factor(1).unwrap_or(1.0);
        if f_1 <= 1.0 {
            return 0.0;
        }
        (self.cfg.blur_sigma_at_coarsest as f64 * ((f_s - 1.0) / (f_1 - 1.0)).max(0.0)) as f32
    }

    fn patch_seed(&self, ctx: &PatchContext<'_>) -> u64 {
        [ctx.level as u64, ctx.window.x as u64, ctx.window.y as u64]
            .iter()
            .fold(splitmix64(self.cfg.seed), |acc, &v| splitmix64(acc ^ v))
    }
}

impl SegmentationBackend for OracleBackend {
    fn classes(&self) -> usize {
        self.cfg.classes
    }

    fn segment(&self, patch: &Image, ctx: &PatchContext<'_>) -> Result<ProbMap, BackendError> {
        check_patch(patch, ctx)?;
        let (ph, pw) = ctx.plan.proc_size();
        let c = self.cfg.classes;
        let gt = extract_patch(&self.cfg.gt, ctx.window).map_err(|e| BackendError::Failure(e.to_string()))?;
        let onehot = ProbMap::one_hot(&gt, c)?;
        let down = area_downsample(&onehot, ph, pw);
        let mut data = gaussian_blur(down.data(), ph, pw, c, self.sigma_for(ctx));

        let soft = self.cfg.softness;
        let floor = (1.0 - soft) / c as f32;
        for v in data.iter_mut() {
            *v = soft * *v + floor;
        }

        if self.cfg.label_noise_rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.patch_seed(ctx));
            for px in data.chunks_exact_mut(c) {
                if rng.gen::<f32>() < self.cfg.label_noise_rate {
                    let top = argmax(px);
                    let mut other = rng.gen_range(0..c - 1);
                    if other >= top {
                        other += 1;
                    }
                    px.swap(top, other);
                }
            }
        }
        Ok(ProbMap::new(ph, pw, c, data)?.normalize_prob()?)
    }
}

/// Box-filter downsampling for integer factors, bilinear otherwise.
fn area_downsample(m: &ProbMap, out_h: usize, out_w: usize) -> ProbMap {
    let (h, w, c) = m.dims();
    if h % out_h != 0 || w % out_w != 0 || (h, w) == (out_h, out_w) {
        return m.resample_bilinear(out_h, out_w);
    }
    let (fy, fx) = (h / out_h, w / out_w);
    let norm = 1.0 / (fy * fx) as f32;
    let mut out = vec![0.0f32; out_h * out_w * c];
    for row in 0..h {
        let orow = row / fy;
        for col in 0..w {
            let o = (orow * out_w + col / fx) * c;
            for (acc, v) in out[o..o + c].iter_mut().zip(m.pixel(row, col)) {
                *acc += v;
            }
        }
    }
    for v in out.iter_mut() {
        *v *= norm;
    }
    ProbMap::new(out_h, out_w, c, out)
        .expect("averages of valid vectors")
        .normalize_prob()
        .expect("averages of normalized vectors are non-zero")
}

/// Separable Gaussian over each channel with edge replication.
fn gaussian_blur(data: &[f32], h: usize, w: usize, c: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; data.len()];
    for row in 0..h {
        for col in 0..w {
            let o = (row * w + col) * c;
            for (ki, k) in kernel.iter().enumerate() {
                let sc = at(col as isize + ki as isize - radius, w);
                let s = (row * w + sc) * c;
                for ch in 0..c {
                    tmp[o + ch] += k * data[s + ch];
                }
            }
        }
    }
    let mut out = vec![0.0f32; data.len()];
    for row in 0..h {
        for col in 0..w {
            let o = (row * w + col) * c;
            for (ki, k) in kernel.iter().enumerate() {
                let sr = at(row as isize + ki as isize - radius, h);
                let s = (sr * w + col) * c;
                for ch in 0..c {
                    out[o + ch] += k * tmp[s + ch];
                }
            }
        }
    }
    out
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{build_scale_plan, GridMode, Window};

    // 32x32 ground truth: class 0 background, a 1px vertical line of class 1
    // at column 9 and a 2px horizontal line of class 2 at rows 20-21.
    fn thin_gt() -> LabelMap {
        let mut d = vec![0u8; 32 * 32];
        for r in 0..32 {
            d[r * 32 + 9] = 1;
        }
        for c in 0..32 {
            d[20 * 32 + c] = 2;
            d[21 * 32 + c] = 2;
        }
        LabelMap::new(32, 32, d).unwrap()
    }

    fn oracle(sigma: f32, noise: f32, softness: f32) -> OracleBackend {
        OracleBackend::new(OracleBackendConfig {
            gt: thin_gt(),
            classes: 3,
            blur_sigma_at_coarsest: sigma,
            label_noise_rate: noise,
            softness,
            seed: 11,
        })
        .unwrap()
    }

    fn plan() -> crate::tiling::ScalePlan {
        build_scale_plan(32, 32, 8, 8, &[(32, 32), (16, 16), (8, 8)], GridMode::Strict).unwrap()
    }

    #[test]
    fn noiseless_finest_is_ground_truth() {
        let plan = plan();
        let o = oracle(0.0, 0.0, 1.0);
        let win = Window::new(8, 16, 8, 8);
        let ctx = PatchContext {
            level: 3,
            window: win,
            plan: &plan,
        };
        let out = o.segment(&Image::new(8, 8, vec![0.0; 192]).unwrap(), &ctx).unwrap();
        let expect = ProbMap::one_hot(&extract_patch(&thin_gt(), win).unwrap(), 3).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn coarse_blur_lowers_accuracy_on_detailed_fixture() {
        let spec = crate::fixtures::FixtureSpec {
            seed: 5,
            count: 1,
            size: 128,
            classes: 4,
            detail_scale: 2.0,
        };
        let (_, gt) = crate::fixtures::generate(&spec, 0);
        let plan = build_scale_plan(128, 128, 32, 32, &[(128, 128), (64, 64), (32, 32)], GridMode::Strict).unwrap();
        let ctx = PatchContext {
            level: 1,
            window: Window::new(0, 0, 128, 128),
            plan: &plan,
        };
        let img = Image::new(32, 32, vec![0.0; 32 * 32 * 3]).unwrap();
        let accuracy = |sigma: f32| {
            let o = OracleBackend::new(OracleBackendConfig {
                gt: gt.clone(),
                classes: 4,
                blur_sigma_at_coarsest: sigma,
                label_noise_rate: 0.0,
                softness: 1.0,
                seed: 1,
            })
            .unwrap();
            let pred = o.segment(&img, &ctx).unwrap().resample_bilinear(128, 128).argmax_labels();
            let hits = pred.data().iter().zip(gt.data()).filter(|(a, b)| a == b).count();
            hits as f64 / gt.data().len() as f64
        };
        let (sharp, blurred) = (accuracy(0.0), accuracy(2.0));
        assert!(blurred < sharp, "blurred {blurred} vs sharp {sharp}");
    }

    #[test]
    fn sigma_schedule() {
        let plan = plan();
        let o = oracle(2.0, 0.0, 1.0);
        let sig = |level| {
            o.sigma_for(&PatchContext {
                level,
                window: Window::new(0, 0, 8, 8),
                plan: &plan,
            })
        };
        assert_eq!(sig(1), 2.0);
        assert!((sig(2) - 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(sig(3), 0.0);
    }

    #[test]
    fn seeded_output_is_bit_identical_and_valid() {
        let plan = plan();
        let o = oracle(1.5, 0.2, 0.8);
        let ctx = PatchContext {
            level: 2,
            window: Window::new(16, 0, 16, 16),
            plan: &plan,
        };
        let img = Image::new(8, 8, vec![0.3; 192]).unwrap();
        let a = o.segment(&img, &ctx).unwrap();
        let b = o.segment(&img, &ctx).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.validate(1e-5).is_ok());
    }

    #[test]
    fn rejects_bad_config() {
        let mk = |noise: f32, soft: f32| {
            OracleBackend::new(OracleBackendConfig {
                gt: thin_gt(),
                classes: 3,
                blur_sigma_at_coarsest: 1.0,
                label_noise_rate: noise,
                softness: soft,
                seed: 0,
            })
        };
        assert!(mk(1.0, 1.0).is_err());
        assert!(mk(0.0, 0.0).is_err());
        assert!(mk(0.1, 0.5).is_ok());
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let l = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let d = area_downsample(&ProbMap::one_hot(&l, 2).unwrap(), 1, 1);
        assert_eq!(d.data(), &[0.25, 0.75]);
    }
}
