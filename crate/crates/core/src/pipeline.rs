//! Coarse-to-fine refinement over the scale plan.
//!
//! Stage 1 segments the whole canvas at the processing size and upsamples
//! the result. Every later stage walks its window grid: crop image and
//! running map, shrink both to the processing size, segment, combine,
//! replace the top-k scored pixels, grow back and paste. Windows within a
//! stage are disjoint, so they may run on a worker pool and still assemble
//! deterministically.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Combiner, PatchContext, SegmentationBackend};
use crate::eval::{ConfusionMatrix, EvalError};
use crate::select::{score_map, select_top_k, selective_replace, uncertainty_map, ScoreStrategy, SelectError};
use crate::tensor::{Image, LabelMap, Planar, ProbMap, Resample, ScalarMap, IGNORE_INDEX};
use crate::tiling::{extract_patch, pad_edge, paste_patch, GridMode, ScalePlan, TilingError, Window};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which map supplies replacement vectors at selected pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ReplaceSource {
    /// The combined map.
    #[default]
    R,
    /// The scale-specific segmentation.
    O,
}

/// Budgeted mode: a subset of levels, and only the most uncertain windows
/// at each of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FastConfig {
    pub scale_subset: Vec<usize>,
    pub patches_per_scale: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub plan: ScalePlan,
    pub grid_mode: GridMode,
    /// Points replaced per processed patch.
    pub k: usize,
    pub strategy: ScoreStrategy,
    pub replace_source: ReplaceSource,
    pub fast: Option<FastConfig>,
    pub workers: usize,
}

impl PipelineConfig {
    pub fn new(plan: ScalePlan) -> Self {
        Self {
            plan,
            grid_mode: GridMode::Strict,
            k: 1 << 16,
            strategy: ScoreStrategy::default(),
            replace_source: ReplaceSource::R,
            fast: None,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.workers == 0 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        if let Some(fast) = &self.fast {
            let m = self.plan.depth();
            if !fast.scale_subset.contains(&1) {
                return Err(PipelineError::Config("fast scale subset must include level 1".into()));
            }
            if let Some(&bad) = fast.scale_subset.iter().find(|&&s| s == 0 || s > m) {
                return Err(PipelineError::Config(format!(
                    "fast scale subset level {bad} outside 1..={m}"
                )));
            }
            if fast.scale_subset.windows(2).any(|p| p[1] <= p[0]) {
                return Err(PipelineError::Config("fast scale subset must be strictly increasing".into()));
            }
        }
        Ok(())
    }

    /// Levels run after stage 1, in order.
    pub fn refinement_levels(&self) -> Vec<usize> {
        match &self.fast {
            Some(f) => f.scale_subset.iter().copied().filter(|&s| s > 1).collect(),
            None => (2..=self.plan.depth()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub level: usize,
    pub patches: usize,
    pub points_replaced: usize,
    pub wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

/// Full-resolution outputs of one run, one map per processed stage.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub stages: Vec<ProbMap>,
    pub reports: Vec<StageReport>,
}

impl RunOutput {
    pub fn final_map(&self) -> &ProbMap {
        self.stages.last().expect("a run has at least one stage")
    }

    pub fn patches_segmented(&self) -> usize {
        self.reports.iter().map(|r| r.patches).sum()
    }
}

struct StageStats {
    patches: usize,
    points: usize,
}

pub struct Pipeline<'a> {
    cfg: &'a PipelineConfig,
    backend: &'a dyn SegmentationBackend,
    combiner: &'a dyn Combiner,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        cfg: &'a PipelineConfig,
        backend: &'a dyn SegmentationBackend,
        combiner: &'a dyn Combiner,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let pool = if cfg.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            cfg,
            backend,
            combiner,
            pool,
        })
    }

    /// Runs every stage on `image`. When `gt` is given, each report carries
    /// the stage mIoU.
    pub fn run(&self, image: &Image, gt: Option<&LabelMap>) -> Result<RunOutput, PipelineError> {
        let (h, w) = (image.height(), image.width());
        let canvas = self.cfg.plan.canvas();
        let padded;
        let image = if (h, w) == canvas {
            image
        } else if self.cfg.grid_mode == GridMode::Pad && h <= canvas.0 && w <= canvas.1 {
            padded = pad_edge(image, canvas.0, canvas.1);
            &padded
        } else {
            return Err(PipelineError::Config(format!(
                "image is {h}x{w} but the plan canvas is {}x{}",
                canvas.0, canvas.1
            )));
        };
        let crop = |m: &ProbMap| -> Result<ProbMap, PipelineError> {
            if (h, w) == canvas {
                Ok(m.clone())
            } else {
                Ok(extract_patch(m, Window::new(0, 0, w, h))?)
            }
        };
        let classes = self.backend.classes();
        let score = |m: &ProbMap| -> Result<Option<f64>, PipelineError> {
            match gt {
                Some(gt) => {
                    let mut cm = ConfusionMatrix::new(classes);
                    cm.accumulate(&m.argmax_labels(), gt, IGNORE_INDEX)?;
                    Ok(Some(cm.miou()?))
                }
                None => Ok(None),
            }
        };

        let started = Instant::now();
        let mut y = self.initial_segmentation(image)?;
        let first = crop(&y)?;
        let mut reports = vec![StageReport {
            level: 1,
            patches: 1,
            points_replaced: 0,
            wall_seconds: started.elapsed().as_secs_f64(),
            miou: score(&first)?,
        }];
        let mut stages = vec![first];

        for s in self.cfg.refinement_levels() {
            let started = Instant::now();
            let all = self.cfg.plan.windows(s)?;
            let windows = match &self.cfg.fast {
                Some(f) => fast_patch_subset(&uncertainty_map(&y), &all, f.patches_per_scale),
                None => all,
            };
            let (next, stats) = self.stage(&y, image, s, &windows)?;
            y = next;
            let out = crop(&y)?;
            reports.push(StageReport {
                level: s,
                patches: stats.patches,
                points_replaced: stats.points,
                wall_seconds: started.elapsed().as_secs_f64(),
                miou: score(&out)?,
            });
            stages.push(out);
        }
        Ok(RunOutput { stages, reports })
    }

    /// Whole-canvas segmentation at the processing size, upsampled back.
    pub fn initial_segmentation(&self, image: &Image) -> Result<ProbMap, PipelineError> {
        let plan = &self.cfg.plan;
        let (ph, pw) = plan.proc_size();
        let (ch, cw) = plan.canvas();
        let ctx = PatchContext {
            level: 1,
            window: Window::new(0, 0, cw, ch),
            plan,
        };
        let o = self.backend.segment(&image.resample_bilinear(ph, pw), &ctx)?;
        check_output(&o, (ph, pw), self.backend.classes())?;
        Ok(o.resample_bilinear(ch, cw))
    }

    /// One refinement stage at level `s` over every window of the level.
    pub fn run_stage(&self, y_prev: &ProbMap, image: &Image, s: usize) -> Result<ProbMap, PipelineError> {
        if s < 2 {
            return Err(PipelineError::Config("refinement stages start at level 2".into()));
        }
        let windows = self.cfg.plan.windows(s)?;
        Ok(self.stage(y_prev, image, s, &windows)?.0)
    }

    fn stage(
        &self,
        y_prev: &ProbMap,
        image: &Image,
        s: usize,
        windows: &[Window],
    ) -> Result<(ProbMap, StageStats), PipelineError> {
        let canvas = self.cfg.plan.canvas();
        if (y_prev.height(), y_prev.width()) != canvas || (image.height(), image.width()) != canvas {
            return Err(PipelineError::Config(format!(
                "stage inputs must match the canvas {}x{}",
                canvas.0, canvas.1
            )));
        }
        let work = |win: &Window| self.refine_window(y_prev, image, s, *win);
        let results: Vec<Result<(ProbMap, usize), PipelineError>> = match &self.pool {
            Some(pool) => pool.install(|| windows.par_iter().map(work).collect()),
            None => windows.iter().map(work).collect(),
        };
        let mut y = y_prev.clone();
        let mut points = 0;
        for (win, res) in windows.iter().zip(results) {
            let (patch, n) = res?;
            paste_patch(&mut y, *win, &patch)?;
            points += n;
        }
        Ok((
            y,
            StageStats {
                patches: windows.len(),
                points,
            },
        ))
    }

    fn refine_window(
        &self,
        y_prev: &ProbMap,
        image: &Image,
        s: usize,
        win: Window,
    ) -> Result<(ProbMap, usize), PipelineError> {
        let plan = &self.cfg.plan;
        let (ph, pw) = plan.proc_size();
        let x_small = extract_patch(image, win)?.resample_bilinear(ph, pw);
        let y_small = extract_patch(y_prev, win)?.resample_bilinear(ph, pw);
        let ctx = PatchContext { level: s, window: win, plan };
        let o = self.backend.segment(&x_small, &ctx)?;
        check_output(&o, (ph, pw), y_small.classes())?;
        let r = self.combiner.combine(&y_small, &o)?;
        check_output(&r, (ph, pw), y_small.classes())?;

        let q = score_map(&uncertainty_map(&y_small), &uncertainty_map(&r), &self.cfg.strategy)?;
        let points = select_top_k(&q, self.cfg.k);
        let source = match self.cfg.replace_source {
            ReplaceSource::R => &r,
            ReplaceSource::O => &o,
        };
        let refined = selective_replace(&y_small, source, &points)?;
        Ok((refined.resample_bilinear(win.h, win.w), points.len()))
    }
}

fn check_output(m: &ProbMap, size: (usize, usize), classes: usize) -> Result<(), BackendError> {
    if m.dims() != (size.0, size.1, classes) {
        return Err(BackendError::Failure(format!(
            "module returned dims {:?}, expected {:?}",
            m.dims(),
            (size.0, size.1, classes)
        )));
    }
    m.validate(crate::backend::PROB_TOLERANCE)?;
    Ok(())
}

/// The `n` windows with the highest mean of `yu_full`, returned in
/// enumeration order. Equal means prefer earlier windows.
pub fn fast_patch_subset(yu_full: &ScalarMap, windows: &[Window], n: usize) -> Vec<Window> {
    if n >= windows.len() {
        return windows.to_vec();
    }
    let means: Vec<f64> = windows.iter().map(|w| window_mean(yu_full, w)).collect();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    order.truncate(n);
    order.sort_unstable();
    order.into_iter().map(|i| windows[i]).collect()
}

fn window_mean(m: &ScalarMap, w: &Window) -> f64 {
    let width = m.width();
    let data = m.data();
    let mut sum = 0.0f64;
    for row in w.y..w.y + w.h {
        let start = row * width + w.x;
        sum += data[start..start + w.w].iter().map(|&v| v as f64).sum::<f64>();
    }
    sum / w.area() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CombinerKind, ConstantBackend};
    use crate::tiling::{build_scale_plan, grid_windows};

    #[test]
    fn fast_subset_examples() {
        let wins = grid_windows(8, 8, 4, 4).unwrap();
        let zeros = ScalarMap::filled(8, 8, 0.0);
        assert_eq!(fast_patch_subset(&zeros, &wins, 2), wins[..2].to_vec());
        assert_eq!(fast_patch_subset(&zeros, &wins, 9), wins);

        let mut d = vec![0.0; 64];
        for r in 4..8 {
            for c in 0..4 {
                d[r * 8 + c] = 0.9;
            }
        }
        d[7] = 1.0;
        let yu = ScalarMap::new(8, 8, d).unwrap();
        // Window 2 (bottom-left) has mean 0.9, window 1 has mean 1/16.
        assert_eq!(fast_patch_subset(&yu, &wins, 2), vec![wins[1], wins[2]]);
    }

    #[test]
    fn fast_subset_matches_sort_oracle() {
        let wins = grid_windows(16, 16, 4, 4).unwrap();
        let mut s = 7u64;
        let d: Vec<f32> = (0..256)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 40) as f32 / (1u64 << 24) as f32
            })
            .collect();
        let yu = ScalarMap::new(16, 16, d.clone()).unwrap();
        let mut scored: Vec<(f64, usize)> = wins
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let mut sum = 0.0;
                for r in w.y..w.y + w.h {
                    for c in w.x..w.x + w.w {
                        sum += d[r * 16 + c] as f64;
                    }
                }
                (sum / 16.0, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut top: Vec<usize> = scored.iter().take(3).map(|x| x.1).collect();
        top.sort();
        let expect: Vec<Window> = top.into_iter().map(|i| wins[i]).collect();
        assert_eq!(fast_patch_subset(&yu, &wins, 3), expect);
    }

    #[test]
    fn config_validation() {
        let plan = build_scale_plan(16, 16, 4, 4, &[(16, 16), (8, 8), (4, 4)], GridMode::Strict).unwrap();
        let mut cfg = PipelineConfig::new(plan);
        assert!(cfg.validate().is_ok());
        cfg.fast = Some(FastConfig {
            scale_subset: vec![2, 3],
            patches_per_scale: 1,
        });
        assert!(cfg.validate().is_err());
        cfg.fast = Some(FastConfig {
            scale_subset: vec![1, 4],
            patches_per_scale: 1,
        });
        assert!(cfg.validate().is_err());
        cfg.fast = Some(FastConfig {
            scale_subset: vec![1, 3],
            patches_per_scale: 1,
        });
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.refinement_levels(), vec![3]);
    }

    #[test]
    fn constant_backend_run_shapes() {
        let plan = build_scale_plan(16, 8, 4, 2, &[(16, 8), (8, 4), (4, 2)], GridMode::Strict).unwrap();
        let cfg = PipelineConfig::new(plan);
        let backend = ConstantBackend::new(1, 3).unwrap();
        let comb = CombinerKind::Mean;
        let p = Pipeline::new(&cfg, &backend, &comb).unwrap();
        let img = Image::new(16, 8, vec![0.2; 16 * 8 * 3]).unwrap();
        let out = p.run(&img, None).unwrap();
        assert_eq!(out.stages.len(), 3);
        assert_eq!(out.patches_segmented(), 1 + 4 + 16);
        for m in &out.stages {
            assert_eq!(m.dims(), (16, 8, 3));
            assert!(m.validate(1e-5).is_ok());
        }
        assert!(p.run_stage(out.final_map(), &img, 1).is_err());
    }

    #[test]
    fn pad_mode_crops_back() {
        let plan = build_scale_plan(14, 6, 4, 2, &[(16, 8), (8, 4), (4, 2)], GridMode::Pad).unwrap();
        let mut cfg = PipelineConfig::new(plan);
        cfg.grid_mode = GridMode::Pad;
        let backend = ConstantBackend::new(0, 2).unwrap();
        let p = Pipeline::new(&cfg, &backend, &CombinerKind::Mean).unwrap();
        let img = Image::new(14, 6, vec![0.5; 14 * 6 * 3]).unwrap();
        let out = p.run(&img, None).unwrap();
        assert!(out.stages.iter().all(|m| m.dims() == (14, 6, 2)));
    }
}
