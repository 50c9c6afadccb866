//! Pipeline invariants checked against a stage rebuilt from public
//! primitives.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use magnify::backend::{
    Combiner, CombinerKind, ConstantBackend, OracleBackend, OracleBackendConfig, PatchContext, SegmentationBackend,
};
use magnify::eval::ConfusionMatrix;
use magnify::fixtures::{generate, FixtureSpec};
use magnify::pipeline::{FastConfig, Pipeline, PipelineConfig, ReplaceSource};
use magnify::select::{score_map, select_top_k, selective_replace, uncertainty_map, PixelCoord};
use magnify::tensor::{Image, LabelMap, ProbMap, Resample, IGNORE_INDEX};
use magnify::tiling::{build_scale_plan, extract_patch, paste_patch, GridMode, ScalePlan, Window};

const SPEC: FixtureSpec = FixtureSpec {
    seed: 21,
    count: 2,
    size: 128,
    classes: 4,
    detail_scale: 1.0,
};

fn plan() -> ScalePlan {
    build_scale_plan(128, 128, 32, 32, &[(128, 128), (64, 64), (32, 32)], GridMode::Strict).unwrap()
}

fn oracle(gt: &LabelMap) -> OracleBackend {
    OracleBackend::new(OracleBackendConfig {
        gt: gt.clone(),
        classes: SPEC.classes,
        blur_sigma_at_coarsest: 2.0,
        label_noise_rate: 0.05,
        softness: 0.9,
        seed: 3,
    })
    .unwrap()
}

/// One stage assembled by hand, visiting windows in `order`. Returns the
/// map and the selected points in canvas coordinates (meaningful when no
/// resampling happens).
fn manual_stage(
    cfg: &PipelineConfig,
    backend: &dyn SegmentationBackend,
    combiner: &dyn Combiner,
    y_prev: &ProbMap,
    image: &Image,
    s: usize,
    order: &[Window],
) -> (ProbMap, HashSet<(usize, usize)>) {
    let (ph, pw) = cfg.plan.proc_size();
    let mut y = y_prev.clone();
    let mut chosen = HashSet::new();
    for &win in order {
        let x = extract_patch(image, win).unwrap().resample_bilinear(ph, pw);
        let yp = extract_patch(y_prev, win).unwrap().resample_bilinear(ph, pw);
        let ctx = PatchContext {
            level: s,
            window: win,
            plan: &cfg.plan,
        };
        let o = backend.segment(&x, &ctx).unwrap();
        let r = combiner.combine(&yp, &o).unwrap();
        let q = score_map(&uncertainty_map(&yp), &uncertainty_map(&r), &cfg.strategy).unwrap();
        let pts = select_top_k(&q, cfg.k);
        chosen.extend(pts.iter().map(|PixelCoord { row, col }| (win.y + row, win.x + col)));
        let src = match cfg.replace_source {
            ReplaceSource::R => &r,
            ReplaceSource::O => &o,
        };
        let patch = selective_replace(&yp, src, &pts).unwrap().resample_bilinear(win.h, win.w);
        paste_patch(&mut y, win, &patch).unwrap();
    }
    (y, chosen)
}

#[test]
fn stage_matches_manual_assembly_in_any_order() {
    let (image, gt) = generate(&SPEC, 0);
    let backend = oracle(&gt);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for source in [ReplaceSource::R, ReplaceSource::O] {
        let mut cfg = PipelineConfig::new(plan());
        cfg.k = 200;
        cfg.replace_source = source;
        let p = Pipeline::new(&cfg, &backend, &CombinerKind::Mean).unwrap();
        let mut y = p.initial_segmentation(&image).unwrap();
        for s in 2..=3 {
            let mut order = cfg.plan.windows(s).unwrap();
            order.shuffle(&mut rng);
            let (manual, _) = manual_stage(&cfg, &backend, &CombinerKind::Mean, &y, &image, s, &order);
            let staged = p.run_stage(&y, &image, s).unwrap();
            assert_eq!(staged, manual, "level {s}, {source:?}");
            y = staged;
        }
    }
}

#[test]
fn finest_stage_changes_only_selected_points() {
    let (image, gt) = generate(&SPEC, 1);
    let backend = oracle(&gt);
    let mut cfg = PipelineConfig::new(plan());
    cfg.k = 50;
    let p = Pipeline::new(&cfg, &backend, &CombinerKind::ConfidenceGate).unwrap();
    let y1 = p.initial_segmentation(&image).unwrap();
    let y2 = p.run_stage(&y1, &image, 2).unwrap();
    let y3 = p.run_stage(&y2, &image, 3).unwrap();
    let order = cfg.plan.windows(3).unwrap();
    let (_, chosen) = manual_stage(&cfg, &backend, &CombinerKind::ConfidenceGate, &y2, &image, 3, &order);
    assert_eq!(chosen.len(), 16 * 50);
    let mut changed = 0;
    for row in 0..128 {
        for col in 0..128 {
            if y3.pixel(row, col) != y2.pixel(row, col) {
                changed += 1;
                assert!(chosen.contains(&(row, col)), "({row}, {col}) changed without selection");
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn worker_counts_give_identical_maps() {
    let (image, gt) = generate(&SPEC, 0);
    let backend = oracle(&gt);
    let mut outputs = Vec::new();
    for workers in [1, 3, 8] {
        let mut cfg = PipelineConfig::new(plan());
        cfg.k = 300;
        cfg.workers = workers;
        let out = Pipeline::new(&cfg, &backend, &CombinerKind::Mean).unwrap().run(&image, None).unwrap();
        outputs.push(out.stages);
    }
    assert!(outputs.windows(2).all(|p| p[0] == p[1]));
}

#[test]
fn every_stage_is_full_resolution_and_normalized() {
    let (image, gt) = generate(&SPEC, 0);
    let backend = oracle(&gt);
    let cfg = PipelineConfig::new(plan());
    let out = Pipeline::new(&cfg, &backend, &CombinerKind::Mean).unwrap().run(&image, Some(&gt)).unwrap();
    assert_eq!(out.stages.len(), 3);
    for (stage, report) in out.stages.iter().zip(&out.reports) {
        assert_eq!(stage.dims(), (128, 128, 4));
        stage.validate(1e-5).unwrap();
        let miou = report.miou.unwrap();
        assert!((0.0..=1.0).contains(&miou));
    }
    let patches: Vec<usize> = out.reports.iter().map(|r| r.patches).collect();
    assert_eq!(patches, vec![1, 4, 16]);
}

#[test]
fn only_level_one_is_a_single_whole_image_window() {
    // Levels strictly shrink from the canvas, so a one-window grid exists
    // only at level 1, which is the initial segmentation rather than a stage.
    let (image, gt) = generate(&SPEC, 0);
    let backend = oracle(&gt);
    let cfg = PipelineConfig::new(plan());
    assert_eq!(cfg.plan.windows(1).unwrap(), vec![Window::new(0, 0, 128, 128)]);
    assert!((2..=3).all(|s| cfg.plan.windows(s).unwrap().len() > 1));
    let p = Pipeline::new(&cfg, &backend, &CombinerKind::Mean).unwrap();
    let y1 = p.initial_segmentation(&image).unwrap();
    assert!(p.run_stage(&y1, &image, 1).is_err());
}

#[test]
fn fast_mode_processes_a_subset_of_each_grid() {
    let (image, gt) = generate(&SPEC, 0);
    let backend = oracle(&gt);
    let mut cfg = PipelineConfig::new(plan());
    cfg.fast = Some(FastConfig {
        scale_subset: vec![1, 3],
        patches_per_scale: 5,
    });
    let out = Pipeline::new(&cfg, &backend, &CombinerKind::Mean).unwrap().run(&image, None).unwrap();
    let levels: Vec<usize> = out.reports.iter().map(|r| r.level).collect();
    assert_eq!(levels, vec![1, 3]);
    assert_eq!(out.patches_segmented(), 6);

    // Unprocessed windows keep the previous map exactly.
    let y1 = &out.stages[0];
    let y3 = &out.stages[1];
    let untouched = cfg
        .plan
        .windows(3)
        .unwrap()
        .into_iter()
        .filter(|w| extract_patch(y1, *w).unwrap() == extract_patch(y3, *w).unwrap())
        .count();
    assert!(untouched >= 16 - 5, "{untouched} windows unchanged");
}

#[test]
fn k_zero_keeps_every_finest_stage_identical() {
    let (image, gt) = generate(&SPEC, 1);
    let backend = oracle(&gt);
    let mut cfg = PipelineConfig::new(plan());
    cfg.k = 0;
    let out = Pipeline::new(&cfg, &backend, &CombinerKind::Mean).unwrap().run(&image, None).unwrap();
    assert_eq!(out.stages[2], out.stages[1]);
    assert_eq!(out.reports.iter().map(|r| r.points_replaced).sum::<usize>(), 0);
}

#[test]
fn detail_free_fixtures_are_easy_for_the_baseline() {
    // Noiseless oracle, no thin structures: the downsampled baseline alone
    // must already be accurate.
    let spec = FixtureSpec {
        seed: 9,
        count: 4,
        size: 512,
        classes: 5,
        detail_scale: 0.0,
    };
    let plan = build_scale_plan(512, 512, 128, 128, &[(512, 512), (256, 256), (128, 128)], GridMode::Strict).unwrap();
    let cfg = PipelineConfig::new(plan);
    let mut cm = ConfusionMatrix::new(5);
    for i in 0..spec.count {
        let (image, gt) = generate(&spec, i);
        assert!(gt.data().iter().all(|&l| l < 4));
        let backend = OracleBackend::new(OracleBackendConfig {
            gt: gt.clone(),
            classes: 5,
            blur_sigma_at_coarsest: 0.0,
            label_noise_rate: 0.0,
            softness: 1.0,
            seed: 0,
        })
        .unwrap();
        let y1 = Pipeline::new(&cfg, &backend, &CombinerKind::Mean)
            .unwrap()
            .initial_segmentation(&image)
            .unwrap();
        cm.accumulate(&y1.argmax_labels(), &gt, IGNORE_INDEX).unwrap();
    }
    let miou = cm.miou().unwrap();
    assert!(miou >= 0.95, "baseline mIoU {miou}");
}

#[test]
fn cityscapes_shaped_runs_count_patches() {
    let plan = build_scale_plan(64, 128, 8, 16, &[(64, 128), (32, 64), (16, 32), (8, 16)], GridMode::Strict).unwrap();
    let backend = ConstantBackend::new(2, 3).unwrap();
    let image = Image::new(64, 128, vec![0.1; 64 * 128 * 3]).unwrap();
    let mut cfg = PipelineConfig::new(plan);
    let full = Pipeline::new(&cfg, &backend, &CombinerKind::Mean).unwrap().run(&image, None).unwrap();
    assert_eq!(full.patches_segmented(), 85);
    cfg.fast = Some(FastConfig {
        scale_subset: vec![1, 2, 4],
        patches_per_scale: 3,
    });
    let fast = Pipeline::new(&cfg, &backend, &CombinerKind::Mean).unwrap().run(&image, None).unwrap();
    assert_eq!(fast.patches_segmented(), 7);
    assert_eq!(fast.reports.iter().map(|r| r.level).collect::<Vec<_>>(), vec![1, 2, 4]);
}

#[test]
fn pad_mode_matches_canvas_run_on_padded_input() {
    let (image, gt) = generate(&SPEC, 0);
    let small = extract_patch(&image, Window::new(0, 0, 120, 100)).unwrap();
    let small_gt = extract_patch(&gt, Window::new(0, 0, 120, 100)).unwrap();
    let pad_plan = build_scale_plan(100, 120, 32, 32, &[(128, 128), (64, 64), (32, 32)], GridMode::Pad).unwrap();
    let mut cfg = PipelineConfig::new(pad_plan);
    cfg.grid_mode = GridMode::Pad;
    cfg.k = 100;
    let padded_gt = magnify::tiling::pad_edge(&small_gt, 128, 128);
    let backend = oracle(&padded_gt);
    let out = Pipeline::new(&cfg, &backend, &CombinerKind::Mean).unwrap().run(&small, None).unwrap();
    assert_eq!(out.final_map().dims(), (100, 120, 4));

    let padded = magnify::tiling::pad_edge(&small, 128, 128);
    let mut strict = cfg.clone();
    strict.grid_mode = GridMode::Strict;
    strict.plan = plan();
    let full = Pipeline::new(&strict, &backend, &CombinerKind::Mean).unwrap().run(&padded, None).unwrap();
    assert_eq!(&extract_patch(full.final_map(), Window::new(0, 0, 120, 100)).unwrap(), out.final_map());
}
