//! TOML run configuration.
//!
//! ```toml
//! seed = 7                 # required when the backend is stochastic
//! workers = 1
//!
//! [image]
//! height = 512
//! width = 512
//!
//! [plan]
//! levels = [[512, 512], [256, 256], [128, 128]]
//! proc = [128, 128]        # defaults to the last level
//! mode = "strict"          # or "pad"
//!
//! [refine]
//! k = 65536
//! strategy = "product"     # uncertainty_only | certainty_only | product | linear
//! alpha = 0.5              # linear only
//! median_kernel = 3
//! replace_source = "R"     # or "O"
//! combiner = "mean"        # passthrough_o | mean | confidence_gate | external
//!
//! [backend]
//! kind = "oracle"          # oracle | constant | external
//! classes = 5
//! labels = "gt.png"        # oracle only; `run --labels` overrides
//! blur_sigma_at_coarsest = 2.0
//! label_noise_rate = 0.02
//! softness = 1.0
//!
//! [fast]
//! scales = [1, 2, 3]
//! patches_per_scale = 3
//! ```
//!
//! An external backend takes `command = ["prog", "arg"]`, `timeout_secs`
//! and `endpoints = "shared" | "per_worker"`. A constant backend takes
//! `class`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Combiner, CombinerKind, ConstantBackend, EndpointPool, ExternalBackend, ExternalCombiner, OracleBackend,
    OracleBackendConfig, SegmentationBackend,
};
use crate::pipeline::{FastConfig, PipelineConfig, PipelineError, ReplaceSource};
use crate::select::{ScoreKind, ScoreStrategy};
use crate::tensor::{LabelMap, Planar};
use crate::tiling::{build_scale_plan, pad_edge, GridMode, ScalePlan, TilingError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config ({invariant}): {message}")]
    Validation {
        invariant: &'static str,
        message: String,
    },
}

fn invalid(invariant: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        invariant,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub workers: usize,
    pub image: ImageSection,
    pub plan: PlanSection,
    #[serde(default)]
    pub refine: RefineSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fast: Option<FastSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSection {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub levels: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proc: Option<[usize; 2]>,
    #[serde(default)]
    pub mode: GridMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_strategy")]
    pub strategy: ScoreKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
    #[serde(default = "default_kernel")]
    pub median_kernel: usize,
    #[serde(default)]
    pub replace_source: ReplaceSource,
    #[serde(default)]
    pub combiner: CombinerChoice,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            k: default_k(),
            strategy: default_strategy(),
            alpha: None,
            median_kernel: default_kernel(),
            replace_source: ReplaceSource::R,
            combiner: CombinerChoice::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerChoice {
    PassthroughO,
    #[default]
    Mean,
    ConfidenceGate,
    /// The combine operation of the external backend process.
    External,
}

impl CombinerChoice {
    pub fn builtin(self) -> Option<CombinerKind> {
        match self {
            CombinerChoice::PassthroughO => Some(CombinerKind::PassthroughO),
            CombinerChoice::Mean => Some(CombinerKind::Mean),
            CombinerChoice::ConfidenceGate => Some(CombinerKind::ConfidenceGate),
            CombinerChoice::External => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Oracle {
        classes: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<PathBuf>,
        #[serde(default)]
        blur_sigma_at_coarsest: f32,
        #[serde(default)]
        label_noise_rate: f32,
        #[serde(default = "one_f32")]
        softness: f32,
    },
    Constant {
        classes: usize,
        class: usize,
    },
    External {
        classes: usize,
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default)]
        endpoints: EndpointMode,
    },
}

impl BackendSpec {
    pub fn classes(&self) -> usize {
        match self {
            BackendSpec::Oracle { classes, .. }
            | BackendSpec::Constant { classes, .. }
            | BackendSpec::External { classes, .. } => *classes,
        }
    }

    fn is_stochastic(&self) -> bool {
        matches!(self, BackendSpec::Oracle { label_noise_rate, .. } if *label_noise_rate > 0.0)
    }
}

/// How many external processes serve a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointMode {
    /// One process; calls are serialized.
    #[default]
    Shared,
    /// One process per worker.
    PerWorker,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FastSection {
    pub scales: Vec<usize>,
    #[serde(default = "default_patches")]
    pub patches_per_scale: usize,
}

fn one() -> usize {
    1
}
fn one_f32() -> f32 {
    1.0
}
fn default_k() -> usize {
    1 << 16
}
fn default_strategy() -> ScoreKind {
    ScoreKind::Product
}
fn default_kernel() -> usize {
    3
}
fn default_timeout() -> f64 {
    30.0
}
fn default_patches() -> usize {
    3
}

impl RunConfig {
    pub fn proc_size(&self) -> Option<(usize, usize)> {
        self.plan
            .proc
            .or_else(|| self.plan.levels.last().copied())
            .map(|[h, w]| (h, w))
    }

    pub fn scale_plan(&self) -> Result<ScalePlan, ConfigError> {
        let levels: Vec<(usize, usize)> = self.plan.levels.iter().map(|&[h, w]| (h, w)).collect();
        let (ph, pw) = self.proc_size().ok_or_else(|| tiling_invalid(TilingError::EmptyLevels))?;
        build_scale_plan(self.image.height, self.image.width, ph, pw, &levels, self.plan.mode).map_err(tiling_invalid)
    }

    pub fn strategy(&self) -> Result<ScoreStrategy, ConfigError> {
        ScoreStrategy::new(self.refine.strategy, self.refine.alpha, self.refine.median_kernel)
            .map_err(|e| invalid("ScoreStrategy", e.to_string()))
    }

    /// The fast section, or the default subset `{1, 2, m}` with three
    /// patches per scale when `force` is set and none is configured.
    pub fn fast_config(&self, force: bool) -> Option<FastConfig> {
        match (&self.fast, force) {
            (Some(f), _) => Some(FastConfig {
                scale_subset: f.scales.clone(),
                patches_per_scale: f.patches_per_scale,
            }),
            (None, true) => {
                let m = self.plan.levels.len();
                let mut scales: Vec<usize> = [1, 2, m].into_iter().filter(|&s| s <= m).collect();
                scales.dedup();
                Some(FastConfig {
                    scale_subset: scales,
                    patches_per_scale: default_patches(),
                })
            }
            (None, false) => None,
        }
    }

    pub fn pipeline_config(&self, force_fast: bool) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = PipelineConfig::new(self.scale_plan()?);
        cfg.grid_mode = self.plan.mode;
        cfg.k = self.refine.k;
        cfg.strategy = self.strategy()?;
        cfg.replace_source = self.refine.replace_source;
        cfg.fast = self.fast_config(force_fast);
        cfg.workers = self.workers;
        cfg.validate().map_err(|e| invalid("PipelineConfig", e.to_string()))?;
        Ok(cfg)
    }

    /// Checks every invariant that does not need files or processes.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline_config(false)?;
        if let Some(b) = &self.backend {
            let c = b.classes();
            if !(2..=255).contains(&c) {
                return Err(invalid("ClassCount", format!("classes must be in 2..=255, got {c}")));
            }
            match b {
                BackendSpec::Oracle {
                    blur_sigma_at_coarsest,
                    label_noise_rate,
                    softness,
                    ..
                } => {
                    if !(*blur_sigma_at_coarsest >= 0.0 && blur_sigma_at_coarsest.is_finite()) {
                        return Err(invalid("BlurSigma", "blur_sigma_at_coarsest must be >= 0"));
                    }
                    if !(0.0..1.0).contains(label_noise_rate) {
                        return Err(invalid("NoiseRate", "label_noise_rate must be in [0, 1)"));
                    }
                    if !(*softness > 0.0 && *softness <= 1.0) {
                        return Err(invalid("Softness", "softness must be in (0, 1]"));
                    }
                }
                BackendSpec::Constant { class, classes } if class >= classes => {
                    return Err(invalid("ConstantClass", format!("class {class} >= classes {classes}")));
                }
                BackendSpec::External {
                    command, timeout_secs, ..
                } => {
                    if command.is_empty() {
                        return Err(invalid("ExternalCommand", "command must not be empty"));
                    }
                    if !(*timeout_secs > 0.0 && timeout_secs.is_finite()) {
                        return Err(invalid("Timeout", "timeout_secs must be positive"));
                    }
                }
                _ => {}
            }
            if b.is_stochastic() && self.seed.is_none() {
                return Err(invalid("SeedRequired", "a stochastic backend needs a top-level seed"));
            }
        }
        if self.refine.combiner == CombinerChoice::External && !matches!(self.backend, Some(BackendSpec::External { .. })) {
            return Err(invalid("ExternalCombiner", "combiner = \"external\" needs an external backend"));
        }
        Ok(())
    }

    /// Instantiates the configured backend. An oracle needs `labels`, the
    /// ground truth of the image being processed; it is edge-padded to the
    /// canvas when the plan pads.
    pub fn build_backend(&self, labels: Option<&LabelMap>) -> Result<Box<dyn SegmentationBackend>, PipelineError> {
        let spec = self
            .backend
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no [backend] section".into()))?;
        Ok(match spec {
            BackendSpec::Oracle {
                classes,
                blur_sigma_at_coarsest,
                label_noise_rate,
                softness,
                ..
            } => {
                let gt = labels.ok_or_else(|| PipelineError::Config("the oracle backend needs ground-truth labels".into()))?;
                let (ch, cw) = self.scale_plan().map_err(|e| PipelineError::Config(e.to_string()))?.canvas();
                let gt = if (gt.height(), gt.width()) == (ch, cw) {
                    gt.clone()
                } else if self.plan.mode == GridMode::Pad && gt.height() <= ch && gt.width() <= cw {
                    pad_edge(gt, ch, cw)
                } else {
                    return Err(PipelineError::Config(format!(
                        "labels are {}x{} but the canvas is {ch}x{cw}",
                        gt.height(),
                        gt.width()
                    )));
                };
                Box::new(OracleBackend::new(OracleBackendConfig {
                    gt,
                    classes: *classes,
                    blur_sigma_at_coarsest: *blur_sigma_at_coarsest,
                    label_noise_rate: *label_noise_rate,
                    softness: *softness,
                    seed: self.seed.unwrap_or(0),
                })?)
            }
            BackendSpec::Constant { classes, class } => Box::new(ConstantBackend::new(*class, *classes)?),
            BackendSpec::External { classes, .. } => Box::new(ExternalBackend::new(self.endpoint_pool()?, *classes)),
        })
    }

    pub fn build_combiner(&self) -> Result<Box<dyn Combiner>, PipelineError> {
        match self.refine.combiner.builtin() {
            Some(kind) => Ok(Box::new(kind)),
            None => Ok(Box::new(ExternalCombiner::new(self.endpoint_pool()?))),
        }
    }

    fn endpoint_pool(&self) -> Result<EndpointPool, PipelineError> {
        match &self.backend {
            Some(BackendSpec::External {
                command,
                timeout_secs,
                endpoints,
                ..
            }) => {
                let count = match endpoints {
                    EndpointMode::Shared => 1,
                    EndpointMode::PerWorker => self.workers,
                };
                Ok(EndpointPool::spawn(command, count, Duration::from_secs_f64(*timeout_secs))?)
            }
            _ => Err(PipelineError::Config("no external backend configured".into())),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn tiling_invalid(e: TilingError) -> ConfigError {
    let invariant = match e {
        TilingError::EmptyLevels => "EmptyLevels",
        TilingError::NonMonotonicScales(_) => "NonMonotonicScales",
        TilingError::EndpointsMismatch { .. } => "EndpointsMismatch",
        TilingError::IndivisibleGrid { .. } => "IndivisibleGrid",
        TilingError::NoSuchLevel(_) => "NoSuchLevel",
        TilingError::OutOfBounds { .. } | TilingError::DimMismatch { .. } => "WindowBounds",
    };
    invalid(invariant, e.to_string())
}

/// Parses and validates config text.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| line_col(text, span.start))
            .unwrap_or((0, 0));
        ConfigError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

/// 1-based line and column of byte `offset`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}
