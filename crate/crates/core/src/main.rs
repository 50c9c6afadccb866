use std::fs;
use std::io::{stdin, stdout, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use magnify::backend::protocol::{self, ReferenceMode};
use magnify::config::{parse_config, ConfigError, RunConfig};
use magnify::eval::{cdf_csv, iou_cdf, ConfusionMatrix, EvalError};
use magnify::fixtures::{list_fixtures, make_fixtures, FixtureSpec, LABEL_SUFFIX};
use magnify::io::{self, IoError, RawTensor};
use magnify::manifest::RunManifest;
use magnify::pipeline::{Pipeline, PipelineError};
use magnify::select::{ScoreKind, ScoreStrategy};
use magnify::tensor::{LabelMap, IGNORE_INDEX};
use magnify::tiling::TilingError;

#[derive(Parser)]
#[command(name = "magnify", version, about = "Coarse-to-fine segmentation refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine one image and write the final map, its argmax and stage reports.
    Run {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, env = "MAGNIFY_CONFIG")]
        config: PathBuf,
        /// Ground-truth label PNG; feeds the oracle backend and per-stage mIoU.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write every intermediate stage as `.mgt`.
        #[arg(long)]
        save_stages: Option<PathBuf>,
        /// Process only the most uncertain windows at a subset of levels.
        #[arg(long)]
        fast: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Directory of `<stem>.mgt` or `<stem>_pred.png` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of `<stem>_label.png` files; defaults to `--pred`.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        cdf: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Sweep score strategies, median kernels and k over a fixture directory.
    Ablate {
        #[arg(long, env = "MAGNIFY_CONFIG")]
        config: PathBuf,
        /// Fixture directory of `<stem>_image.png` / `<stem>_label.png` pairs.
        #[arg(long)]
        data: PathBuf,
        /// Entries like `product` or `linear:0.5`.
        #[arg(long, value_delimiter = ',', default_value = "uncertainty_only,certainty_only,product,linear:0.5")]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        kernels: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the window grid of every level.
    TilePlan {
        #[arg(long, env = "MAGNIFY_CONFIG")]
        config: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate a seeded synthetic dataset.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 1.0)]
        detail_scale: f32,
    },
    /// Model-free reference server speaking the external backend protocol on stdio.
    #[command(hide = true)]
    Serve {
        #[arg(long, value_enum, default_value_t = ServeMode::Identity)]
        mode: ServeMode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ServeMode {
    Identity,
    PassthroughO,
}

enum Failure {
    Config(String),
    Backend(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Backend(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Backend(m) | Failure::Io(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Backend(_) => Failure::Backend(e.to_string()),
            PipelineError::Eval(EvalError::EmptyInput) => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::EmptyInput => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<TilingError> for Failure {
    fn from(e: TilingError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            image,
            config,
            labels,
            out,
            save_stages,
            fast,
        } => run(&image, &config, labels.as_deref(), &out, save_stages.as_deref(), fast),
        Command::Eval {
            pred,
            gt,
            classes,
            json,
            cdf,
            bins,
        } => eval(&pred, gt.as_deref().unwrap_or(&pred), classes, json.as_deref(), cdf.as_deref(), bins),
        Command::Ablate {
            config,
            data,
            strategies,
            kernels,
            ks,
            out,
        } => ablate(&config, &data, &strategies, &kernels, &ks, out.as_deref()),
        Command::TilePlan { config, csv } => tile_plan(&config, csv.as_deref()),
        Command::Fixtures {
            out,
            seed,
            count,
            size,
            classes,
            detail_scale,
        } => fixtures(&out, seed, count, size, classes, detail_scale),
        Command::Serve { mode } => serve(mode),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: &Path) -> Result<(RunConfig, Vec<u8>), Failure> {
    let cfg = parse_config(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok((cfg, bytes))
}

/// Labels from the flag, else from the config (relative to the config file).
fn resolve_labels(cfg: &RunConfig, config_path: &Path, flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf).or_else(|| match &cfg.backend {
        Some(magnify::config::BackendSpec::Oracle { labels: Some(p), .. }) => {
            Some(config_path.parent().unwrap_or(Path::new(".")).join(p))
        }
        _ => None,
    })
}

fn run(
    image_path: &Path,
    config_path: &Path,
    labels: Option<&Path>,
    out: &Path,
    save_stages: Option<&Path>,
    fast: bool,
) -> Result<(), Failure> {
    let (cfg, bytes) = load_config(config_path)?;
    let pcfg = cfg.pipeline_config(fast)?;
    let image = io::read_image_png(image_path)?;
    let gt = resolve_labels(&cfg, config_path, labels)
        .map(|p| io::read_label_png(&p))
        .transpose()?;
    let backend = cfg.build_backend(gt.as_ref())?;
    let combiner = cfg.build_combiner()?;
    let pipeline = Pipeline::new(&pcfg, backend.as_ref(), combiner.as_ref())?;
    let result = pipeline.run(&image, gt.as_ref())?;

    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().trim_end_matches("_image").to_string())
        .unwrap_or_else(|| "image".into());
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut outputs = Vec::new();
    let final_path = out.join(format!("{stem}.mgt"));
    io::write_mgt(&final_path, &RawTensor::from(result.final_map()))?;
    outputs.push(final_path);
    let pred_path = out.join(format!("{stem}_pred.png"));
    io::write_label_png(&pred_path, &result.final_map().argmax_labels())?;
    outputs.push(pred_path);
    if let Some(dir) = save_stages {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (map, report) in result.stages.iter().zip(&result.reports) {
            let p = dir.join(format!("{stem}_stage{}.mgt", report.level));
            io::write_mgt(&p, &RawTensor::from(map))?;
            outputs.push(p);
        }
    }

    let mut lines = String::new();
    for r in &result.reports {
        lines.push_str(&serde_json::to_string(r).expect("reports serialize"));
        lines.push('\n');
    }
    print!("{lines}");
    let reports_path = out.join(format!("{stem}_reports.jsonl"));
    write_file(&reports_path, lines.as_bytes())?;
    outputs.push(reports_path);

    let manifest_path = out.join(format!("{stem}_manifest.json"));
    let manifest = RunManifest::new(
        &bytes,
        cfg.seed,
        result.reports,
        outputs.iter().map(|p| p.display().to_string()).collect(),
    );
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&manifest_path, (text + "\n").as_bytes())
}

fn load_prediction(dir: &Path, stem: &str, classes: usize) -> Result<Option<LabelMap>, Failure> {
    let mgt = dir.join(format!("{stem}.mgt"));
    if mgt.exists() {
        let map = io::prob_map_from_raw(io::read_mgt(&mgt)?)?;
        if map.classes() != classes {
            return Err(Failure::Config(format!(
                "{} has {} classes, expected {classes}",
                mgt.display(),
                map.classes()
            )));
        }
        return Ok(Some(map.argmax_labels()));
    }
    let png = dir.join(format!("{stem}_pred.png"));
    if png.exists() {
        return Ok(Some(io::read_label_png(&png)?));
    }
    Ok(None)
}

fn eval(
    pred_dir: &Path,
    gt_dir: &Path,
    classes: usize,
    json_out: Option<&Path>,
    cdf_out: Option<&Path>,
    bins: usize,
) -> Result<(), Failure> {
    let mut stems: Vec<String> = fs::read_dir(gt_dir)
        .map_err(io_err(gt_dir))?
        .flatten()
        .filter_map(|e| {
            e.file_name()
                .to_string_lossy()
                .strip_suffix(LABEL_SUFFIX)
                .map(str::to_string)
        })
        .collect();
    stems.sort();
    let mut total = ConfusionMatrix::new(classes);
    let mut per_image = Vec::new();
    let mut images = Vec::new();
    for stem in stems {
        let Some(pred) = load_prediction(pred_dir, &stem, classes)? else {
            continue;
        };
        let gt = io::read_label_png(&gt_dir.join(format!("{stem}{LABEL_SUFFIX}")))?;
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&pred, &gt, IGNORE_INDEX)?;
        if let Ok(m) = cm.miou() {
            per_image.push(m);
            images.push(json!({ "stem": stem, "miou": m }));
        }
        total += &cm;
    }
    if images.is_empty() {
        return Err(EvalError::EmptyInput.into());
    }
    let report = json!({
        "images": images.len(),
        "miou": total.miou()?,
        "per_class_iou": total.iou_per_class(),
        "per_image": images,
    });
    let text = serde_json::to_string_pretty(&report).expect("json") + "\n";
    print!("{text}");
    if let Some(p) = json_out {
        write_file(p, text.as_bytes())?;
    }
    if let Some(p) = cdf_out {
        write_file(p, cdf_csv(&iou_cdf(&per_image, bins)?).as_bytes())?;
    }
    Ok(())
}

fn parse_strategy(s: &str, kernel: usize) -> Result<ScoreStrategy, Failure> {
    let (kind, alpha) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a.parse::<f32>().map_err(|e| Failure::Config(format!("alpha in {s:?}: {e}")))?)),
        None => (s, None),
    };
    let kind: ScoreKind = kind.parse().map_err(|e: magnify::select::SelectError| Failure::Config(e.to_string()))?;
    ScoreStrategy::new(kind, alpha, kernel).map_err(|e| Failure::Config(e.to_string()))
}

fn ablate(
    config_path: &Path,
    data: &Path,
    strategies: &[String],
    kernels: &[usize],
    ks: &[usize],
    out: Option<&Path>,
) -> Result<(), Failure> {
    let (cfg, _) = load_config(config_path)?;
    let base = cfg.pipeline_config(false)?;
    let classes = cfg
        .backend
        .as_ref()
        .map(|b| b.classes())
        .ok_or_else(|| Failure::Config("ablation needs a [backend] section".into()))?;
    let items = list_fixtures(data)?;
    if items.is_empty() {
        return Err(EvalError::EmptyInput.into());
    }
    let pairs = items
        .iter()
        .map(|it| Ok((io::read_image_png(&it.image)?, io::read_label_png(&it.label)?)))
        .collect::<Result<Vec<_>, IoError>>()?;
    let ks = if ks.is_empty() { vec![base.k] } else { ks.to_vec() };
    let combiner = cfg.build_combiner()?;

    let mut csv = String::from("strategy,alpha,kernel,k,miou\n");
    for s in strategies {
        for &kernel in kernels {
            let strategy = parse_strategy(s, kernel)?;
            for &k in &ks {
                let mut pcfg = base.clone();
                pcfg.strategy = strategy;
                pcfg.k = k;
                let mut cm = ConfusionMatrix::new(classes);
                for (image, gt) in &pairs {
                    let backend = cfg.build_backend(Some(gt))?;
                    let out = Pipeline::new(&pcfg, backend.as_ref(), combiner.as_ref())?.run(image, None)?;
                    cm.accumulate(&out.final_map().argmax_labels(), gt, IGNORE_INDEX)?;
                }
                let alpha = strategy.alpha().map(|a| a.to_string()).unwrap_or_default();
                let line = format!("{},{alpha},{kernel},{k},{:.6}\n", strategy.kind().as_str(), cm.miou()?);
                print!("{line}");
                csv.push_str(&line);
            }
        }
    }
    if let Some(p) = out {
        write_file(p, csv.as_bytes())?;
    }
    Ok(())
}

fn tile_plan(config_path: &Path, csv_out: Option<&Path>) -> Result<(), Failure> {
    let (cfg, _) = load_config(config_path)?;
    let plan = cfg.scale_plan()?;
    let (ch, cw) = plan.canvas();
    let (ph, pw) = plan.proc_size();
    let mut text = format!("canvas {ch}x{cw}, processing size {ph}x{pw}, {} levels\n", plan.depth());
    let mut csv = String::from("scale,index,x,y,w,h\n");
    let mut total = 0;
    for s in 1..=plan.depth() {
        let (h, w) = plan.level(s)?;
        let windows = plan.windows(s)?;
        total += windows.len();
        text.push_str(&format!(
            "level {s}: {h}x{w} windows, {} rows x {} cols = {}\n",
            ch / h,
            cw / w,
            windows.len()
        ));
        for (i, win) in windows.iter().enumerate() {
            csv.push_str(&format!("{s},{i},{},{},{},{}\n", win.x, win.y, win.w, win.h));
        }
    }
    text.push_str(&format!("total patches: {total}\n"));
    print!("{text}");
    if let Some(p) = csv_out {
        write_file(p, csv.as_bytes())?;
    }
    Ok(())
}

fn fixtures(out: &Path, seed: u64, count: usize, size: usize, classes: usize, detail_scale: f32) -> Result<(), Failure> {
    if !(2..255).contains(&classes) || size == 0 {
        return Err(Failure::Config("fixtures need 2..=254 classes and a positive size".into()));
    }
    let items = make_fixtures(
        out,
        &FixtureSpec {
            seed,
            count,
            size,
            classes,
            detail_scale,
        },
    )?;
    println!("wrote {} fixture pairs to {}", items.len(), out.display());
    Ok(())
}

fn serve(mode: ServeMode) -> Result<(), Failure> {
    let mut handler = match mode {
        ServeMode::Identity => ReferenceMode::Identity,
        ServeMode::PassthroughO => ReferenceMode::PassthroughO,
    };
    let out = BufWriter::new(stdout().lock());
    protocol::serve(BufReader::new(stdin().lock()), out, &mut handler).map_err(|e| Failure::Io(e.to_string()))?;
    stdout().flush().map_err(|e| Failure::Io(e.to_string()))
}
