//! Pipeline commands behind the `nrtr` binary: synthetic data generation,
//! training, inference with tree assembly, evaluation and SWC checks.
//!
//! Every command that writes files writes a `manifest.json` into its output
//! directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nrtr_core::connect::{build_forest, filter_points, merge_blocks, BlockPoints, ForestParams};
use nrtr_core::metrics::{evaluate, Report};
use nrtr_core::net::{build_model, load_checkpoint, read_checkpoint_config, ModelConfig, NetError};
use nrtr_core::render::{gen_random_forest, render_image, RenderError, RenderSpec, SynthSpec};
use nrtr_core::swc::{block_ground_truth, parse_nodes, parse_swc, validate, write_swc, SwcError, SwcForest};
use nrtr_core::train::{Dataset, Sample, TrainConfig, TrainError, Trainer};
use nrtr_core::volume::{
    blockify, extract_block, load_volume, save_volume, upsample_trilinear, Dtype, Volume, VolumeError,
};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECONSTRUCTION_FILE: &str = "reconstruction.swc";
pub const SCORES_FILE: &str = "scores.json";
pub const BLOCKS_FILE: &str = "blocks.json";
/// Magnification applied when a volume is smaller than one block.
pub const AUTO_UPSAMPLE: usize = 8;
pub const THREADS_ENV: &str = "NRTR_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Swc {
        path: PathBuf,
        #[source]
        source: SwcError,
    },
    #[error("{0} of {1} SWC files are invalid")]
    InvalidSwc(usize, usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl CliError {
    /// 1 for bad invocations or configs, 2 for bad or failing data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Render(RenderError::Spec(_))
            | CliError::Net(NetError::Config { .. })
            | CliError::Train(TrainError::Config { .. }) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_forest(path: &Path) -> Result<SwcForest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_swc(&text).map_err(|source| CliError::Swc {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_forest(path: &Path, forest: &SwcForest) -> Result<()> {
    fs::write(path, write_swc(forest)).map_err(io_err(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Thread cap from `NRTR_THREADS`. Kernels are single-threaded, so the
/// value is only validated and recorded.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub threads: Option<usize>,
    /// Unix seconds at the start of the run.
    pub started: u64,
    pub wall_clock_seconds: f64,
}

struct Run {
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    fn start(command: &str, config: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Ok(Run {
            manifest: RunManifest {
                command: command.to_string(),
                config: config.map(Path::to_path_buf),
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                version: VERSION.to_string(),
                threads: thread_cap()?,
                started,
                wall_clock_seconds: 0.0,
            },
            clock: Instant::now(),
        })
    }

    fn finish(mut self, dir: &Path) -> Result<RunManifest> {
        self.manifest.wall_clock_seconds = self.clock.elapsed().as_secs_f64();
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        Ok(self.manifest)
    }
}

/// Contents of a `synth` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub samples: usize,
    pub forest: SynthSpec,
    pub render: RenderSpec,
    pub dtype: Dtype,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 4,
            forest: SynthSpec::default(),
            render: RenderSpec::default(),
            dtype: Dtype::U16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.forest.validate()?;
        self.render.validate()?;
        if self.forest.dims != self.render.dims {
            return Err(CliError::Usage(format!(
                "forest.dims {:?} and render.dims {:?} differ",
                self.forest.dims, self.render.dims
            )));
        }
        Ok(())
    }
}

pub fn sample_stem(i: usize) -> String {
    format!("sample_{i:03}")
}

/// Writes `samples` pairs `sample_NNN.{json,raw,swc}` into `out`. Sample
/// `i` grows its forest from seed `seed + i` and renders noise from the
/// bitwise complement of that seed.
pub fn run_synth(cfg: &SynthConfig, config_path: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let base = seed.unwrap_or(cfg.forest.seed);
    let mut run = Run::start("synth", config_path, Some(base))?;
    create_dir(out)?;
    for i in 0..cfg.samples {
        let s = base.wrapping_add(i as u64);
        let forest = gen_random_forest(&SynthSpec {
            seed: s,
            ..cfg.forest.clone()
        })?;
        let image = render_image(&forest, &cfg.render, !s)?;
        let stem = out.join(sample_stem(i));
        save_volume(&stem, &image, cfg.dtype)?;
        let swc = stem.with_extension("swc");
        write_forest(&swc, &forest)?;
        run.manifest.outputs.extend([stem.with_extension("json"), stem.with_extension("raw"), swc]);
    }
    run.finish(out)
}

/// Contents of a `train` config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Block overlap used when cutting training volumes.
    pub overlap: usize,
}

/// `(volume, swc)` pairs of a dataset directory, sorted by name.
pub fn dataset_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut pairs = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "swc") {
            let volume = path.with_extension("json");
            if volume.exists() {
                pairs.push((volume, path));
            }
        }
    }
    pairs.sort();
    Ok(pairs)
}

/// Cuts every volume of a dataset into normalized blocks with their
/// ground-truth point sets.
pub fn load_samples(dir: &Path, block: usize, overlap: usize) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (vol_path, swc_path) in dataset_pairs(dir)? {
        let volume = load_volume(&vol_path)?;
        let forest = read_forest(&swc_path)?;
        for origin in blockify(&volume, block, overlap)? {
            samples.push(Sample {
                block: extract_block(&volume, origin, block),
                target: block_ground_truth(&forest, origin.map(|o| o as f64), block),
            });
        }
    }
    Ok(samples)
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub warmup: Option<usize>,
}

/// Trains (or resumes) and leaves the checkpoint, optimizer state and
/// `losses.csv` in `out`.
pub fn run_train(args: &TrainArgs) -> Result<RunManifest> {
    let mut cfg: TrainRunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainRunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(w) = args.warmup {
        cfg.train.warmup_epochs = w;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let mut run = Run::start("train", args.config.as_deref(), Some(cfg.train.seed))?;
    run.manifest.inputs.push(args.data.clone());
    let samples = load_samples(&args.data, cfg.model.block_size, cfg.overlap)?;
    let mut trainer = match &args.resume {
        Some(dir) => {
            run.manifest.inputs.push(dir.clone());
            let model_cfg = read_checkpoint_config(&dir.join(nrtr_core::train::MODEL_FILE))?;
            let data = Dataset::new(samples, &cfg.train, model_cfg.queries)?;
            Trainer::resume(dir, data)?
        }
        None => {
            let data = Dataset::new(samples, &cfg.train, cfg.model.queries)?;
            let model = build_model::<f32>(&cfg.model, cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone(), data)?
        }
    };
    create_dir(&args.out)?;
    trainer.run(&args.out)?;
    for f in [
        nrtr_core::train::MODEL_FILE,
        nrtr_core::train::OPTIMIZER_FILE,
        nrtr_core::train::STATE_FILE,
        nrtr_core::train::LOG_FILE,
    ] {
        run.manifest.outputs.push(args.out.join(f));
    }
    run.finish(&args.out)
}

#[derive(Clone, Debug)]
pub struct InferArgs {
    /// Model parameter file (its `.config.json` sidecar must sit next to it).
    pub checkpoint: PathBuf,
    pub volume: PathBuf,
    pub out: PathBuf,
    /// `None` magnifies by [`AUTO_UPSAMPLE`] only when the volume is smaller
    /// than a block.
    pub upsample: Option<usize>,
    pub overlap: usize,
    pub threshold: f64,
    pub forest: ForestParams,
    /// Points from different blocks closer than this (working voxels) are merged.
    pub merge_eps: f64,
}

impl InferArgs {
    pub fn new(checkpoint: PathBuf, volume: PathBuf, out: PathBuf) -> Self {
        InferArgs {
            checkpoint,
            volume,
            out,
            upsample: None,
            overlap: 0,
            threshold: 0.5,
            forest: ForestParams::default(),
            merge_eps: 1.0,
        }
    }
}

/// Checkpoint path: a file, or a training output directory.
fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(nrtr_core::train::MODEL_FILE)
    } else {
        p.to_path_buf()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// In the input volume's voxel frame.
    pub forest: SwcForest,
    pub factor: usize,
    /// Grid the model actually ran on.
    pub working_dims: [usize; 3],
}

/// Reconstructs a whole volume: blockify, predict, filter, merge, connect.
pub fn reconstruct(volume: &Volume, model: &nrtr_core::net::Model<f32>, args: &InferArgs) -> Result<Reconstruction> {
    let block = model.config().block_size;
    let factor = match args.upsample {
        Some(0) => return Err(CliError::Usage("--upsample must be >= 1".into())),
        Some(k) => k,
        None if volume.dims().iter().any(|&d| d < block) => AUTO_UPSAMPLE,
        None => 1,
    };
    let work = upsample_trilinear(volume, factor)?;
    let mut blocks = Vec::new();
    for origin in blockify(&work, block, args.overlap)? {
        let b = extract_block(&work, origin, block);
        let pred = model.predict(&[&b])?.remove(0);
        blocks.push(BlockPoints {
            origin: origin.map(|o| o as f64),
            size: block as f64,
            points: filter_points(&pred, args.threshold),
        });
    }
    let points = merge_blocks(&blocks, args.merge_eps);
    let forest = build_forest(&points, &args.forest);
    // working voxel u covers original [u / k, (u + 1) / k)
    let k = factor as f64;
    Ok(Reconstruction {
        forest: forest.map_geometry(|c, r| (c.map(|v| v / k), r / k)),
        factor,
        working_dims: work.dims(),
    })
}

pub fn run_infer(args: &InferArgs) -> Result<RunManifest> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(CliError::Usage("--threshold must lie in [0, 1]".into()));
    }
    if !(args.forest.tau > 0.0) || !(args.forest.cap > 0.0) || !(args.merge_eps >= 0.0) {
        return Err(CliError::Usage("--tau, cap and merge radius must be positive".into()));
    }
    let mut run = Run::start("infer", None, None)?;
    let ckpt = model_path(&args.checkpoint);
    let cfg = read_checkpoint_config(&ckpt)?;
    let model = load_checkpoint::<f32>(&ckpt, &cfg)?;
    let volume = load_volume(&args.volume)?;
    let rec = reconstruct(&volume, &model, args)?;
    create_dir(&args.out)?;
    let swc = args.out.join(RECONSTRUCTION_FILE);
    write_forest(&swc, &rec.forest)?;
    run.manifest.inputs.extend([ckpt, args.volume.clone()]);
    run.manifest.outputs.push(swc);
    run.finish(&args.out)
}

/// Smallest grid holding every node sphere of both forests.
pub fn enclosing_dims(a: &SwcForest, b: &SwcForest) -> [usize; 3] {
    let mut dims = [1usize; 3];
    for n in a.nodes().iter().chain(b.nodes()) {
        for k in 0..3 {
            let hi = (n.center[k] + n.radius).ceil().max(0.0) as usize + 1;
            dims[k] = dims[k].max(hi);
        }
    }
    dims
}

/// Scores `pred` against `gt`; writes `scores.json` when `out` is given.
pub fn run_eval(pred: &Path, gt: &Path, dims: Option<[usize; 3]>, out: Option<&Path>) -> Result<Report> {
    let run = Run::start("eval", None, None)?;
    let (p, g) = (read_forest(pred)?, read_forest(gt)?);
    let dims = dims.unwrap_or_else(|| enclosing_dims(&p, &g));
    if dims.contains(&0) {
        return Err(CliError::Usage("--dims must be positive".into()));
    }
    let report = evaluate(&p, &g, dims);
    if let Some(dir) = out {
        let mut run = run;
        create_dir(dir)?;
        let path = dir.join(SCORES_FILE);
        write_json(&path, &report)?;
        run.manifest.inputs.extend([pred.to_path_buf(), gt.to_path_buf()]);
        run.manifest.outputs.push(path);
        run.finish(dir)?;
    }
    Ok(report)
}

/// Per-file validation messages; `Ok` lines for valid files.
pub fn swc_check(paths: &[PathBuf]) -> (Vec<String>, usize) {
    let mut lines = Vec::new();
    let mut bad = 0;
    for path in paths {
        let verdict = match fs::read_to_string(path) {
            Err(e) => Err(e.to_string()),
            Ok(text) => match parse_nodes(&text) {
                Err(e) => Err(e.to_string()),
                Ok(nodes) => {
                    let report = validate(&nodes);
                    if report.is_valid() {
                        Ok(nodes.len())
                    } else {
                        Err(report.to_string())
                    }
                }
            },
        };
        match verdict {
            Ok(n) => lines.push(format!("{}: ok ({n} nodes)", path.display())),
            Err(msg) => {
                bad += 1;
                for m in msg.lines() {
                    lines.push(format!("{}: {m}", path.display()));
                }
            }
        }
    }
    (lines, bad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub origin: [usize; 3],
    pub foreground_fraction: f64,
    pub empty: bool,
    /// Ground-truth points inside the block, when an SWC was given.
    pub points: Option<usize>,
}

/// Lists the blocks a volume is cut into.
pub fn run_blockify(
    volume_path: &Path,
    swc: Option<&Path>,
    block: usize,
    overlap: usize,
    train: &TrainConfig,
    out: &Path,
) -> Result<RunManifest> {
    if block == 0 {
        return Err(CliError::Usage("--block must be positive".into()));
    }
    let mut run = Run::start("blockify", None, None)?;
    let volume = load_volume(volume_path)?;
    let forest = swc.map(read_forest).transpose()?;
    let mut infos = Vec::new();
    for origin in blockify(&volume, block, overlap)? {
        let b = extract_block(&volume, origin, block);
        let bright = b.data.iter().filter(|&&v| v > train.fg_threshold).count();
        infos.push(BlockInfo {
            origin,
            foreground_fraction: bright as f64 / b.data.len() as f64,
            empty: nrtr_core::volume::is_empty_block(&b, train.fg_threshold, train.min_fraction),
            points: forest
                .as_ref()
                .map(|f| block_ground_truth(f, origin.map(|o| o as f64), block).len()),
        });
    }
    create_dir(out)?;
    let path = out.join(BLOCKS_FILE);
    write_json(&path, &infos)?;
    run.manifest.inputs.push(volume_path.to_path_buf());
    run.manifest.inputs.extend(swc.map(Path::to_path_buf));
    run.manifest.outputs.push(path);
    run.finish(out)
}

pub fn load_synth_config(path: Option<&Path>) -> Result<SynthConfig> {
    path.map_or_else(|| Ok(SynthConfig::default()), read_json)
}

pub fn load_train_config(path: Option<&Path>) -> Result<TrainRunConfig> {
    path.map_or_else(|| Ok(TrainRunConfig::default()), read_json)
}
