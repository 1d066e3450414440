//! Optimization: warmup + cosine schedule, Adam with weight decay and two
//! learning-rate groups, cube-symmetry augmentation, and a resumable,
//! seed-deterministic training loop.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use nrtr_tensor::{
    read_records, write_records, Element, GradCheckReport, Group, ParamStore, Record, Tape, Tensor, TensorError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{load_checkpoint, output_point_sets, save_checkpoint, Model, NetError};
use crate::points::{PointSet, PredPoint};
use crate::set_match::{set_loss, LossBreakdown, LossWeights, MatchError};
use crate::swc::SwcForest;
use crate::volume::{is_empty_block, Block};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: `{field}` {msg}")]
    Config { field: &'static str, msg: String },
    #[error("no usable training blocks after filtering ({empty} empty, {crowded} with more points than queries)")]
    EmptyDataset { empty: usize, crowded: usize },
    #[error("non-finite loss at step {step}; batch sample ids {batch:?}")]
    NonFinite { step: usize, batch: Vec<usize> },
    #[error("augmentation needs a cubic block: {len} values for size {size}")]
    NonCubic { size: usize, len: usize },
    #[error("symmetry id {0} out of range 0..48")]
    Symmetry(usize),
    #[error("optimizer state does not match the parameters: {0}")]
    State(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    /// Adds `wd · p` to the gradient instead of decaying weights directly.
    pub coupled_weight_decay: bool,
    pub batch_size: usize,
    /// Defaults to `max(1, samples / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub loss: LossWeights,
    pub augment: bool,
    /// Normalized intensity above which a voxel counts as foreground.
    pub fg_threshold: f32,
    /// Blocks with a smaller foreground fraction are discarded.
    pub min_fraction: f64,
    /// Checkpoint cadence in epochs (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            warmup_epochs: 10,
            lr_transformer: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            coupled_weight_decay: false,
            batch_size: 4,
            steps_per_epoch: None,
            seed: 0,
            loss: LossWeights::default(),
            augment: true,
            fg_threshold: 0.5,
            min_fraction: 0.001,
            checkpoint_every: 1,
        }
    }
}

fn cfg_err(field: &'static str, msg: &str) -> TrainError {
    TrainError::Config {
        field,
        msg: msg.to_string(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(cfg_err("epochs", "must be >= 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(cfg_err("warmup_epochs", "must be smaller than epochs"));
        }
        if !(self.lr_transformer.is_finite() && self.lr_transformer > 0.0) {
            return Err(cfg_err("lr_transformer", "must be > 0"));
        }
        if !(self.lr_backbone.is_finite() && self.lr_backbone > 0.0) {
            return Err(cfg_err("lr_backbone", "must be > 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(cfg_err("weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size", "must be >= 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(cfg_err("steps_per_epoch", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.min_fraction) {
            return Err(cfg_err("min_fraction", "must lie in [0, 1]"));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base: f64) -> f64 {
    if step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Adam<T: Element> {
    pub hyper: AdamParams,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub backbone: f64,
    pub transformer: f64,
}

impl GroupRates {
    pub fn for_group(&self, g: Group) -> f64 {
        match g {
            Group::Backbone => self.backbone,
            Group::Transformer => self.transformer,
        }
    }
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, hyper: AdamParams) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Adam {
            hyper,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients held in `store`.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        lr: GroupRates,
        weight_decay: f64,
        coupled: bool,
    ) -> Result<(), TrainError> {
        if self.m.len() != store.len() {
            return Err(TrainError::State(format!(
                "{} moment buffers for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, p) in store.iter_mut().enumerate() {
            if self.m[k].len() != p.value.len() {
                return Err(TrainError::State(format!("moment size mismatch for `{}`", p.name)));
            }
            let rate = lr.for_group(p.group);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grads = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let mut x = w.as_f64();
                let mut g = grads[i].as_f64();
                if coupled {
                    g += weight_decay * x;
                } else {
                    x -= rate * weight_decay * x;
                }
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                x -= rate * (mi / c1) / ((vi / c2).sqrt() + eps);
                *w = T::from_f64(x);
            }
        }
        Ok(())
    }

    fn records(&self, store: &ParamStore<T>) -> Vec<Record> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (prefix, buf) in [("m", &self.m), ("v", &self.v)] {
            for (p, data) in store.iter().zip(buf) {
                out.push(Record {
                    name: format!("{prefix}.{}", p.name),
                    group: p.group,
                    shape: p.value.shape().to_vec(),
                    values: data.iter().map(|x| x.as_f64() as f32).collect(),
                });
            }
        }
        out
    }

    fn load_records(&mut self, store: &ParamStore<T>, records: &[Record]) -> Result<(), TrainError> {
        let n = store.len();
        if records.len() != 2 * n {
            return Err(TrainError::State(format!("{} records for {n} parameters", records.len())));
        }
        for (half, buf) in [&mut self.m, &mut self.v].into_iter().enumerate() {
            let prefix = if half == 0 { "m" } else { "v" };
            for (k, p) in store.iter().enumerate() {
                let r = &records[half * n + k];
                if r.name != format!("{prefix}.{}", p.name) || r.values.len() != p.value.len() {
                    return Err(TrainError::State(format!("record `{}` does not match `{}`", r.name, p.name)));
                }
                buf[k] = r.values.iter().map(|&x| T::from_f64(f64::from(x))).collect();
            }
        }
        Ok(())
    }
}

/// One of the 48 symmetries of the cube: axis permutation then reflection.
///
/// Output axis `a` takes input axis `perm[a]`, mirrored when `flip[a]`.
/// Id `perm_index · 8 + flip_bits`; id 0 is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Symmetry {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

pub const SYMMETRY_COUNT: usize = 48;

impl Symmetry {
    pub fn from_id(id: usize) -> Result<Self, TrainError> {
        if id >= SYMMETRY_COUNT {
            return Err(TrainError::Symmetry(id));
        }
        let bits = id % 8;
        Ok(Symmetry {
            perm: PERMS[id / 8],
            flip: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
        })
    }

    pub fn all() -> impl Iterator<Item = Symmetry> {
        (0..SYMMETRY_COUNT).map(|id| Symmetry::from_id(id).expect("id in range"))
    }

    /// Maps a coordinate in `[0, extent]³`.
    pub fn apply_point(&self, p: [f64; 3], extent: f64) -> [f64; 3] {
        std::array::from_fn(|a| {
            let v = p[self.perm[a]];
            if self.flip[a] {
                extent - v
            } else {
                v
            }
        })
    }

    /// Resamples a cubic grid of side `size` (x fastest).
    pub fn apply_grid<V: Copy>(&self, data: &[V], size: usize) -> Vec<V> {
        let mut out = Vec::with_capacity(data.len());
        let mut src = [0usize; 3];
        for z in 0..size {
            for y in 0..size {
                for x in 0..size {
                    for (a, q) in [x, y, z].into_iter().enumerate() {
                        src[self.perm[a]] = if self.flip[a] { size - 1 - q } else { q };
                    }
                    out.push(data[src[0] + size * (src[1] + size * src[2])]);
                }
            }
        }
        out
    }

    pub fn apply_forest(&self, forest: &SwcForest, size: usize) -> SwcForest {
        forest.map_geometry(|c, r| (self.apply_point(c, size as f64), r))
    }
}

/// Applies symmetry `id` to a block and its normalized target points.
pub fn augment(block: &Block, points: &PointSet, id: usize) -> Result<(Block, PointSet), TrainError> {
    let sym = Symmetry::from_id(id)?;
    if block.data.len() != block.size.pow(3) {
        return Err(TrainError::NonCubic {
            size: block.size,
            len: block.data.len(),
        });
    }
    let data = sym.apply_grid(&block.data, block.size);
    let moved = points
        .iter()
        .map(|p| PredPoint {
            center: sym.apply_point(p.center, 1.0),
            ..*p
        })
        .collect();
    Ok((
        Block {
            data,
            ..block.clone()
        },
        PointSet {
            role: points.role,
            points: moved,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub block: Block,
    pub target: PointSet,
}

/// Training samples that survived filtering, with their original indices.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<Sample>,
    ids: Vec<usize>,
}

impl Dataset {
    /// Drops empty blocks and blocks with more targets than `queries`.
    pub fn new(samples: Vec<Sample>, cfg: &TrainConfig, queries: usize) -> Result<Self, TrainError> {
        let (mut empty, mut crowded) = (0, 0);
        let mut kept = Vec::new();
        let mut ids = Vec::new();
        for (i, s) in samples.into_iter().enumerate() {
            if is_empty_block(&s.block, cfg.fg_threshold, cfg.min_fraction) {
                empty += 1;
            } else if s.target.len() > queries {
                crowded += 1;
            } else {
                kept.push(s);
                ids.push(i);
            }
        }
        if kept.is_empty() {
            return Err(TrainError::EmptyDataset { empty, crowded });
        }
        Ok(Dataset { samples: kept, ids })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Index of a kept sample in the list given to [`Dataset::new`].
    pub fn original_id(&self, k: usize) -> usize {
        self.ids[k]
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_box: f64,
    pub loss_giou: f64,
}

pub const LOG_HEADER: &str = "step,epoch,lr_transformer,lr_backbone,loss_total,loss_cls,loss_box,loss_giou";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr_transformer,
            self.lr_backbone,
            self.loss_total,
            self.loss_cls,
            self.loss_box,
            self.loss_giou
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    step: usize,
    adam_t: u64,
    config: TrainConfig,
}

pub const MODEL_FILE: &str = "model.params";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "state.json";
pub const LOG_FILE: &str = "losses.csv";

pub struct Trainer {
    model: Model<f32>,
    adam: Adam<f32>,
    cfg: TrainConfig,
    data: Dataset,
    step: usize,
    log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig, data: Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        let adam = Adam::new(model.params(), AdamParams::default());
        Ok(Trainer {
            model,
            adam,
            cfg,
            data,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| (self.data.len() / self.cfg.batch_size).max(1))
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn warmup_steps(&self) -> usize {
        self.cfg.warmup_epochs * self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Sample indices of every batch in `epoch`. A fresh permutation is
    /// drawn per epoch; when the epoch needs more samples than exist,
    /// indices are drawn with replacement instead.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let n = self.data.len();
        let b = self.cfg.batch_size;
        let spe = self.steps_per_epoch();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, STREAM_ORDER, epoch as u64));
        let order: Vec<usize> = if spe * b <= n {
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            perm
        } else {
            (0..spe * b).map(|_| rng.random_range(0..n)).collect()
        };
        order.chunks_exact(b).take(spe).map(|c| c.to_vec()).collect()
    }

    pub fn rates_at(&self, step: usize) -> GroupRates {
        let (total, warm) = (self.total_steps(), self.warmup_steps());
        GroupRates {
            backbone: lr_at(step, total, warm, self.cfg.lr_backbone),
            transformer: lr_at(step, total, warm, self.cfg.lr_transformer),
        }
    }

    /// Runs one optimizer step and returns its log row.
    pub fn train_step(&mut self) -> Result<LogRow, TrainError> {
        let spe = self.steps_per_epoch();
        let (epoch, within) = (self.step / spe, self.step % spe);
        let batch = self.epoch_batches(epoch).swap_remove(within);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, STREAM_AUGMENT, self.step as u64));
        let mut blocks = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for &k in &batch {
            let s = &self.data.samples[k];
            let id = if self.cfg.augment { rng.random_range(0..SYMMETRY_COUNT) } else { 0 };
            let (b, t) = augment(&s.block, &s.target, id)?;
            blocks.push(b);
            targets.push(t);
        }

        let dump = || TrainError::NonFinite {
            step: self.step,
            batch: batch.iter().map(|&k| self.data.original_id(k)).collect(),
        };
        let loss = batch_loss_and_grad(&mut self.model, &blocks, &targets, &self.cfg.loss)?;
        if !loss.total.is_finite() || self.model.params().iter().any(|p| !p.grad.all_finite()) {
            return Err(dump());
        }
        let mut row = LogRow {
            step: self.step,
            epoch,
            lr_transformer: 0.0,
            lr_backbone: 0.0,
            loss_total: loss.total,
            loss_cls: loss.cls,
            loss_box: loss.boxes,
            loss_giou: loss.giou,
        };

        let rates = self.rates_at(self.step);
        row.lr_transformer = rates.transformer;
        row.lr_backbone = rates.backbone;
        let (wd, coupled) = (self.cfg.weight_decay, self.cfg.coupled_weight_decay);
        self.adam.step(self.model.params_mut(), rates, wd, coupled)?;
        self.step += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Trains to the end, checkpointing into `out_dir` at the configured
    /// epoch cadence and at the end.
    pub fn run(&mut self, out_dir: &Path) -> Result<(), TrainError> {
        let spe = self.steps_per_epoch();
        while !self.is_done() {
            self.train_step()?;
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.step % (spe * every) == 0 && !self.is_done() {
                self.save(out_dir)?;
            }
        }
        self.save(out_dir)
    }

    /// Writes parameters, optimizer moments, step counter and loss log.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TrainError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        save_checkpoint(&self.model, &dir.join(MODEL_FILE))?;
        let opt = dir.join(OPTIMIZER_FILE);
        let file = File::create(&opt).map_err(io(&opt))?;
        write_records(
            BufWriter::new(file),
            &self.model.config().hash(),
            &self.adam.records(self.model.params()),
        )?;
        let state = TrainState {
            step: self.step,
            adam_t: self.adam.t,
            config: self.cfg.clone(),
        };
        let state_path = dir.join(STATE_FILE);
        let json = serde_json::to_string_pretty(&state).expect("state serializes");
        fs::write(&state_path, json).map_err(io(&state_path))?;
        let log_path = dir.join(LOG_FILE);
        let mut w = BufWriter::new(File::create(&log_path).map_err(io(&log_path))?);
        writeln!(w, "{LOG_HEADER}").map_err(io(&log_path))?;
        for row in &self.log {
            writeln!(w, "{}", row.csv()).map_err(io(&log_path))?;
        }
        w.flush().map_err(io(&log_path))?;
        Ok(())
    }

    /// Restores a run saved by [`Trainer::save`]; the training config is
    /// taken from the checkpoint.
    pub fn resume(dir: &Path, data: Dataset) -> Result<Self, TrainError> {
        let state_path = dir.join(STATE_FILE);
        let bad = |msg: String| TrainError::Format {
            path: state_path.clone(),
            msg,
        };
        let text = fs::read_to_string(&state_path).map_err(|source| TrainError::Io {
            path: state_path.clone(),
            source,
        })?;
        let state: TrainState = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let model_path = dir.join(MODEL_FILE);
        let model_cfg = crate::net::read_checkpoint_config(&model_path)?;
        let model = load_checkpoint(&model_path, &model_cfg)?;
        let mut trainer = Trainer::new(model, state.config, data)?;
        let opt = dir.join(OPTIMIZER_FILE);
        let file = File::open(&opt).map_err(|source| TrainError::Io {
            path: opt.clone(),
            source,
        })?;
        let (tag, records) = read_records(BufReader::new(file))?;
        if tag != model_cfg.hash() {
            return Err(TrainError::Net(NetError::ConfigMismatch));
        }
        trainer.adam.load_records(trainer.model.params(), &records)?;
        trainer.adam.t = state.adam_t;
        trainer.step = state.step;
        trainer.log = read_log(&dir.join(LOG_FILE))?;
        Ok(trainer)
    }
}

fn batch_input<T: Element>(model: &Model<T>, blocks: &[Block]) -> Result<Tensor<T>, TrainError> {
    let refs: Vec<&Block> = blocks.iter().collect();
    Ok(model.input_tensor(&refs)?)
}

/// Batch-mean set loss; parameter gradients are left in the model's store
/// (overwriting previous ones).
pub fn batch_loss_and_grad<T: Element>(
    model: &mut Model<T>,
    blocks: &[Block],
    targets: &[PointSet],
    weights: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    let mut tape = Tape::new();
    let input = tape.constant(batch_input(model, blocks)?);
    let out = model.forward(&mut tape, input)?;
    let preds = output_point_sets(tape.value(out));
    let scale = 1.0 / blocks.len() as f64;
    let mut sum = LossBreakdown::default();
    let mut grad = Vec::with_capacity(tape.value(out).len());
    for (pred, target) in preds.iter().zip(targets) {
        let l = set_loss(target, pred, weights)?;
        sum.total += scale * l.breakdown.total;
        sum.cls += scale * l.breakdown.cls;
        sum.boxes += scale * l.breakdown.boxes;
        sum.giou += scale * l.breakdown.giou;
        grad.extend(l.grad.iter().flatten().map(|g| T::from_f64(g * scale)));
    }
    let grad = Tensor::new(tape.shape(out), grad)?;
    let loss = tape.external_loss(out, sum.total, grad)?;
    let store = model.params_mut();
    store.zero_grad();
    tape.backward_into(loss, store)?;
    Ok(sum)
}

/// Batch-mean set loss without gradients.
pub fn batch_loss<T: Element>(
    model: &Model<T>,
    blocks: &[Block],
    targets: &[PointSet],
    weights: &LossWeights,
) -> Result<f64, TrainError> {
    let refs: Vec<&Block> = blocks.iter().collect();
    let preds = model.predict(&refs)?;
    let mut total = 0.0;
    for (pred, target) in preds.iter().zip(targets) {
        total += set_loss(target, pred, weights)?.breakdown.total;
    }
    Ok(total / blocks.len() as f64)
}

/// Checks parameter gradients of the batch loss against central
/// differences on every `stride`-th value of each parameter tensor.
/// Errors are `|analytic − numeric| / max(1, |analytic|)`.
pub fn loss_gradient_check(
    model: &mut Model<f64>,
    blocks: &[Block],
    targets: &[PointSet],
    weights: &LossWeights,
    eps: f64,
    stride: usize,
) -> Result<GradCheckReport, TrainError> {
    batch_loss_and_grad(model, blocks, targets, weights)?;
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for (k, grads) in analytic.iter().enumerate() {
        for j in (0..grads.len()).step_by(stride.max(1)) {
            let probe = |delta: f64, model: &mut Model<f64>| -> Result<f64, TrainError> {
                let p = model.params_mut().iter_mut().nth(k).expect("parameter index");
                p.value.data_mut()[j] += delta;
                let l = batch_loss(model, blocks, targets, weights);
                let p = model.params_mut().iter_mut().nth(k).expect("parameter index");
                p.value.data_mut()[j] -= delta;
                l
            };
            let plus = probe(eps, model)?;
            let minus = probe(-eps, model)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grads[j] - numeric).abs() / grads[j].abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((k, j));
            }
        }
    }
    Ok(report)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>, TrainError> {
    let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, msg: &str| TrainError::Format {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(i + 1, "expected 8 columns"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i + 1, "not a number"));
        let int = |k: usize| f[k].parse::<usize>().map_err(|_| bad(i + 1, "not an integer"));
        rows.push(LogRow {
            step: int(0)?,
            epoch: int(1)?,
            lr_transformer: num(2)?,
            lr_backbone: num(3)?,
            loss_total: num(4)?,
            loss_cls: num(5)?,
            loss_box: num(6)?,
            loss_giou: num(7)?,
        });
    }
    Ok(rows)
}
