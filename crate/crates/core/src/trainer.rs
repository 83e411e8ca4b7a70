//! SGD training with cosine restarts and top-k checkpoint retention.
//!
//! Each epoch draws `frames_per_video` frames from every training video,
//! shuffles them and runs mini-batch SGD with momentum. The learning rate of
//! a step is `lr_at(schedule, state, t)` with `t` the fraction of the current
//! cycle already consumed. Validation is frame-level: centre patches, all
//! modalities, threshold 0.5.
//!
//! A step whose loss is non-finite or exceeds `max_step_loss`, or which
//! leaves a non-finite parameter, aborts the run with
//! [`TrainError::DivergenceDetected`].
//!
//! Every random draw of an epoch comes from a ChaCha stream keyed by
//! `(seed, global epoch)`, so a run resumed from a checkpoint continues
//! exactly as the uninterrupted run would have.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugmentConfig, AugmentError, CropMode};
use crate::dataset::{Frame, Label, VideoSample};
use crate::metrics::{self, ConfusionCounts, DEFAULT_THRESHOLD};
use crate::modality::PerModality;
use crate::model::{live_probability, Checkpoint, CheckpointMeta, ModelError, ModelHandle, StoredTensor};
use crate::nn::softmax_cross_entropy;
use crate::schedule::{advance_cycle, lr_at, ScheduleConfig, ScheduleError, ScheduleState};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training loss diverged at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleConfig,
    pub eval_every: usize,
    pub checkpoint_top_k: usize,
    /// Weight of the train/validation loss gap in the checkpoint score.
    pub alpha: f64,
    /// Frames drawn from each training video per epoch.
    pub frames_per_video: usize,
    /// A step loss above this (or non-finite) counts as divergence.
    pub max_step_loss: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: ScheduleConfig::default(),
            eval_every: 1,
            checkpoint_top_k: 3,
            alpha: 0.5,
            frames_per_video: 4,
            max_step_loss: 1e4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 || self.checkpoint_top_k == 0 || self.frames_per_video == 0 {
            return bad("eval_every, checkpoint_top_k and frames_per_video must be at least 1");
        }
        if !(self.max_step_loss > 0.0) {
            return bad("max_step_loss must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay must be non-negative");
        }
        self.schedule.validate()?;
        Ok(())
    }
}

/// Lower is better.
pub fn composite_score(val_acer: f64, train_loss: f64, val_loss: f64, alpha: f64) -> f64 {
    val_acer + alpha * (train_loss - val_loss).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub path: PathBuf,
    pub cycle: usize,
    /// 1-based global epoch number.
    pub epoch: usize,
    pub val_acer: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub score: f64,
}

impl CheckpointRecord {
    fn key(&self) -> (f64, usize) {
        (self.score, self.epoch)
    }

    fn ranks_before(&self, other: &CheckpointRecord) -> bool {
        self.key().0.total_cmp(&other.key().0).then(self.epoch.cmp(&other.epoch)).is_lt()
    }
}

/// Keeps the `top_k` lowest-scoring checkpoints of each cycle on disk.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    top_k: usize,
    by_cycle: BTreeMap<usize, Vec<CheckpointRecord>>,
}

impl CheckpointStore {
    pub fn new(top_k: usize) -> Self {
        assert!(top_k >= 1, "top_k must be at least 1");
        Self {
            top_k,
            by_cycle: BTreeMap::new(),
        }
    }

    /// Writes `bytes` to `record.path` if the record ranks among its cycle's
    /// best `top_k`; evicted files are deleted. Equal scores keep the earlier epoch.
    pub fn maybe_save(&mut self, record: CheckpointRecord, bytes: &[u8]) -> Result<bool, TrainError> {
        let slot = self.by_cycle.entry(record.cycle).or_default();
        if slot.len() >= self.top_k {
            let worst = slot.last().expect("non-empty slot");
            if !record.ranks_before(worst) {
                return Ok(false);
            }
            let evicted = slot.pop().expect("non-empty slot");
            if evicted.path != record.path {
                fs::remove_file(&evicted.path).map_err(io_err(&evicted.path))?;
            }
        }
        if let Some(parent) = record.path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&record.path, bytes).map_err(io_err(&record.path))?;
        let at = slot.partition_point(|r| r.ranks_before(&record));
        slot.insert(at, record);
        Ok(true)
    }

    pub fn records(&self) -> impl Iterator<Item = &CheckpointRecord> {
        self.by_cycle.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_cycle.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn best(&self) -> Option<&CheckpointRecord> {
        self.records().fold(None, |best: Option<&CheckpointRecord>, r| match best {
            Some(b) if !r.ranks_before(b) => Some(b),
            _ => Some(r),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based global epoch number.
    pub epoch: usize,
    pub cycle: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub best: Option<CheckpointRecord>,
    pub retained: Vec<CheckpointRecord>,
    pub steps: u64,
}

impl TrainingReport {
    /// One line per epoch: `epoch lr train_loss val_loss val_acer`, tab-separated.
    pub fn metrics_log(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.8}"));
        let mut out = String::new();
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.8}\t{:.8}\t{}\t{}",
                e.epoch,
                e.lr,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_acer)
            );
        }
        out
    }
}

/// Inputs of one training run.
pub struct TrainRun<'a> {
    pub train: &'a [VideoSample],
    pub val: &'a [VideoSample],
    pub augment: &'a AugmentConfig,
    pub config: &'a TrainConfig,
    pub checkpoint_dir: &'a Path,
    /// Stored in every checkpoint's metadata.
    pub extra: serde_json::Value,
}

struct Prepared {
    frames: PerModality<Vec<Frame>>,
    label: Label,
}

fn prepare(videos: &[VideoSample], aug: &AugmentConfig) -> Result<Vec<Prepared>, AugmentError> {
    videos
        .iter()
        .map(|v| {
            Ok(Prepared {
                frames: augment::prepare_video(v, aug)?,
                label: v.sample.label,
            })
        })
        .collect()
}

fn frame_refs(frames: &PerModality<Vec<Frame>>, i: usize) -> PerModality<&Frame> {
    PerModality::new(&frames.rgb[i], &frames.depth[i], &frames.ir[i])
}

/// Frame-level validation: mean cross-entropy and ACER over every frame.
fn validate(model: &ModelHandle, val: &[Prepared], aug: &AugmentConfig) -> Result<(f64, f64), TrainError> {
    const CHUNK: usize = 32;
    let items: Vec<(usize, usize)> = val
        .iter()
        .enumerate()
        .flat_map(|(v, p)| (0..p.frames.rgb.len()).map(move |f| (v, f)))
        .collect();
    let mut loss_sum = 0.0;
    let mut probs = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        let triplets = chunk
            .iter()
            .map(|&(v, f)| augment::crop_patch(frame_refs(&val[v].frames, f), aug, CropMode::Center, 0))
            .collect::<Result<Vec<_>, _>>()?;
        let logits = model.forward(&augment::to_batch(&triplets))?;
        let targets: Vec<usize> = chunk.iter().map(|&(v, _)| val[v].label.class_index()).collect();
        let out = softmax_cross_entropy(&logits, &targets);
        loss_sum += out.per_sample.iter().sum::<f64>();
        for (i, &(v, _)) in chunk.iter().enumerate() {
            probs.push(live_probability(logits.sample(i)));
            labels.push(val[v].label);
        }
    }
    let counts = metrics::confusion(&probs, &labels, DEFAULT_THRESHOLD).expect("equal lengths");
    Ok((loss_sum / items.len() as f64, acer_or_partial(&counts)))
}

/// ACER, or the single defined error rate when a class is absent from the
/// validation frames (0 when both are absent).
fn acer_or_partial(c: &ConfusionCounts) -> f64 {
    match (metrics::apcer(c), metrics::bpcer(c)) {
        (Ok(a), Ok(b)) => (a + b) / 2.0,
        (Ok(a), Err(_)) => a,
        (Err(_), Ok(b)) => b,
        _ => 0.0,
    }
}

fn params_finite(model: &ModelHandle) -> bool {
    let mut ok = true;
    model.visit_params(&mut |_, p| ok &= p.value.iter().all(|v| v.is_finite()));
    ok
}

struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    fn step(&mut self, model: &mut ModelHandle, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_params_mut(&mut |name, p| {
            if !p.trainable {
                return;
            }
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; p.value.len()]);
            for ((w, &g), v) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        });
    }
}

struct Progress {
    state: ScheduleState,
    epochs_done: usize,
    steps: u64,
}

fn checkpoint_bytes(
    model: &ModelHandle,
    opt: &Sgd,
    progress: &Progress,
    extra: &serde_json::Value,
) -> Result<Vec<u8>, TrainError> {
    let mut tensors = model.state();
    for (name, v) in &opt.velocity {
        tensors.insert(
            format!("{OPTIM_PREFIX}{name}"),
            StoredTensor {
                shape: vec![v.len()],
                data: v.clone(),
            },
        );
    }
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            model: model.echo().clone(),
            step: progress.steps,
            epochs_done: progress.epochs_done,
            schedule: progress.state.clone(),
            extra: extra.clone(),
        },
        tensors,
    };
    Ok(ckpt.to_bytes()?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Trains `model` in place. With `resume`, weights, optimizer state and
/// schedule position are restored from the checkpoint first and the report
/// covers only the epochs run by this call.
///
/// `last.ckpt` always holds the most recent state whose parameters are
/// finite; on divergence it is left untouched.
pub fn train(model: &mut ModelHandle, run: &TrainRun<'_>, resume: Option<&Checkpoint>) -> Result<TrainingReport, TrainError> {
    let cfg = run.config;
    cfg.validate()?;
    run.augment.validate()?;
    if run.train.is_empty() || run.val.is_empty() {
        return Err(TrainError::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    if model.patch_size() != run.augment.patch_size || *model.input_channels() != run.augment.input_channels() {
        return Err(TrainError::InvalidConfig(format!(
            "model expects patch {} with channels {:?}, augment config gives patch {} with channels {:?}",
            model.patch_size(),
            model.input_channels(),
            run.augment.patch_size,
            run.augment.input_channels()
        )));
    }
    let sched = &cfg.schedule;
    let train_set = prepare(run.train, run.augment)?;
    let val_set = prepare(run.val, run.augment)?;

    let mut opt = Sgd {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        velocity: BTreeMap::new(),
    };
    let mut progress = Progress {
        state: ScheduleState::initial(sched),
        epochs_done: 0,
        steps: 0,
    };
    if let Some(ckpt) = resume {
        model.load_state(&ckpt.tensors)?;
        for (name, t) in &ckpt.tensors {
            if let Some(param) = name.strip_prefix(OPTIM_PREFIX) {
                opt.velocity.insert(param.to_string(), t.data.clone());
            }
        }
        progress = Progress {
            state: ckpt.meta.schedule.clone(),
            epochs_done: ckpt.meta.epochs_done,
            steps: ckpt.meta.step,
        };
    }

    fs::create_dir_all(run.checkpoint_dir).map_err(io_err(run.checkpoint_dir))?;
    let last_path = run.checkpoint_dir.join(LAST_CHECKPOINT);
    write_atomic(&last_path, &checkpoint_bytes(model, &opt, &progress, &run.extra)?)?;

    let mut store = CheckpointStore::new(cfg.checkpoint_top_k);
    let mut epochs = Vec::new();
    let total = sched.total_epochs();

    while progress.epochs_done < total {
        let epoch = progress.epochs_done + 1;
        let state = progress.state.clone();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut items: Vec<(usize, usize)> = Vec::new();
        for (v, p) in train_set.iter().enumerate() {
            let n = p.frames.rgb.len();
            if cfg.frames_per_video >= n {
                items.extend((0..cfg.frames_per_video).map(|k| (v, k % n)));
            } else {
                let picks = rand::seq::index::sample(&mut rng, n, cfg.frames_per_video);
                items.extend(picks.into_iter().map(|f| (v, f)));
            }
        }
        items.shuffle(&mut rng);

        let n_steps = items.len().div_ceil(cfg.batch_size);
        let cycle_steps = (sched.epochs_per_cycle * n_steps) as f64;
        let mut loss_sum = 0.0;
        let mut first_lr = None;
        for (s, batch_items) in items.chunks(cfg.batch_size).enumerate() {
            let t = (state.epoch_in_cycle * n_steps + s) as f64 / cycle_steps;
            let lr = lr_at(sched, &state, t);
            first_lr.get_or_insert(lr);

            let triplets = batch_items
                .iter()
                .map(|&(v, f)| {
                    augment::crop_patch(frame_refs(&train_set[v].frames, f), run.augment, CropMode::Random, rng.random())
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut batch = augment::to_batch(&triplets);
            augment::modal_dropout(&mut batch, run.augment.modal_dropout_p, rng.random());
            let targets: Vec<usize> = batch_items.iter().map(|&(v, _)| train_set[v].label.class_index()).collect();

            model.zero_grad();
            let logits = model.forward_train(&batch)?;
            let out = softmax_cross_entropy(&logits, &targets);
            if !(out.loss <= cfg.max_step_loss) {
                return Err(TrainError::DivergenceDetected { epoch, step: s });
            }
            model.backward(&out.grad);
            opt.step(model, lr);
            progress.steps += 1;
            if !params_finite(model) {
                return Err(TrainError::DivergenceDetected { epoch, step: s });
            }
            loss_sum += out.per_sample.iter().sum::<f64>();
        }
        let train_loss = loss_sum / items.len() as f64;

        let end_of_cycle = state.epoch_in_cycle + 1 == sched.epochs_per_cycle;
        progress.epochs_done = epoch;
        progress.state = if end_of_cycle {
            if state.cycle + 1 < sched.cycles {
                advance_cycle(sched, &state)?
            } else {
                ScheduleState {
                    epoch_in_cycle: sched.epochs_per_cycle,
                    ..state.clone()
                }
            }
        } else {
            ScheduleState {
                epoch_in_cycle: state.epoch_in_cycle + 1,
                ..state.clone()
            }
        };

        let mut record = EpochRecord {
            epoch,
            cycle: state.cycle,
            lr: first_lr.unwrap_or_else(|| lr_at(sched, &state, 0.0)),
            train_loss,
            val_loss: None,
            val_acer: None,
        };
        let bytes = checkpoint_bytes(model, &opt, &progress, &run.extra)?;
        if epoch % cfg.eval_every == 0 || end_of_cycle {
            let (val_loss, val_acer) = validate(model, &val_set, run.augment)?;
            record.val_loss = Some(val_loss);
            record.val_acer = Some(val_acer);
            let candidate = CheckpointRecord {
                path: run.checkpoint_dir.join(format!("cycle{}_epoch{epoch:04}.ckpt", state.cycle)),
                cycle: state.cycle,
                epoch,
                val_acer,
                train_loss,
                val_loss,
                score: composite_score(val_acer, train_loss, val_loss, cfg.alpha),
            };
            store.maybe_save(candidate, &bytes)?;
        }
        write_atomic(&last_path, &bytes)?;
        epochs.push(record);
    }

    let best = store.best().cloned();
    if let Some(b) = &best {
        let best_path = run.checkpoint_dir.join(BEST_CHECKPOINT);
        fs::copy(&b.path, &best_path).map_err(io_err(&best_path))?;
    }
    Ok(TrainingReport {
        epochs,
        best,
        retained: store.records().cloned().collect(),
        steps: progress.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(dir: &Path, cycle: usize, epoch: usize, score: f64) -> CheckpointRecord {
        CheckpointRecord {
            path: dir.join(format!("c{cycle}_e{epoch}.ckpt")),
            cycle,
            epoch,
            val_acer: score,
            train_loss: 0.0,
            val_loss: 0.0,
            score,
        }
    }

    #[test]
    fn store_ordering_and_eviction() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::new(1);
        assert!(store.maybe_save(record(dir.path(), 0, 1, 0.3), b"a").unwrap());
        assert!(store.maybe_save(record(dir.path(), 0, 2, 0.2), b"b").unwrap());
        assert!(!dir.path().join("c0_e1.ckpt").exists());
        assert!(dir.path().join("c0_e2.ckpt").exists());
        assert!(!store.maybe_save(record(dir.path(), 0, 3, 0.2), b"c").unwrap());
        assert!(!dir.path().join("c0_e3.ckpt").exists());
        assert_eq!(store.best().unwrap().epoch, 2);
    }

    #[test]
    fn store_capacity_is_per_cycle() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::new(2);
        for (i, s) in [0.5, 0.4, 0.3, 0.6].iter().enumerate() {
            store.maybe_save(record(dir.path(), 0, i + 1, *s), b"x").unwrap();
            store.maybe_save(record(dir.path(), 1, i + 1, *s), b"x").unwrap();
        }
        assert_eq!(store.len(), 4);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 4);
        let kept: Vec<_> = store.records().filter(|r| r.cycle == 0).map(|r| r.epoch).collect();
        assert_eq!(kept, vec![3, 2]);
    }

    #[test]
    fn composite_score_formula() {
        assert_eq!(composite_score(0.1, 0.3, 0.5, 0.5), 0.1 + 0.5 * 0.2);
        assert_eq!(composite_score(0.0, 0.4, 0.4, 10.0), 0.0);
    }
}
