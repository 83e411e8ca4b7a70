//! Video-level evaluation: per-frame scoring, aggregation, protocol metrics.
//!
//! Inference always uses the centre patch of every frame with all three
//! modalities present. Frames are scored independently, so the aggregated
//! probability does not depend on frame order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugmentConfig, AugmentError, CropMode};
use crate::dataset::{DatasetError, DatasetIndex, Label, SubProtocol, VideoSample};
use crate::lfv::{self, LfvConfig, LfvError, VoteResult};
use crate::metrics::{self, AggregateMetrics, MeanStd, MetricsError, ProtocolMetrics, DEFAULT_THRESHOLD};
use crate::modality::PerModality;
use crate::model::{
    build_pipenet, live_probability, named_portfolio_with, ArchWidths, Checkpoint, ModelError, ModelHandle,
};
use crate::trainer::{self, TrainConfig, TrainError, TrainRun};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyDataset,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Lfv(#[from] LfvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Lfv,
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameOrder {
    Original,
    Reverse,
    Shuffle,
}

impl FrameOrder {
    pub const ALL: [FrameOrder; 3] = [FrameOrder::Original, FrameOrder::Reverse, FrameOrder::Shuffle];

    /// Frame permutation applied before scoring.
    pub fn permutation(self, n: usize, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        match self {
            FrameOrder::Original => {}
            FrameOrder::Reverse => order.reverse(),
            FrameOrder::Shuffle => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
        order
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub lfv: LfvConfig,
    pub aggregation: Aggregation,
    /// Only the resize, patch size and colour mode are used.
    pub augment: AugmentConfig,
    pub order: FrameOrder,
    pub shuffle_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            lfv: LfvConfig::default(),
            aggregation: Aggregation::Lfv,
            augment: AugmentConfig::default(),
            order: FrameOrder::Original,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub video_id: String,
    pub label: Label,
    pub sub_protocol: Option<SubProtocol>,
    /// Live probability per frame, in scoring order.
    pub frame_probs: Vec<f64>,
    pub aggregated: f64,
    pub vote: Option<VoteResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub predictions: Vec<VideoPrediction>,
    /// Metrics over every video.
    pub overall: ProtocolMetrics,
    /// One row per sub-protocol in which both classes occur.
    pub per_protocol: Vec<ProtocolMetrics>,
    /// Mean and sample std over `per_protocol` when it has at least two rows.
    pub aggregate: Option<AggregateMetrics>,
}

/// Live probability of every frame of `video`, centre patch, eval mode.
pub fn score_frames(model: &ModelHandle, video: &VideoSample, aug: &AugmentConfig) -> Result<Vec<f64>, EvalError> {
    const CHUNK: usize = 32;
    let frames = augment::prepare_video(video, aug)?;
    let n = frames.rgb.len();
    let mut probs = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(CHUNK) {
        let triplets = chunk
            .iter()
            .map(|&i| {
                let refs = PerModality::new(&frames.rgb[i], &frames.depth[i], &frames.ir[i]);
                augment::crop_patch(refs, aug, CropMode::Center, 0)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let logits = model.forward(&augment::to_batch(&triplets))?;
        probs.extend((0..chunk.len()).map(|i| live_probability(logits.sample(i))));
    }
    Ok(probs)
}

pub fn aggregate(probs: &[f64], mode: Aggregation, lfv_cfg: &LfvConfig) -> Result<(f64, Option<VoteResult>), LfvError> {
    Ok(match mode {
        Aggregation::Lfv => {
            let vote = lfv::limited_frame_vote(probs, lfv_cfg)?;
            (vote.expectation, Some(vote))
        }
        Aggregation::Mean => (lfv::aggregate_mean(probs)?, None),
        Aggregation::Median => (lfv::aggregate_median(probs)?, None),
    })
}

pub fn predict_video(model: &ModelHandle, video: &VideoSample, cfg: &EvalConfig) -> Result<VideoPrediction, EvalError> {
    let order = cfg.order.permutation(video.frame_count(), cfg.shuffle_seed);
    let frame_probs = score_frames(model, &video.reordered(&order), &cfg.augment)?;
    let (aggregated, vote) = aggregate(&frame_probs, cfg.aggregation, &cfg.lfv)?;
    Ok(VideoPrediction {
        video_id: video.sample.sample_id.clone(),
        label: video.sample.label,
        sub_protocol: video.sample.sub_protocol,
        frame_probs,
        aggregated,
        vote,
    })
}

pub fn evaluate(model: &ModelHandle, videos: &[VideoSample], cfg: &EvalConfig) -> Result<EvalOutcome, EvalError> {
    if videos.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let predictions = videos
        .iter()
        .map(|v| predict_video(model, v, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let probs: Vec<f64> = predictions.iter().map(|p| p.aggregated).collect();
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    let overall = ProtocolMetrics::from_counts(&metrics::confusion(&probs, &labels, DEFAULT_THRESHOLD)?, None)?;

    let mut groups: BTreeMap<SubProtocol, (Vec<f64>, Vec<Label>)> = BTreeMap::new();
    for p in predictions.iter() {
        if let Some(sp) = p.sub_protocol {
            let g = groups.entry(sp).or_default();
            g.0.push(p.aggregated);
            g.1.push(p.label);
        }
    }
    let mut per_protocol = Vec::new();
    for (sp, (p, l)) in &groups {
        let counts = metrics::confusion(p, l, DEFAULT_THRESHOLD)?;
        if counts.live() > 0 && counts.attack() > 0 {
            per_protocol.push(ProtocolMetrics::from_counts(&counts, Some(sp.as_str().to_string()))?);
        }
    }
    let aggregate = if per_protocol.len() >= 2 {
        Some(metrics::aggregate_protocols(&per_protocol)?)
    } else {
        None
    };
    Ok(EvalOutcome {
        predictions,
        overall,
        per_protocol,
        aggregate,
    })
}

/// Loads every video of `index` and evaluates it.
pub fn evaluate_index(model: &ModelHandle, index: &DatasetIndex, cfg: &EvalConfig) -> Result<EvalOutcome, EvalError> {
    if index.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    evaluate(model, &index.load_all()?, cfg)
}

/// Percent table: per-sub-protocol rows, the `mean±std` row when available,
/// then the row over all videos.
pub fn metrics_report(outcome: &EvalOutcome) -> String {
    let mut out = metrics::protocol_report(&outcome.per_protocol, outcome.aggregate.as_ref());
    let o = &outcome.overall;
    let _ = writeln!(
        out,
        "all\t{}\t{}\t{}",
        metrics::format_percent(o.apcer),
        metrics::format_percent(o.bpcer),
        metrics::format_percent(o.acer)
    );
    out
}

/// `video_id frame_index probability` per line, readable by the vote command.
pub fn frame_dump(predictions: &[VideoPrediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        for (i, prob) in p.frame_probs.iter().enumerate() {
            let _ = writeln!(out, "{}\t{i}\t{prob}", p.video_id);
        }
    }
    out
}

/// One line per video with its aggregated probability and vote details.
pub fn video_table(predictions: &[VideoPrediction]) -> String {
    let mut out = String::from("video_id\tlabel\tsub_protocol\tprobability\tretained\titerations\ttermination\n");
    for p in predictions {
        let (retained, iterations, termination) = match &p.vote {
            Some(v) => (v.retained_count().to_string(), v.iterations.to_string(), v.termination.as_str()),
            None => (p.frame_probs.len().to_string(), "-".into(), "-"),
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{retained}\t{iterations}\t{termination}",
            p.video_id,
            p.label.class_index(),
            p.sub_protocol.map_or("-", |s| s.as_str()),
            p.aggregated
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderProbe {
    pub original: f64,
    pub reverse: f64,
    pub shuffle: f64,
}

impl OrderProbe {
    pub fn get(&self, order: FrameOrder) -> f64 {
        match order {
            FrameOrder::Original => self.original,
            FrameOrder::Reverse => self.reverse,
            FrameOrder::Shuffle => self.shuffle,
        }
    }
}

/// Aggregated probability of `video` under each frame order.
pub fn order_probe(model: &ModelHandle, video: &VideoSample, cfg: &EvalConfig) -> Result<OrderProbe, EvalError> {
    let run = |order| {
        let c = EvalConfig { order, ..cfg.clone() };
        predict_video(model, video, &c).map(|p| p.aggregated)
    };
    Ok(OrderProbe {
        original: run(FrameOrder::Original)?,
        reverse: run(FrameOrder::Reverse)?,
        shuffle: run(FrameOrder::Shuffle)?,
    })
}

pub struct SweepData<'a> {
    pub train: &'a [VideoSample],
    pub val: &'a [VideoSample],
    pub test: &'a [VideoSample],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub portfolio: String,
    /// Pipeline label per modality, for example `SRXB22`.
    pub pipelines: PerModality<String>,
    pub acers: Vec<f64>,
    pub mean: f64,
    /// `None` with a single repeat.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// ACER in percent as `mean±std`, with `n/a` in place of the std for one repeat.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("portfolio\trgb\tdepth\tir\trepeats\tacer\n");
        for r in &self.rows {
            let std = r.std.map_or_else(|| "n/a".to_string(), |s| format!("{:.2}", s * 100.0));
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.2}±{std}",
                r.portfolio,
                r.pipelines.rgb,
                r.pipelines.depth,
                r.pipelines.ir,
                r.acers.len(),
                r.mean * 100.0
            );
        }
        out
    }
}

pub struct SweepConfig<'a> {
    pub widths: &'a ArchWidths,
    pub augment: &'a AugmentConfig,
    pub train: &'a TrainConfig,
    pub eval: &'a EvalConfig,
    pub repeats: usize,
    /// Checkpoints go to `<work_dir>/<portfolio>/rep<r>`.
    pub work_dir: &'a Path,
}

/// Trains and evaluates each portfolio `repeats` times. Repeat `r` uses
/// seed `train.seed + r` for both initialisation and training, identically
/// for every portfolio. The best retained checkpoint of each run is scored.
pub fn portfolio_sweep(names: &[&str], data: &SweepData<'_>, cfg: &SweepConfig<'_>) -> Result<SweepTable, EvalError> {
    if cfg.repeats == 0 {
        return Err(EvalError::Train(TrainError::InvalidConfig("repeats must be at least 1".into())));
    }
    let specs = names
        .iter()
        .map(|n| named_portfolio_with(n, cfg.widths))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut acers = Vec::with_capacity(cfg.repeats);
        for r in 0..cfg.repeats {
            let seed = cfg.train.seed + r as u64;
            let mut model = build_pipenet(&spec, cfg.augment.input_channels(), cfg.augment.patch_size, seed)?;
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let dir = cfg.work_dir.join(&spec.name).join(format!("rep{r}"));
            let run = TrainRun {
                train: data.train,
                val: data.val,
                augment: cfg.augment,
                config: &train_cfg,
                checkpoint_dir: &dir,
                extra: serde_json::Value::Null,
            };
            let report = trainer::train(&mut model, &run, None)?;
            if let Some(best) = &report.best {
                model = ModelHandle::from_checkpoint(&Checkpoint::load(&best.path)?)?;
            }
            let eval_cfg = EvalConfig {
                augment: cfg.augment.clone(),
                ..cfg.eval.clone()
            };
            acers.push(evaluate(&model, data.test, &eval_cfg)?.overall.acer);
        }
        let (mean, std) = if acers.len() >= 2 {
            let ms = MeanStd::of(&acers)?;
            (ms.mean, Some(ms.std))
        } else {
            (acers[0], None)
        };
        rows.push(SweepRow {
            portfolio: spec.name.clone(),
            pipelines: PerModality::from_fn(|m| spec.pipelines[m].label()),
            acers,
            mean,
            std,
        });
    }
    Ok(SweepTable { rows })
}
