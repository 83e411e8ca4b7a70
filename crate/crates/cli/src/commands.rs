//! Subcommand implementations. Everything a command writes goes under the
//! configured output directory:
//!
//! ```text
//! <out>/config/<command>.toml   effective merged configuration
//! <out>/data/{train,test}/      synthetic datasets (synth)
//! <out>/logs/                   progress logs, train_metrics.tsv
//! <out>/checkpoints/            last.ckpt, best.ckpt, retained cycle checkpoints
//! <out>/reports/                metrics and comparison tables
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use pipenet_core::dataset::{generate_synthetic, load_manifest, split_train_val, DatasetIndex, SyntheticSpec};
use pipenet_core::eval::{self, EvalConfig, SweepConfig, SweepData};
use pipenet_core::lfv::{limited_frame_vote, LfvConfig};
use pipenet_core::model::{build_pipenet, named_portfolio_with, Checkpoint, ModelHandle};
use pipenet_core::trainer::{self, TrainRun, BEST_CHECKPOINT};
use pipenet_core::VideoSample;

use crate::config::RunConfig;
use crate::error::CliError;

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Appends lines to `<out>/logs/<command>.log` and mirrors them on stderr.
struct Log {
    file: fs::File,
}

impl Log {
    fn open(layout: &Layout, command: &str) -> Result<Self, CliError> {
        let dir = layout.logs();
        ensure_dir(&dir)?;
        let path = dir.join(format!("{command}.log"));
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self { file })
    }

    fn line(&mut self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        eprintln!("{msg}");
        let _ = writeln!(self.file, "{msg}");
    }
}

fn start(cfg: &RunConfig, command: &str) -> Result<(Layout, Log), CliError> {
    let layout = Layout::new(&cfg.out_dir);
    ensure_dir(&layout.root)?;
    write_file(&layout.root.join("config").join(format!("{command}.toml")), &cfg.to_toml())?;
    let log = Log::open(&layout, command)?;
    Ok((layout, log))
}

fn require(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        })
    }
}

fn train_manifest(cfg: &RunConfig, layout: &Layout) -> PathBuf {
    cfg.dataset
        .train_manifest
        .clone()
        .unwrap_or_else(|| layout.data().join("train").join("manifest.txt"))
}

fn test_manifest(cfg: &RunConfig, layout: &Layout) -> PathBuf {
    cfg.dataset
        .test_manifest
        .clone()
        .unwrap_or_else(|| layout.data().join("test").join("manifest.txt"))
}

fn load_index(path: &Path) -> Result<DatasetIndex, CliError> {
    require(path, "run `pipenet synth` or set dataset.*_manifest")?;
    let index = load_manifest(path)?;
    if index.is_empty() {
        return Err(CliError::Config(format!("{} lists no samples", path.display())));
    }
    Ok(index)
}

fn checkpoint_path(cfg: &RunConfig, layout: &Layout, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.eval.checkpoint.clone())
        .unwrap_or_else(|| layout.checkpoints().join(BEST_CHECKPOINT))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<ModelHandle, CliError> {
    require(path, "train a model first or pass --checkpoint")?;
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::io(path, e))?;
    let model = ModelHandle::from_checkpoint(&ckpt)?;
    if model.patch_size() != cfg.augment.patch_size || *model.input_channels() != cfg.augment.input_channels() {
        return Err(CliError::Config(format!(
            "checkpoint expects patch {} with channels {:?}; augment section gives patch {} with channels {:?}",
            model.patch_size(),
            model.input_channels(),
            cfg.augment.patch_size,
            cfg.augment.input_channels()
        )));
    }
    Ok(model)
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig {
        checkpoint: cfg.eval.checkpoint.clone(),
        lfv: cfg.lfv.clone(),
        aggregation: cfg.eval.aggregation,
        augment: cfg.augment.clone(),
        order: cfg.eval.order,
        shuffle_seed: cfg.eval.shuffle_seed,
    }
}

fn train_val(cfg: &RunConfig, layout: &Layout, log: &mut Log) -> Result<(Vec<VideoSample>, Vec<VideoSample>), CliError> {
    let index = load_index(&train_manifest(cfg, layout))?;
    let (train, val) = split_train_val(&index, cfg.split_ratio(), cfg.seed)?;
    if val.is_empty() {
        return Err(CliError::Config(format!(
            "split {}:{} of {} samples leaves no validation samples",
            cfg.dataset.split_train,
            cfg.dataset.split_val,
            index.len()
        )));
    }
    log.line(format!("train samples {}, validation samples {}", train.len(), val.len()));
    Ok((train.load_all()?, val.load_all()?))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let (layout, mut log) = start(cfg, "synth")?;
    let spec = &cfg.dataset.synthetic;
    let test_spec = SyntheticSpec {
        n_live: cfg.dataset.test_live,
        n_attack: cfg.dataset.test_attack,
        seed: spec.seed.wrapping_add(1),
        ..spec.clone()
    };
    for (name, s) in [("train", spec), ("test", &test_spec)] {
        let dir = layout.data().join(name);
        let index = generate_synthetic(s, &dir)?;
        log.line(format!(
            "{name}: {} videos ({} live, {} attack) in {}",
            index.len(),
            index.count_label(pipenet_core::Label::Live),
            index.count_label(pipenet_core::Label::Attack),
            dir.display()
        ));
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let (layout, mut log) = start(cfg, "train")?;
    let (train_set, val_set) = train_val(cfg, &layout, &mut log)?;
    let resume_ckpt = match resume {
        Some(path) => {
            require(path, "resume checkpoint not found")?;
            Some(Checkpoint::load(path).map_err(|e| CliError::io(path, e))?)
        }
        None => None,
    };
    let mut model = match &resume_ckpt {
        Some(ckpt) => ModelHandle::from_checkpoint(ckpt)?,
        None => {
            let spec = named_portfolio_with(&cfg.model.portfolio, &cfg.model.widths)?;
            build_pipenet(&spec, cfg.augment.input_channels(), cfg.augment.patch_size, cfg.seed)?
        }
    };
    log.line(format!("model {} with {} parameters", model.spec(), model.param_count()));
    if let Some(ckpt) = &resume_ckpt {
        let s = &ckpt.meta.schedule;
        log.line(format!(
            "resuming after epoch {} at cycle {}, start lr {}",
            ckpt.meta.epochs_done, s.cycle, s.start_lr
        ));
    }
    let train_cfg = cfg.train_config();
    let ck_dir = layout.checkpoints();
    let run = TrainRun {
        train: &train_set,
        val: &val_set,
        augment: &cfg.augment,
        config: &train_cfg,
        checkpoint_dir: &ck_dir,
        extra: serde_json::json!({ "run": cfg }),
    };
    let report = match trainer::train(&mut model, &run, resume_ckpt.as_ref()) {
        Ok(r) => r,
        Err(e) => {
            log.line(format!("{e}; last good state kept in {}", ck_dir.join(trainer::LAST_CHECKPOINT).display()));
            return Err(e.into());
        }
    };

    let metrics_path = layout.logs().join("train_metrics.tsv");
    let log_text = report.metrics_log();
    if resume_ckpt.is_some() && metrics_path.exists() {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| CliError::io(&metrics_path, e))?;
        f.write_all(log_text.as_bytes()).map_err(|e| CliError::io(&metrics_path, e))?;
    } else {
        write_file(&metrics_path, &log_text)?;
    }
    for e in &report.epochs {
        log.line(format!(
            "epoch {} cycle {} lr {:.6} train_loss {:.6} val_loss {} val_acer {}",
            e.epoch,
            e.cycle,
            e.lr,
            e.train_loss,
            e.val_loss.map_or("-".into(), |v| format!("{v:.6}")),
            e.val_acer.map_or("-".into(), |v| format!("{v:.4}"))
        ));
    }

    let mut summary = String::from("checkpoint\tcycle\tepoch\tval_acer\ttrain_loss\tval_loss\tscore\tbest\n");
    for r in &report.retained {
        let is_best = report.best.as_ref() == Some(r);
        let _ = writeln!(
            summary,
            "{}\t{}\t{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{}",
            r.path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
            r.cycle,
            r.epoch,
            r.val_acer,
            r.train_loss,
            r.val_loss,
            r.score,
            if is_best { "yes" } else { "no" }
        );
    }
    write_file(&layout.reports().join("training_summary.tsv"), &summary)?;
    if let Some(best) = &report.best {
        log.line(format!("best checkpoint: cycle {} epoch {} score {:.6}", best.cycle, best.epoch, best.score));
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let (layout, mut log) = start(cfg, "eval")?;
    let model = load_model(&checkpoint_path(cfg, &layout, checkpoint), cfg)?;
    let index = load_index(&test_manifest(cfg, &layout))?;
    let outcome = eval::evaluate_index(&model, &index, &eval_config(cfg))?;
    let reports = layout.reports();
    write_file(&reports.join("frame_scores.tsv"), &eval::frame_dump(&outcome.predictions))?;
    write_file(&reports.join("videos.tsv"), &eval::video_table(&outcome.predictions))?;
    let metrics = eval::metrics_report(&outcome);
    write_file(&reports.join("metrics.tsv"), &metrics)?;
    log.line(format!("evaluated {} videos", outcome.predictions.len()));
    print!("{metrics}");
    Ok(())
}

/// Shortest decimal with at most ten places, without trailing zeros.
fn fmt_prob(p: f64) -> String {
    let s = format!("{p:.10}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

/// Parses `video_id<TAB>frame_index<TAB>probability` lines into per-video
/// sequences ordered by frame index, videos in first-appearance order.
pub fn parse_scores(text: &str) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    let mut videos: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: &str| CliError::Config(format!("score file line {}: {why}", i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad("expected video_id, frame_index and probability separated by tabs"));
        }
        let frame: usize = fields[1].trim().parse().map_err(|_| bad("frame_index is not an integer"))?;
        let prob: f64 = fields[2].trim().parse().map_err(|_| bad("probability is not a number"))?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(bad("probability outside [0, 1]"));
        }
        let id = fields[0].trim();
        match videos.iter_mut().find(|(v, _)| v == id) {
            Some((_, frames)) => frames.push((frame, prob)),
            None => videos.push((id.to_string(), vec![(frame, prob)])),
        }
    }
    if videos.is_empty() {
        return Err(CliError::Config("score file contains no scores".into()));
    }
    Ok(videos
        .into_iter()
        .map(|(id, mut frames)| {
            frames.sort_by_key(|&(f, _)| f);
            (id, frames.into_iter().map(|(_, p)| p).collect())
        })
        .collect())
}

pub fn cmd_vote(scores: &Path, lfv: &LfvConfig) -> Result<String, CliError> {
    lfv.validate()?;
    let text = fs::read_to_string(scores).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Missing {
            path: scores.to_path_buf(),
            hint: "score file not found".into(),
        },
        _ => CliError::io(scores, e),
    })?;
    let mut out = String::from("video_id\tE\tretained\titerations\ttermination\n");
    for (id, probs) in parse_scores(&text)? {
        let vote = limited_frame_vote(&probs, lfv)?;
        let _ = writeln!(
            out,
            "{id}\t{}\t{}\t{}\t{}",
            fmt_prob(vote.expectation),
            vote.retained_count(),
            vote.iterations,
            vote.termination.as_str()
        );
    }
    Ok(out)
}

pub fn cmd_probe(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let (layout, mut log) = start(cfg, "probe")?;
    let model = load_model(&checkpoint_path(cfg, &layout, checkpoint), cfg)?;
    let index = load_index(&test_manifest(cfg, &layout))?;
    let ecfg = eval_config(cfg);
    let mut table = String::from("video_id\toriginal\treverse\tshuffle\tidentical\n");
    let mut all_equal = true;
    for video in index.load_all()? {
        let p = eval::order_probe(&model, &video, &ecfg)?;
        let equal = p.original == p.reverse && p.original == p.shuffle;
        all_equal &= equal;
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}",
            video.sample.sample_id,
            p.original,
            p.reverse,
            p.shuffle,
            if equal { "yes" } else { "no" }
        );
    }
    write_file(&layout.reports().join("order_probe.tsv"), &table)?;
    log.line(format!("order probe over {} videos, all identical: {all_equal}", index.len()));
    print!("{table}");
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let (layout, mut log) = start(cfg, "sweep")?;
    let (train_set, val_set) = train_val(cfg, &layout, &mut log)?;
    let test = load_index(&test_manifest(cfg, &layout))?.load_all()?;
    let names: Vec<&str> = cfg.eval.portfolios.iter().map(String::as_str).collect();
    let train_cfg = cfg.train_config();
    let ecfg = eval_config(cfg);
    let work_dir = layout.root.join("sweep");
    let sweep_cfg = SweepConfig {
        widths: &cfg.model.widths,
        augment: &cfg.augment,
        train: &train_cfg,
        eval: &ecfg,
        repeats: cfg.eval.repeats,
        work_dir: &work_dir,
    };
    let data = SweepData {
        train: &train_set,
        val: &val_set,
        test: &test,
    };
    let table = eval::portfolio_sweep(&names, &data, &sweep_cfg)?.to_tsv();
    write_file(&layout.reports().join("sweep.tsv"), &table)?;
    log.line(format!("swept {} portfolios x {} repeats", names.len(), cfg.eval.repeats));
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_parsing() {
        let v = parse_scores("b\t1\t0.5\na\t0\t0.25\nb\t0\t0.75\n\n").unwrap();
        assert_eq!(v, vec![("b".to_string(), vec![0.75, 0.5]), ("a".to_string(), vec![0.25])]);
        let err = parse_scores("a\t0\t0.5\na 1 0.5\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_scores("\n").is_err());
        assert!(parse_scores("a\t0\t1.5\n").is_err());
    }

    #[test]
    fn probability_formatting() {
        assert_eq!(fmt_prob(0.8025000000000001), "0.8025");
        assert_eq!(fmt_prob(1.0), "1");
        assert_eq!(fmt_prob(0.5), "0.5");
    }
}
