//! Run configuration: a TOML file with one section per module.
//!
//! Precedence is command-line flag, then `PIPENET_SEED` (seed only), then
//! the file, then built-in defaults. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use pipenet_core::augment::AugmentConfig;
use pipenet_core::dataset::{SplitRatio, SyntheticSpec};
use pipenet_core::eval::{Aggregation, FrameOrder};
use pipenet_core::lfv::LfvConfig;
use pipenet_core::model::ArchWidths;
use pipenet_core::schedule::ScheduleConfig;
use pipenet_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "PIPENET_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    pub out_dir: PathBuf,
    /// Model initialisation, split and training seed.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub augment: AugmentConfig,
    pub model: ModelSection,
    pub schedule: ScheduleConfig,
    pub train: TrainSection,
    pub lfv: LfvConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "pipenet".into(),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            dataset: DatasetSection::default(),
            augment: AugmentConfig::default(),
            model: ModelSection::default(),
            schedule: ScheduleConfig::default(),
            train: TrainSection::default(),
            lfv: LfvConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Defaults to `<out>/data/train/manifest.txt`.
    pub train_manifest: Option<PathBuf>,
    /// Defaults to `<out>/data/test/manifest.txt`.
    pub test_manifest: Option<PathBuf>,
    pub split_train: u32,
    pub split_val: u32,
    /// Size of the synthetic test set written by `synth`.
    pub test_live: usize,
    pub test_attack: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let ratio = SplitRatio::default();
        Self {
            train_manifest: None,
            test_manifest: None,
            split_train: ratio.train,
            split_val: ratio.val,
            test_live: 6,
            test_attack: 6,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub portfolio: String,
    pub widths: ArchWidths,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            portfolio: "P5".into(),
            widths: ArchWidths::default(),
        }
    }
}

/// Training options other than the schedule, which has its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub checkpoint_top_k: usize,
    pub alpha: f64,
    pub frames_per_video: usize,
    pub max_step_loss: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            eval_every: d.eval_every,
            checkpoint_top_k: d.checkpoint_top_k,
            alpha: d.alpha,
            frames_per_video: d.frames_per_video,
            max_step_loss: d.max_step_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Defaults to `<out>/checkpoints/best.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub aggregation: Aggregation,
    pub order: FrameOrder,
    pub shuffle_seed: u64,
    pub portfolios: Vec<String>,
    pub repeats: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            aggregation: Aggregation::Lfv,
            order: FrameOrder::Original,
            shuffle_seed: 0,
            portfolios: pipenet_core::model::PORTFOLIO_NAMES.iter().map(|s| s.to_string()).collect(),
            repeats: 3,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            schedule: self.schedule.clone(),
            eval_every: t.eval_every,
            checkpoint_top_k: t.checkpoint_top_k,
            alpha: t.alpha,
            frames_per_video: t.frames_per_video,
            max_step_loss: t.max_step_loss,
            seed: self.seed,
        }
    }

    pub fn split_ratio(&self) -> SplitRatio {
        SplitRatio {
            train: self.dataset.split_train,
            val: self.dataset.split_val,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Checks cross-field constraints that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.augment.validate().map_err(|e| cfg(&e))?;
        self.train_config().validate().map_err(|e| cfg(&e))?;
        self.lfv.validate().map_err(|e| cfg(&e))?;
        self.dataset.synthetic.validate().map_err(|e| cfg(&e))?;
        if self.dataset.split_train == 0 {
            return Err(CliError::Config("dataset.split_train must be at least 1".into()));
        }
        pipenet_core::model::named_portfolio_with(&self.model.portfolio, &self.model.widths)
            .and_then(|spec| spec.check_shapes(self.augment.patch_size).map(|_| ()))
            .map_err(|e| cfg(&e))?;
        if self.eval.repeats == 0 {
            return Err(CliError::Config("eval.repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parses `section.key=value` into a nested TOML table.
fn override_table(assignment: &str) -> Result<toml::Table, CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("empty key in `{assignment}`")))?;
    let mut table = toml::Table::new();
    table.insert(last.to_string(), value);
    for part in parts.into_iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(part.to_string(), toml::Value::Table(table));
        table = outer;
    }
    Ok(table)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Builds the effective configuration from an optional file, `--set`
/// overrides and the environment seed.
pub fn load(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::Config(format!("config file {} not found", path.display())),
                _ => CliError::io(path, e),
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    for o in overrides {
        merge(&mut table, override_table(o)?);
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
