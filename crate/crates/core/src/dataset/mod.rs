//! Dataset layout, ingestion, synthetic generation and splitting.
//!
//! A dataset is a manifest file plus one directory per sample. Each line of
//! the manifest is `<relative_sample_dir> <label>` with label `1` for live
//! and `0` for attack. Every sample directory holds `rgb/`, `depth/` and
//! `ir/` subdirectories containing identically named PNG frames (RGB as
//! 3-channel, depth and IR as single-channel 8-bit images). When the first
//! path component of a sample directory is a sub-protocol tag (`4@1`, `4@2`,
//! `4@3`) the sample is tagged with it.

mod frame;
mod manifest;
mod split;
mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use frame::Frame;
pub use manifest::{load_manifest, load_video, natural_cmp, MANIFEST_FILE};
pub use split::{split_train_val, SplitRatio};
pub use synthetic::{generate_synthetic, AttackType, SyntheticSpec, SPEC_ECHO_FILE};

use crate::modality::{ModalityId, PerModality};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("sample `{sample}` has no {modality}/ directory")]
    MissingModalityDir { sample: String, modality: ModalityId },
    #[error("sample `{sample}` frame counts disagree: rgb {rgb}, depth {depth}, ir {ir}")]
    FrameCountMismatch {
        sample: String,
        rgb: usize,
        depth: usize,
        ir: usize,
    },
    #[error("sample `{sample}`: {modality}/ frame names differ from rgb/")]
    FrameNameMismatch { sample: String, modality: ModalityId },
    #[error("sample `{0}` has no frames")]
    NoFrames(String),
    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),
    #[error("cannot decode {path}: {message}")]
    DecodeError { path: PathBuf, message: String },
    #[error("dataset index is empty")]
    EmptyIndex,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Ground truth; `Live` is the positive class (index 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Attack = 0,
    Live = 1,
}

impl Label {
    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn from_digit(s: &str) -> Option<Label> {
        match s {
            "0" => Some(Label::Attack),
            "1" => Some(Label::Live),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubProtocol {
    #[serde(rename = "4@1")]
    P1,
    #[serde(rename = "4@2")]
    P2,
    #[serde(rename = "4@3")]
    P3,
}

impl SubProtocol {
    pub const ALL: [SubProtocol; 3] = [SubProtocol::P1, SubProtocol::P2, SubProtocol::P3];

    pub fn as_str(self) -> &'static str {
        match self {
            SubProtocol::P1 => "4@1",
            SubProtocol::P2 => "4@2",
            SubProtocol::P3 => "4@3",
        }
    }
}

impl fmt::Display for SubProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubProtocol {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        SubProtocol::ALL.into_iter().find(|p| p.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    /// The sample directory as written in the manifest.
    pub sample_id: String,
    pub root_path: PathBuf,
    pub label: Label,
    pub sub_protocol: Option<SubProtocol>,
    pub frame_count: usize,
}

impl SampleRef {
    pub fn modality_dir(&self, m: ModalityId) -> PathBuf {
        self.root_path.join(m.as_str())
    }
}

/// Aligned frames for one clip: frame `i` of each modality shows the same instant.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub sample: SampleRef,
    pub frames: PerModality<Vec<Frame>>,
}

impl VideoSample {
    pub fn frame_count(&self) -> usize {
        self.frames.rgb.len()
    }

    /// Reorders all modalities with the same frame permutation.
    pub fn reordered(&self, order: &[usize]) -> VideoSample {
        VideoSample {
            sample: self.sample.clone(),
            frames: self
                .frames
                .as_ref()
                .map(|_, frames| order.iter().map(|&i| frames[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    samples: Vec<SampleRef>,
}

impl DatasetIndex {
    pub fn new(samples: Vec<SampleRef>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(DatasetError::DuplicateSample(s.sample_id.clone()));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[SampleRef] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    pub fn count_sub_protocol(&self, p: SubProtocol) -> usize {
        self.samples.iter().filter(|s| s.sub_protocol == Some(p)).count()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Loads every sample's frames.
    pub fn load_all(&self) -> Result<Vec<VideoSample>, DatasetError> {
        self.samples.iter().map(load_video).collect()
    }
}
