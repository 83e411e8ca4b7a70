use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::modality::{ModalityId, PerModality};

/// Squeeze-and-excitation reduction ratio used by every block.
pub const SE_REDUCTION: usize = 16;

/// Bottleneck flavour used by a pipeline or by the fusion module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "UPPERCASE")]
pub enum BlockKind {
    /// SE-ResNet bottleneck: dense 3x3, bottleneck width `out / 4`.
    Srb,
    /// SE-ResNeXt bottleneck: grouped 3x3, bottleneck width `out / 2`.
    Srxb { cardinality: usize },
}

impl BlockKind {
    /// Channels of the inner 3x3 convolution for a block with `out` channels.
    pub fn bottleneck_width(self, out: usize) -> usize {
        match self {
            BlockKind::Srb => (out / 4).max(1),
            BlockKind::Srxb { .. } => (out / 2).max(1),
        }
    }

    pub fn groups(self) -> usize {
        match self {
            BlockKind::Srb => 1,
            BlockKind::Srxb { cardinality } => cardinality,
        }
    }

    fn validate(self, out: usize) -> Result<(), ModelError> {
        let width = self.bottleneck_width(out);
        let groups = self.groups();
        if groups == 0 || width % groups != 0 {
            return Err(ModelError::InvalidSpec(format!(
                "bottleneck width {width} (block output {out}) is not divisible by cardinality {groups}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl StemSpec {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

/// Block chain for one modality: a convolution stem followed by two stages,
/// each entered with stride-2 downsampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub modality: ModalityId,
    pub block: BlockKind,
    pub stem: StemSpec,
    pub stage_repeats: (usize, usize),
    pub stage_channels: (usize, usize),
}

impl PipelineSpec {
    /// Table label such as `SRB` or `SRXB22`.
    pub fn label(&self) -> String {
        match self.block {
            BlockKind::Srb => "SRB".to_string(),
            BlockKind::Srxb { .. } => format!("SRXB{}{}", self.stage_repeats.0, self.stage_repeats.1),
        }
    }

    /// `(channels, height, width)` produced for a square `input` patch.
    ///
    /// Depends only on the stem and `stage_channels`, never on block kind or
    /// repeats, which is what lets different chains be concatenated.
    pub fn output_shape(&self, input: usize) -> (usize, usize, usize) {
        let conv = |size: usize, k: usize, s: usize, p: usize| (size + 2 * p - k) / s + 1;
        let mut size = conv(input, self.stem.kernel, self.stem.stride, self.stem.padding());
        size = conv(size, 3, 2, 1);
        size = conv(size, 3, 2, 1);
        (self.stage_channels.1, size, size)
    }

    pub(crate) fn validate(&self) -> Result<(), ModelError> {
        let (r1, r2) = self.stage_repeats;
        let (c1, c2) = self.stage_channels;
        if r1 == 0 || r2 == 0 || c1 == 0 || c2 == 0 || self.stem.out_channels == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "{} pipeline needs positive repeats and channels",
                self.modality
            )));
        }
        if self.stem.kernel == 0 || self.stem.stride == 0 {
            return Err(ModelError::InvalidSpec("stem kernel and stride must be positive".into()));
        }
        self.block.validate(c1)?;
        self.block.validate(c2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub block: BlockKind,
    pub repeats: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_features: usize,
    pub classes: usize,
}

/// Three per-modality pipelines plus the shared fusion module and head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortfolioSpec {
    pub name: String,
    pub pipelines: PerModality<PipelineSpec>,
    pub fusion: FusionSpec,
    pub head: HeadSpec,
}

impl PortfolioSpec {
    /// Checks the concatenation contract for a square patch of side `patch`.
    pub fn check_shapes(&self, patch: usize) -> Result<(usize, usize, usize), ModelError> {
        for (m, p) in self.pipelines.iter() {
            if p.modality != m {
                return Err(ModelError::InvalidSpec(format!(
                    "pipeline registered under {m} describes {}",
                    p.modality
                )));
            }
            p.validate()?;
        }
        let shapes = self.pipelines.as_ref().map(|_, p| p.output_shape(patch));
        if shapes.rgb != shapes.depth || shapes.rgb != shapes.ir {
            return Err(ModelError::ShapeContractViolation {
                rgb: shapes.rgb,
                depth: shapes.depth,
                ir: shapes.ir,
            });
        }
        if self.fusion.repeats == 0 || self.fusion.channels == 0 {
            return Err(ModelError::InvalidSpec("fusion needs at least one block".into()));
        }
        self.fusion.block.validate(self.fusion.channels)?;
        if self.head.in_features != self.fusion.channels || self.head.classes != 2 {
            return Err(ModelError::InvalidSpec(format!(
                "head must map {} pooled features to 2 logits",
                self.fusion.channels
            )));
        }
        Ok(shapes.rgb)
    }

    pub fn fusion_input_channels(&self) -> usize {
        3 * self.pipelines.rgb.stage_channels.1
    }
}

impl fmt::Display for PortfolioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} | {} | {}",
            self.name,
            self.pipelines.rgb.label(),
            self.pipelines.depth.label(),
            self.pipelines.ir.label()
        )
    }
}

/// Channel widths shared by all named portfolios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchWidths {
    pub stem_channels: usize,
    pub stage_channels: (usize, usize),
    pub cardinality: usize,
    pub fusion_channels: usize,
    pub fusion_repeats: usize,
    /// Stage repeats used for SRB pipelines.
    pub srb_repeats: (usize, usize),
}

impl Default for ArchWidths {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            stage_channels: (64, 128),
            cardinality: 32,
            fusion_channels: 256,
            fusion_repeats: 2,
            srb_repeats: (2, 2),
        }
    }
}

pub const PORTFOLIO_NAMES: [&str; 5] = ["P1", "P2", "P3", "P4", "P5"];

/// Resolves `P1`..`P5` with default widths.
pub fn named_portfolio(name: &str) -> Result<PortfolioSpec, ModelError> {
    named_portfolio_with(name, &ArchWidths::default())
}

/// Resolves `P1`..`P5`:
///
/// | name | rgb      | depth    | ir       |
/// |------|----------|----------|----------|
/// | P1   | SRB      | SRB      | SRB      |
/// | P2   | SRXB22   | SRXB22   | SRXB22   |
/// | P3   | SRXB24   | SRXB24   | SRXB24   |
/// | P4   | SRXB34   | SRXB34   | SRXB34   |
/// | P5   | SRXB22   | SRB      | SRXB22   |
pub fn named_portfolio_with(name: &str, widths: &ArchWidths) -> Result<PortfolioSpec, ModelError> {
    let srxb = BlockKind::Srxb {
        cardinality: widths.cardinality,
    };
    let srb = (BlockKind::Srb, widths.srb_repeats);
    let chains: [(BlockKind, (usize, usize)); 3] = match name {
        "P1" => [srb, srb, srb],
        "P2" => [(srxb, (2, 2)); 3],
        "P3" => [(srxb, (2, 4)); 3],
        "P4" => [(srxb, (3, 4)); 3],
        "P5" => [(srxb, (2, 2)), srb, (srxb, (2, 2))],
        other => return Err(ModelError::UnknownPortfolio(other.to_string())),
    };
    let pipeline = |modality: ModalityId| {
        let (block, stage_repeats) = chains[modality.index()];
        PipelineSpec {
            modality,
            block,
            stem: StemSpec {
                kernel: 3,
                stride: 1,
                out_channels: widths.stem_channels,
            },
            stage_repeats,
            stage_channels: widths.stage_channels,
        }
    };
    Ok(PortfolioSpec {
        name: name.to_string(),
        pipelines: PerModality::from_fn(pipeline),
        fusion: FusionSpec {
            block: srxb,
            repeats: widths.fusion_repeats,
            channels: widths.fusion_channels,
        },
        head: HeadSpec {
            in_features: widths.fusion_channels,
            classes: 2,
        },
    })
}
