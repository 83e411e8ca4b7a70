//! PipeNet: one selectable block chain per modality, channel concatenation,
//! a fusion stack of SE bottlenecks, global pooling and a two-way head.
//!
//! Class index 1 is "live" everywhere in the crate.

mod blocks;
mod checkpoint;
mod spec;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blocks::{Pipeline, SeBottleneck, SqueezeExcite};
pub use checkpoint::{Checkpoint, CheckpointMeta, StoredTensor, CHECKPOINT_MAGIC};
pub use spec::{
    named_portfolio, named_portfolio_with, ArchWidths, BlockKind, FusionSpec, HeadSpec, PipelineSpec,
    PortfolioSpec, StemSpec, PORTFOLIO_NAMES, SE_REDUCTION,
};

use crate::modality::{ModalityId, PerModality};
use crate::nn::{join_name, GlobalAvgPool, Layer, Linear, Param, Tensor};

/// Index of the live class in the logits.
pub const LIVE_CLASS: usize = 1;

/// One tensor per modality, all with the same batch size.
pub type ModalBatch = PerModality<Tensor>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown portfolio `{0}` (expected one of P1..P5)")]
    UnknownPortfolio(String),
    #[error("pipeline outputs disagree: rgb {rgb:?}, depth {depth:?}, ir {ir:?}")]
    ShapeContractViolation {
        rgb: (usize, usize, usize),
        depth: (usize, usize, usize),
        ir: (usize, usize, usize),
    },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a model was built from; enough to rebuild it before loading weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEcho {
    pub spec: PortfolioSpec,
    pub input_channels: PerModality<usize>,
    pub patch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
struct PipeNet {
    pipelines: PerModality<Pipeline>,
    fusion: Vec<SeBottleneck>,
    pool: GlobalAvgPool,
    head: Linear,
    pipeline_channels: usize,
}

impl PipeNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (m, p) in self.pipelines.iter() {
            p.visit_params(&format!("pipeline.{m}"), f);
        }
        for (i, b) in self.fusion.iter().enumerate() {
            b.visit_params(&join_name("fusion", &i.to_string()), f);
        }
        self.head.visit_params("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (m, p) in self.pipelines.iter_mut() {
            p.visit_params_mut(&format!("pipeline.{m}"), f);
        }
        for (i, b) in self.fusion.iter_mut().enumerate() {
            b.visit_params_mut(&join_name("fusion", &i.to_string()), f);
        }
        self.head.visit_params_mut("head", f);
    }
}

/// An assembled network plus the spec it was built from.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    echo: ModelEcho,
    net: PipeNet,
}

/// Parameter group of a dotted parameter name: `pipeline.<modality>`, `fusion` or `head`.
pub fn param_group(name: &str) -> &str {
    if name.starts_with("pipeline.") {
        let end = name[9..].find('.').map_or(name.len(), |i| 9 + i);
        &name[..end]
    } else {
        name.split('.').next().unwrap_or(name)
    }
}

/// Builds a model; identical arguments give identical initial parameters.
pub fn build_pipenet(
    spec: &PortfolioSpec,
    input_channels: PerModality<usize>,
    patch_size: usize,
    seed: u64,
) -> Result<ModelHandle, ModelError> {
    let (channels, _, _) = spec.check_shapes(patch_size)?;
    if input_channels.iter().any(|(_, &c)| c == 0) {
        return Err(ModelError::InvalidSpec("input channel counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pipelines = PerModality::from_fn(|m| Pipeline::new(&spec.pipelines[m], input_channels[m], &mut rng));
    let mut fusion = Vec::with_capacity(spec.fusion.repeats);
    let mut cin = 3 * channels;
    for _ in 0..spec.fusion.repeats {
        fusion.push(SeBottleneck::new(spec.fusion.block, cin, spec.fusion.channels, 1, &mut rng));
        cin = spec.fusion.channels;
    }
    let head = Linear::new(spec.head.in_features, spec.head.classes, &mut rng);
    Ok(ModelHandle {
        echo: ModelEcho {
            spec: spec.clone(),
            input_channels,
            patch_size,
            seed,
        },
        net: PipeNet {
            pipelines,
            fusion,
            pool: GlobalAvgPool::new(),
            head,
            pipeline_channels: channels,
        },
    })
}

impl ModelHandle {
    pub fn echo(&self) -> &ModelEcho {
        &self.echo
    }

    pub fn spec(&self) -> &PortfolioSpec {
        &self.echo.spec
    }

    pub fn patch_size(&self) -> usize {
        self.echo.patch_size
    }

    pub fn input_channels(&self) -> &PerModality<usize> {
        &self.echo.input_channels
    }

    fn check_batch(&self, batch: &ModalBatch) -> Result<usize, ModelError> {
        let n = batch.rgb.n();
        for (m, t) in batch.iter() {
            let want = [n, self.echo.input_channels[m], self.echo.patch_size, self.echo.patch_size];
            if t.shape() != want {
                return Err(ModelError::ShapeMismatch(format!(
                    "{m} batch has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        if n == 0 {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        Ok(n)
    }

    /// Evaluation-mode logits, shape `[n, 2, 1, 1]`.
    pub fn forward(&self, batch: &ModalBatch) -> Result<Tensor, ModelError> {
        self.check_batch(batch)?;
        let net = &self.net;
        let feats = PerModality::from_fn(|m| net.pipelines[m].forward_eval(&batch[m]));
        let mut h = Tensor::concat_channels(&[&feats.rgb, &feats.depth, &feats.ir]);
        for block in &net.fusion {
            h = block.forward_eval(&h);
        }
        Ok(net.head.forward_eval(&net.pool.forward_eval(&h)))
    }

    /// Training-mode logits; caches activations for [`ModelHandle::backward`].
    pub fn forward_train(&mut self, batch: &ModalBatch) -> Result<Tensor, ModelError> {
        self.check_batch(batch)?;
        let net = &mut self.net;
        let rgb = net.pipelines.rgb.forward_train(&batch.rgb);
        let depth = net.pipelines.depth.forward_train(&batch.depth);
        let ir = net.pipelines.ir.forward_train(&batch.ir);
        let mut h = Tensor::concat_channels(&[&rgb, &depth, &ir]);
        for block in &mut net.fusion {
            h = block.forward_train(&h);
        }
        let pooled = net.pool.forward_train(&h);
        Ok(net.head.forward_train(&pooled))
    }

    /// Back-propagates `grad_logits` through the last `forward_train`,
    /// accumulating into every parameter gradient.
    pub fn backward(&mut self, grad_logits: &Tensor) {
        let net = &mut self.net;
        let g = net.head.backward(grad_logits);
        let mut g = net.pool.backward(&g);
        for block in net.fusion.iter_mut().rev() {
            g = block.backward(&g);
        }
        let c = net.pipeline_channels;
        let parts = g.split_channels(&[c, c, c]);
        for (m, part) in ModalityId::ALL.into_iter().zip(parts) {
            net.pipelines[m].backward(&part);
        }
    }

    /// Live-class probability per batch element.
    pub fn predict_prob(&self, batch: &ModalBatch) -> Result<Vec<f64>, ModelError> {
        let logits = self.forward(batch)?;
        Ok((0..logits.n()).map(|i| live_probability(logits.sample(i))).collect())
    }

    pub fn zero_grad(&mut self) {
        self.net.visit_mut(&mut |_, p| p.zero_grad());
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.net.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_mut(f);
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.group_param_counts().values().sum()
    }

    /// Trainable scalars per group (`pipeline.rgb`, `pipeline.depth`, `pipeline.ir`, `fusion`, `head`).
    pub fn group_param_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        self.visit_params(&mut |name, p| {
            if p.trainable {
                *counts.entry(param_group(name).to_string()).or_insert(0) += p.numel();
            }
        });
        counts
    }

    /// Every parameter and buffer keyed by its dotted name.
    pub fn state(&self) -> BTreeMap<String, StoredTensor> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |name, p| {
            out.insert(
                name.to_string(),
                StoredTensor {
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                },
            );
        });
        out
    }

    /// Overwrites parameters from `state`; every model tensor must be present
    /// with a matching shape.
    pub fn load_state(&mut self, state: &BTreeMap<String, StoredTensor>) -> Result<(), ModelError> {
        let mut problem = None;
        self.visit_params_mut(&mut |name, p| {
            if problem.is_some() {
                return;
            }
            match state.get(name) {
                Some(t) if t.shape == p.shape && t.data.len() == p.value.len() => {
                    p.value.copy_from_slice(&t.data);
                }
                Some(t) => problem = Some(format!("tensor {name} has shape {:?}, model expects {:?}", t.shape, p.shape)),
                None => problem = Some(format!("tensor {name} missing")),
            }
        });
        match problem {
            Some(msg) => Err(ModelError::Checkpoint(msg)),
            None => Ok(()),
        }
    }

    /// Rebuilds the architecture recorded in `ckpt` and loads its weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<ModelHandle, ModelError> {
        let echo = &ckpt.meta.model;
        let mut model = build_pipenet(&echo.spec, echo.input_channels.clone(), echo.patch_size, echo.seed)?;
        model.load_state(&ckpt.tensors)?;
        Ok(model)
    }
}

/// Softmax probability of the live class from a pair of logits.
pub fn live_probability(logits: &[f64]) -> f64 {
    let diff = logits[1 - LIVE_CLASS] - logits[LIVE_CLASS];
    1.0 / (1.0 + diff.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_widths() -> ArchWidths {
        ArchWidths {
            stem_channels: 4,
            stage_channels: (8, 16),
            cardinality: 4,
            fusion_channels: 16,
            fusion_repeats: 1,
            srb_repeats: (1, 1),
        }
    }

    #[test]
    fn probability_closed_forms() {
        assert_eq!(live_probability(&[0.0, 0.0]), 0.5);
        let (x, c) = (0.37, 1.3);
        let p = live_probability(&[x, x + c]);
        assert!((p - 1.0 / (1.0 + (-c as f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn group_names_cover_five_groups() {
        let spec = named_portfolio_with("P5", &tiny_widths()).unwrap();
        let model = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 0).unwrap();
        let groups: Vec<String> = model.group_param_counts().into_keys().collect();
        assert_eq!(groups, ["fusion", "head", "pipeline.depth", "pipeline.ir", "pipeline.rgb"]);
        assert_eq!(param_group("pipeline.rgb.stem.conv.weight"), "pipeline.rgb");
        assert_eq!(param_group("head.bias"), "head");
    }

    #[test]
    fn wrong_patch_size_is_a_shape_mismatch() {
        let spec = named_portfolio_with("P1", &tiny_widths()).unwrap();
        let model = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 0).unwrap();
        let batch = PerModality::from_fn(|_| Tensor::zeros([2, 1, 12, 12]));
        assert!(matches!(model.forward(&batch), Err(ModelError::ShapeMismatch(_))));
    }
}
