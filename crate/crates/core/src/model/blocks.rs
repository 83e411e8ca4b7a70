use rand::Rng;

use super::spec::{BlockKind, SE_REDUCTION};
use crate::nn::{join_name, BatchNorm2d, Conv2d, Layer, Linear, Param, Relu, Tensor};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Channel gate: global pool, bottleneck MLP, sigmoid, rescale.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    fc1: Linear,
    relu: Relu,
    fc2: Linear,
    cache: Option<(Tensor, Vec<f64>)>,
}

impl SqueezeExcite {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / SE_REDUCTION).max(1);
        Self {
            fc1: Linear::new(channels, hidden, rng),
            relu: Relu::new(),
            fc2: Linear::new(hidden, channels, rng),
            cache: None,
        }
    }

    fn pool(x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Tensor::from_vec([n, c, 1, 1], data)
    }

    fn scale(x: &Tensor, gate: &[f64]) -> Tensor {
        let plane = x.h() * x.w();
        let mut out = x.clone();
        for (chunk, g) in out.data_mut().chunks_mut(plane).zip(gate) {
            chunk.iter_mut().for_each(|v| *v *= g);
        }
        out
    }
}

impl Layer for SqueezeExcite {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let z = self.fc1.forward_train(&Self::pool(x));
        let a = self.relu.forward_train(&z);
        let u = self.fc2.forward_train(&a);
        let gate: Vec<f64> = u.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Self::scale(x, &gate);
        self.cache = Some((x.clone(), gate));
        out
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let z = self.fc1.forward_eval(&Self::pool(x));
        let a = self.relu.forward_eval(&z);
        let u = self.fc2.forward_eval(&a);
        let gate: Vec<f64> = u.data().iter().map(|&v| sigmoid(v)).collect();
        Self::scale(x, &gate)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (x, gate) = self.cache.take().expect("SE backward without forward_train");
        let plane = x.h() * x.w();
        let mut dx = Self::scale(grad_out, &gate);
        let du: Vec<f64> = grad_out
            .data()
            .chunks(plane)
            .zip(x.data().chunks(plane))
            .zip(&gate)
            .map(|((dy, xv), g)| {
                let dg: f64 = dy.iter().zip(xv).map(|(a, b)| a * b).sum();
                dg * g * (1.0 - g)
            })
            .collect();
        let du = Tensor::from_vec([x.n(), x.c(), 1, 1], du);
        let da = self.fc2.backward(&du);
        let dz = self.relu.backward(&da);
        let ds = self.fc1.backward(&dz);
        for (chunk, d) in dx.data_mut().chunks_mut(plane).zip(ds.data()) {
            let share = d / plane as f64;
            chunk.iter_mut().for_each(|v| *v += share);
        }
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit_params(&join_name(prefix, "fc1"), f);
        self.fc2.visit_params(&join_name(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_params_mut(&join_name(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join_name(prefix, "fc2"), f);
    }
}

/// Convolution followed by batch norm.
#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, groups: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, stride, k / 2, groups, rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.conv.forward_train(x);
        self.bn.forward_train(&y)
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        self.bn.forward_eval(&self.conv.forward_eval(x))
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.bn.backward(g);
        self.conv.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit_params(&join_name(prefix, "conv"), f);
        self.bn.visit_params(&join_name(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params_mut(&join_name(prefix, "conv"), f);
        self.bn.visit_params_mut(&join_name(prefix, "bn"), f);
    }
}

/// Squeeze-and-excitation bottleneck: 1x1 reduce, 3x3 (grouped for SRXB),
/// 1x1 expand, SE gate, residual add, ReLU. A projection shortcut is used
/// when the stride or channel count changes.
#[derive(Debug, Clone)]
pub struct SeBottleneck {
    reduce: ConvBn,
    relu1: Relu,
    spatial: ConvBn,
    relu2: Relu,
    expand: ConvBn,
    se: SqueezeExcite,
    shortcut: Option<ConvBn>,
    relu_out: Relu,
}

impl SeBottleneck {
    pub fn new<R: Rng + ?Sized>(kind: BlockKind, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let width = kind.bottleneck_width(cout);
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, 1, rng));
        Self {
            reduce: ConvBn::new(cin, width, 1, 1, 1, rng),
            relu1: Relu::new(),
            spatial: ConvBn::new(width, width, 3, stride, kind.groups(), rng),
            relu2: Relu::new(),
            expand: ConvBn::new(width, cout, 1, 1, 1, rng),
            se: SqueezeExcite::new(cout, rng),
            shortcut,
            relu_out: Relu::new(),
        }
    }
}

impl Layer for SeBottleneck {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let h = self.reduce.forward_train(x);
        let h = self.relu1.forward_train(&h);
        let h = self.spatial.forward_train(&h);
        let h = self.relu2.forward_train(&h);
        let h = self.expand.forward_train(&h);
        let mut h = self.se.forward_train(&h);
        match &mut self.shortcut {
            Some(proj) => h.add_assign(&proj.forward_train(x)),
            None => h.add_assign(x),
        }
        self.relu_out.forward_train(&h)
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let h = self.reduce.forward_eval(x);
        let h = self.relu1.forward_eval(&h);
        let h = self.spatial.forward_eval(&h);
        let h = self.relu2.forward_eval(&h);
        let h = self.expand.forward_eval(&h);
        let mut h = self.se.forward_eval(&h);
        match &self.shortcut {
            Some(proj) => h.add_assign(&proj.forward_eval(x)),
            None => h.add_assign(x),
        }
        self.relu_out.forward_eval(&h)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let g = self.relu_out.backward(grad_out);
        let skip = match &mut self.shortcut {
            Some(proj) => proj.backward(&g),
            None => g.clone(),
        };
        let h = self.se.backward(&g);
        let h = self.expand.backward(&h);
        let h = self.relu2.backward(&h);
        let h = self.spatial.backward(&h);
        let h = self.relu1.backward(&h);
        let mut dx = self.reduce.backward(&h);
        dx.add_assign(&skip);
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.reduce.visit(&join_name(prefix, "reduce"), f);
        self.spatial.visit(&join_name(prefix, "spatial"), f);
        self.expand.visit(&join_name(prefix, "expand"), f);
        self.se.visit_params(&join_name(prefix, "se"), f);
        if let Some(proj) = &self.shortcut {
            proj.visit(&join_name(prefix, "shortcut"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.reduce.visit_mut(&join_name(prefix, "reduce"), f);
        self.spatial.visit_mut(&join_name(prefix, "spatial"), f);
        self.expand.visit_mut(&join_name(prefix, "expand"), f);
        self.se.visit_params_mut(&join_name(prefix, "se"), f);
        if let Some(proj) = &mut self.shortcut {
            proj.visit_mut(&join_name(prefix, "shortcut"), f);
        }
    }
}

/// Stem convolution plus two stages of bottlenecks for one modality.
#[derive(Debug, Clone)]
pub struct Pipeline {
    stem: ConvBn,
    stem_relu: Relu,
    stage1: Vec<SeBottleneck>,
    stage2: Vec<SeBottleneck>,
}

impl Pipeline {
    pub fn new<R: Rng + ?Sized>(spec: &super::PipelineSpec, in_channels: usize, rng: &mut R) -> Self {
        let stem = ConvBn {
            conv: Conv2d::new(
                in_channels,
                spec.stem.out_channels,
                spec.stem.kernel,
                spec.stem.stride,
                spec.stem.padding(),
                1,
                rng,
            ),
            bn: BatchNorm2d::new(spec.stem.out_channels),
        };
        let stage = |cin: usize, cout: usize, repeats: usize, rng: &mut R| {
            (0..repeats)
                .map(|i| {
                    let (inc, stride) = if i == 0 { (cin, 2) } else { (cout, 1) };
                    SeBottleneck::new(spec.block, inc, cout, stride, rng)
                })
                .collect::<Vec<_>>()
        };
        let (c1, c2) = spec.stage_channels;
        let stage1 = stage(spec.stem.out_channels, c1, spec.stage_repeats.0, rng);
        let stage2 = stage(c1, c2, spec.stage_repeats.1, rng);
        Self {
            stem,
            stem_relu: Relu::new(),
            stage1,
            stage2,
        }
    }
}

impl Layer for Pipeline {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let h = self.stem.forward_train(x);
        let mut h = self.stem_relu.forward_train(&h);
        for block in self.stage1.iter_mut().chain(self.stage2.iter_mut()) {
            h = block.forward_train(&h);
        }
        h
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut h = self.stem_relu.forward_eval(&self.stem.forward_eval(x));
        for block in self.stage1.iter().chain(self.stage2.iter()) {
            h = block.forward_eval(&h);
        }
        h
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for block in self.stage2.iter_mut().rev().chain(self.stage1.iter_mut().rev()) {
            g = block.backward(&g);
        }
        let g = self.stem_relu.backward(&g);
        self.stem.backward(&g)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join_name(prefix, "stem"), f);
        for (i, b) in self.stage1.iter().enumerate() {
            b.visit_params(&join_name(prefix, &format!("stage1.{i}")), f);
        }
        for (i, b) in self.stage2.iter().enumerate() {
            b.visit_params(&join_name(prefix, &format!("stage2.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join_name(prefix, "stem"), f);
        for (i, b) in self.stage1.iter_mut().enumerate() {
            b.visit_params_mut(&join_name(prefix, &format!("stage1.{i}")), f);
        }
        for (i, b) in self.stage2.iter_mut().enumerate() {
            b.visit_params_mut(&join_name(prefix, &format!("stage2.{i}")), f);
        }
    }
}
