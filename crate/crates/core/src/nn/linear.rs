use rand::Rng;

use super::{join_name, Layer, Param, Tensor};

/// Fully connected layer over flattened `[n, in, 1, 1]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    in_features: usize,
    out_features: usize,
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let value = (0..in_features * out_features)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_features,
            out_features,
            weight: Param::new(vec![out_features, in_features], value),
            bias: Param::new(vec![out_features], vec![0.0; out_features]),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }
}

impl Layer for Linear {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let out = self.forward_eval(x);
        self.input = Some(x.clone());
        out
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.sample_len(), self.in_features, "linear input size");
        let n = x.n();
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        for i in 0..n {
            let xi = x.sample(i);
            let yi = out.sample_mut(i);
            for (o, y) in yi.iter_mut().enumerate() {
                let row = &self.weight.value[o * self.in_features..(o + 1) * self.in_features];
                *y = self.bias.value[o] + row.iter().zip(xi).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.input.take().expect("linear backward without forward_train");
        let n = x.n();
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let xi = x.sample(i);
            let gi = grad_out.sample(i);
            let dxi = dx.sample_mut(i);
            for (o, &g) in gi.iter().enumerate() {
                self.bias.grad[o] += g;
                let base = o * self.in_features;
                for j in 0..self.in_features {
                    self.weight.grad[base + j] += g * xi[j];
                    dxi[j] += g * self.weight.value[base + j];
                }
            }
        }
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_name(prefix, "weight"), &self.weight);
        f(&join_name(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}
