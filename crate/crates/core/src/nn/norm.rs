use super::{join_name, Layer, Param, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation.
///
/// Training mode normalises with batch statistics and folds them into
/// running estimates; evaluation mode uses the frozen running estimates only,
/// so it is an elementwise affine map.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    channels: usize,
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    shape: [usize; 4],
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }

    fn for_each_channel(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
        let [n, c, h, w] = shape;
        let plane = h * w;
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * plane;
                f(ch, start, start + plane);
            }
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.channels, "batch norm channel mismatch");
        let shape = x.shape();
        let count = (shape[0] * shape[2] * shape[3]) as f64;
        let data = x.data();

        let mut mean = vec![0.0; self.channels];
        Self::for_each_channel(shape, |ch, a, b| mean[ch] += data[a..b].iter().sum::<f64>());
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; self.channels];
        Self::for_each_channel(shape, |ch, a, b| {
            var[ch] += data[a..b].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>()
        });
        var.iter_mut().for_each(|v| *v /= count);

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut out = Tensor::zeros(shape);
        let y = out.data_mut();
        Self::for_each_channel(shape, |ch, a, b| {
            for j in a..b {
                xhat[j] = (data[j] - mean[ch]) * inv_std[ch];
                y[j] = self.gamma.value[ch] * xhat[j] + self.beta.value[ch];
            }
        });

        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..self.channels {
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - MOMENTUM) * *rm + MOMENTUM * mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - MOMENTUM) * *rv + MOMENTUM * var[ch] * unbias;
        }
        self.cache = Some(BnCache { shape, xhat, inv_std });
        out
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.channels, "batch norm channel mismatch");
        let shape = x.shape();
        let scale: Vec<f64> = (0..self.channels)
            .map(|ch| self.gamma.value[ch] / (self.running_var.value[ch] + EPS).sqrt())
            .collect();
        let data = x.data();
        let mut out = Tensor::zeros(shape);
        let y = out.data_mut();
        Self::for_each_channel(shape, |ch, a, b| {
            for j in a..b {
                y[j] = (data[j] - self.running_mean.value[ch]) * scale[ch] + self.beta.value[ch];
            }
        });
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("batch norm backward without forward_train");
        assert_eq!(grad_out.shape(), cache.shape);
        let shape = cache.shape;
        let count = (shape[0] * shape[2] * shape[3]) as f64;
        let dy = grad_out.data();
        let xhat = &cache.xhat;

        let mut sum_dy = vec![0.0; self.channels];
        let mut sum_dy_xhat = vec![0.0; self.channels];
        Self::for_each_channel(shape, |ch, a, b| {
            for j in a..b {
                sum_dy[ch] += dy[j];
                sum_dy_xhat[ch] += dy[j] * xhat[j];
            }
        });
        for ch in 0..self.channels {
            self.gamma.grad[ch] += sum_dy_xhat[ch];
            self.beta.grad[ch] += sum_dy[ch];
        }

        let mut dx = Tensor::zeros(shape);
        let out = dx.data_mut();
        Self::for_each_channel(shape, |ch, a, b| {
            let g = self.gamma.value[ch];
            let k = g * cache.inv_std[ch] / count;
            for j in a..b {
                out[j] = k * (count * dy[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch]);
            }
        });
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_name(prefix, "gamma"), &self.gamma);
        f(&join_name(prefix, "beta"), &self.beta);
        f(&join_name(prefix, "running_mean"), &self.running_mean);
        f(&join_name(prefix, "running_var"), &self.running_var);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "gamma"), &mut self.gamma);
        f(&join_name(prefix, "beta"), &mut self.beta);
        f(&join_name(prefix, "running_mean"), &mut self.running_mean);
        f(&join_name(prefix, "running_var"), &mut self.running_var);
    }
}
