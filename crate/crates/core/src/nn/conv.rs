use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::gemm::gemm;
use super::{join_name, Layer, Param, Tensor};

/// 2-D convolution without bias, with optional channel groups.
///
/// Weight layout is `[out, in / groups, k, k]`. Lowered to one GEMM per
/// (sample, group) over an im2col buffer; each sample is computed
/// independently, so a sample's output never depends on its batch position.
#[derive(Debug, Clone)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    weight: Param,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    input_shape: [usize; 4],
    cols: Vec<f64>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(groups >= 1 && kernel >= 1 && stride >= 1);
        assert!(
            in_channels % groups == 0 && out_channels % groups == 0,
            "channels ({in_channels}, {out_channels}) not divisible by groups {groups}"
        );
        let fan_in = (in_channels / groups) * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let numel = out_channels * fan_in;
        let value: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            weight: Param::new(vec![out_channels, in_channels / groups, kernel, kernel], value),
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        let s = self.stride;
        assert!(h + 2 * p >= k && w + 2 * p >= k, "input {h}x{w} smaller than kernel {k}");
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let l = ho * wo;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * l..][..l];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let l = ho * wo;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * l..][..l];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Multiplies the grouped weight into one sample's column buffer.
    fn apply_weight(&self, cols: &[f64], l: usize, out: &mut [f64]) {
        let og = self.out_channels / self.groups;
        let kg = self.col_rows() / self.groups;
        for g in 0..self.groups {
            gemm(
                og,
                kg,
                l,
                &self.weight.value[g * og * kg..],
                (kg, 1),
                &cols[g * kg * l..],
                (l, 1),
                0.0,
                &mut out[g * og * l..],
                (l, 1),
            );
        }
    }

    fn check_input(&self, x: &Tensor) {
        assert_eq!(
            x.c(),
            self.in_channels,
            "conv expects {} input channels, got {}",
            self.in_channels,
            x.c()
        );
    }
}

impl Layer for Conv2d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.check_input(x);
        let [n, _, h, w] = x.shape();
        let (ho, wo) = self.output_hw(h, w);
        let l = ho * wo;
        let per_sample = self.col_rows() * l;
        let mut cols = vec![0.0; n * per_sample];
        let mut out = Tensor::zeros([n, self.out_channels, ho, wo]);
        for i in 0..n {
            let sample_cols = &mut cols[i * per_sample..(i + 1) * per_sample];
            if self.is_pointwise() {
                sample_cols.copy_from_slice(x.sample(i));
            } else {
                self.im2col(x.sample(i), h, w, ho, wo, sample_cols);
            }
            self.apply_weight(sample_cols, l, out.sample_mut(i));
        }
        self.cache = Some(ConvCache {
            input_shape: x.shape(),
            cols,
        });
        out
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        self.check_input(x);
        let [n, _, h, w] = x.shape();
        let (ho, wo) = self.output_hw(h, w);
        let l = ho * wo;
        let mut out = Tensor::zeros([n, self.out_channels, ho, wo]);
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; self.col_rows() * l]
        };
        for i in 0..n {
            if self.is_pointwise() {
                self.apply_weight(x.sample(i), l, out.sample_mut(i));
            } else {
                self.im2col(x.sample(i), h, w, ho, wo, &mut cols);
                self.apply_weight(&cols, l, out.sample_mut(i));
            }
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("conv backward without forward_train");
        let [n, c, h, w] = cache.input_shape;
        let (ho, wo) = self.output_hw(h, w);
        assert_eq!(grad_out.shape(), [n, self.out_channels, ho, wo], "conv grad shape");
        let l = ho * wo;
        let og = self.out_channels / self.groups;
        let kg = self.col_rows() / self.groups;
        let per_sample = self.col_rows() * l;
        let mut dx = Tensor::zeros([n, c, h, w]);
        let mut dcols = vec![0.0; per_sample];
        for i in 0..n {
            let cols = &cache.cols[i * per_sample..(i + 1) * per_sample];
            let dy = grad_out.sample(i);
            for g in 0..self.groups {
                let dy_g = &dy[g * og * l..];
                // dW_g += dY_g · cols_g^T
                gemm(
                    og,
                    l,
                    kg,
                    dy_g,
                    (l, 1),
                    &cols[g * kg * l..],
                    (1, l),
                    1.0,
                    &mut self.weight.grad[g * og * kg..],
                    (kg, 1),
                );
                // dcols_g = W_g^T · dY_g
                gemm(
                    kg,
                    og,
                    l,
                    &self.weight.value[g * og * kg..],
                    (1, kg),
                    dy_g,
                    (l, 1),
                    0.0,
                    &mut dcols[g * kg * l..],
                    (l, 1),
                );
            }
            if self.is_pointwise() {
                dx.sample_mut(i).copy_from_slice(&dcols);
            } else {
                self.col2im(&dcols, h, w, ho, wo, dx.sample_mut(i));
            }
        }
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join_name(prefix, "weight"), &self.weight);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
    }
}
