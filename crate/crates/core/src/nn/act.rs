use super::{Layer, Param, Tensor};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
        let out = self.forward_eval(x);
        self.mask = Some(mask);
        out
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without forward_train");
        let data = grad_out
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::from_vec(grad_out.shape(), data)
    }

    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}

    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Spatial mean: `[n, c, h, w] -> [n, c, 1, 1]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.input_shape = Some(x.shape());
        self.forward_eval(x)
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Tensor::from_vec([n, c, 1, 1], data)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let shape = self.input_shape.take().expect("pool backward without forward_train");
        let plane = shape[2] * shape[3];
        let mut dx = Tensor::zeros(shape);
        for (chunk, g) in dx.data_mut().chunks_mut(plane).zip(grad_out.data()) {
            chunk.fill(g / plane as f64);
        }
        dx
    }

    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}

    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}
