//! Minimal CPU tensor engine: NCHW `f64` tensors and the handful of layers the
//! model needs, each with an explicit backward pass.
//!
//! Layers cache what they need for the backward pass only in
//! [`Layer::forward_train`]. [`Layer::forward_eval`] takes `&self`, so frozen
//! parameters can be shared across concurrent readers.

mod act;
mod conv;
mod gemm;
mod linear;
mod loss;
mod norm;
mod param;
mod tensor;

pub use act::{GlobalAvgPool, Relu};
pub use conv::Conv2d;
pub use linear::Linear;
pub use loss::{log_softmax_row, softmax_cross_entropy, LossOutput};
pub use norm::BatchNorm2d;
pub use param::Param;
pub use tensor::Tensor;

/// A differentiable layer.
pub trait Layer {
    /// Training-mode forward; caches activations for [`Layer::backward`].
    fn forward_train(&mut self, x: &Tensor) -> Tensor;

    /// Evaluation-mode forward; pure in `(parameters, x)`.
    fn forward_eval(&self, x: &Tensor) -> Tensor;

    /// Consumes the cache of the last `forward_train`, accumulates parameter
    /// gradients and returns the gradient with respect to the input.
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

/// Joins parameter path segments with `.`.
pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
