use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Anything that owns named parameters and buffers.
///
/// Names are dot-separated paths (`layer1.0.conv1.0.weight`) built from the
/// `prefix` handed down by the parent.
pub trait Module<S: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>));

    /// Non-trainable state such as normalization running statistics.
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor<S>)) {}

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

/// Join a parent prefix and a child name.
pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
