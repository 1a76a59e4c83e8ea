use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Ctx, Error, Result};

/// Mean over every axis after the channel axis: `(N, C, ...) -> (N, C)`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<S: Scalar>(&mut self, x: &Tensor<S>, ctx: &Ctx) -> Result<Tensor<S>> {
        if x.ndim() < 3 {
            return Err(Error::Shape(format!(
                "pooling needs (N, C, ...), got {:?}",
                x.shape()
            )));
        }
        let (n, c) = (x.dim(0), x.dim(1));
        let p: usize = x.shape()[2..].iter().product();
        let inv = S::lit(1.0 / p as f64);
        let data = x
            .data()
            .chunks(p)
            .map(|m| m.iter().copied().sum::<S>() * inv)
            .collect();
        if ctx.keep_graph {
            self.input_shape = Some(x.shape().to_vec());
        }
        Tensor::from_vec(&[n, c], data)
    }

    pub fn backward<S: Scalar>(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = self
            .input_shape
            .take()
            .ok_or(Error::NoForward("global_avg_pool"))?;
        let p: usize = shape[2..].iter().product();
        let inv = S::lit(1.0 / p as f64);
        let mut out = Vec::with_capacity(grad.len() * p);
        for g in grad.data() {
            out.extend(std::iter::repeat_n(*g * inv, p));
        }
        Tensor::from_vec(&shape, out)
    }
}
