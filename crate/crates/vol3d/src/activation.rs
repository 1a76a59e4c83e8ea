use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Ctx, Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<S: Scalar>(&mut self, mut x: Tensor<S>, ctx: &Ctx) -> Tensor<S> {
        x.map_inplace(|v| v.max(S::zero()));
        self.active = ctx
            .keep_graph
            .then(|| x.data().iter().map(|v| *v > S::zero()).collect());
        x
    }

    pub fn backward<S: Scalar>(&mut self, mut grad: Tensor<S>) -> Result<Tensor<S>> {
        let active = self.active.take().ok_or(Error::NoForward("relu"))?;
        for (g, a) in grad.data_mut().iter_mut().zip(active) {
            if !a {
                *g = S::zero();
            }
        }
        Ok(grad)
    }
}
