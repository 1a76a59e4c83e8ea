use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Ctx, Error, Result};

fn keep_scale<S: Scalar>(p: f64, rng: &mut impl Rng) -> S {
    if p >= 1.0 || rng.random::<f64>() < p {
        S::zero()
    } else {
        S::lit(1.0 / (1.0 - p))
    }
}

/// Channel dropout for `(N, C, T, H, W)` volumes: whole feature maps are
/// zeroed with probability `p`, survivors scaled by `1 / (1 - p)`.
#[derive(Debug, Clone)]
pub struct Dropout3d<S> {
    pub p: f64,
    mask: Option<(Vec<S>, usize)>,
}

impl<S: Scalar> Dropout3d<S> {
    pub fn new(p: f64) -> Self {
        Self { p, mask: None }
    }

    pub fn forward(&mut self, mut x: Tensor<S>, ctx: &mut Ctx) -> Result<Tensor<S>> {
        self.mask = None;
        if !ctx.training || self.p <= 0.0 {
            return Ok(x);
        }
        if x.ndim() < 3 {
            return Err(Error::Shape(format!(
                "channel dropout needs (N, C, ...), got {:?}",
                x.shape()
            )));
        }
        let maps = x.dim(0) * x.dim(1);
        let p = x.len() / maps;
        let mask: Vec<S> = (0..maps)
            .map(|_| keep_scale(self.p, &mut ctx.rng))
            .collect();
        for (m, chunk) in mask.iter().zip(x.data_mut().chunks_mut(p)) {
            chunk.iter_mut().for_each(|v| *v = *v * *m);
        }
        if ctx.keep_graph {
            self.mask = Some((mask, p));
        }
        Ok(x)
    }

    pub fn backward(&mut self, mut grad: Tensor<S>) -> Result<Tensor<S>> {
        if let Some((mask, p)) = self.mask.take() {
            for (m, chunk) in mask.iter().zip(grad.data_mut().chunks_mut(p)) {
                chunk.iter_mut().for_each(|v| *v = *v * *m);
            }
        }
        Ok(grad)
    }
}

/// Element-wise dropout.
#[derive(Debug, Clone)]
pub struct Dropout<S> {
    pub p: f64,
    mask: Option<Vec<S>>,
}

impl<S: Scalar> Dropout<S> {
    pub fn new(p: f64) -> Self {
        Self { p, mask: None }
    }

    pub fn forward(&mut self, mut x: Tensor<S>, ctx: &mut Ctx) -> Result<Tensor<S>> {
        self.mask = None;
        if !ctx.training || self.p <= 0.0 {
            return Ok(x);
        }
        let mask: Vec<S> = (0..x.len())
            .map(|_| keep_scale(self.p, &mut ctx.rng))
            .collect();
        for (v, m) in x.data_mut().iter_mut().zip(&mask) {
            *v = *v * *m;
        }
        if ctx.keep_graph {
            self.mask = Some(mask);
        }
        Ok(x)
    }

    pub fn backward(&mut self, mut grad: Tensor<S>) -> Result<Tensor<S>> {
        if let Some(mask) = self.mask.take() {
            for (v, m) in grad.data_mut().iter_mut().zip(&mask) {
                *v = *v * *m;
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_is_identity() {
        let x = Tensor::<f32>::full(&[2, 4, 1, 2, 2], 0.5);
        let mut d = Dropout3d::new(0.5);
        assert_eq!(d.forward(x.clone(), &mut Ctx::eval()).unwrap(), x);
    }

    #[test]
    fn channel_maps_drop_together() {
        let x = Tensor::<f64>::full(&[4, 16, 2, 3, 3], 1.0);
        let mut d = Dropout3d::new(0.5);
        let y = d.forward(x, &mut Ctx::train(11)).unwrap();
        let mut zeros = 0;
        for chunk in y.data().chunks(18) {
            assert!(chunk.iter().all(|v| *v == chunk[0]));
            assert!(chunk[0] == 0.0 || chunk[0] == 2.0);
            zeros += (chunk[0] == 0.0) as usize;
        }
        assert!(zeros > 10 && zeros < 54);
        let g = d.backward(Tensor::full(&[4, 16, 2, 3, 3], 1.0)).unwrap();
        assert_eq!(g, y);
    }

    #[test]
    fn same_seed_same_mask() {
        let x = Tensor::<f64>::full(&[3, 10], 1.0);
        let a = Dropout::new(0.2)
            .forward(x.clone(), &mut Ctx::train(4))
            .unwrap();
        let b = Dropout::new(0.2).forward(x, &mut Ctx::train(4)).unwrap();
        assert_eq!(a, b);
    }
}
