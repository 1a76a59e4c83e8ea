use rand::Rng;

use crate::param::{join_name, Module, Param};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;
use crate::{Ctx, Error, Precision, Result};

/// Affine map `(N, in) -> (N, out)`.
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    input: Option<(Tensor<S>, Precision)>,
}

impl<S: Scalar> Linear<S> {
    /// Uniform weights in `[-1/sqrt(in), 1/sqrt(in)]`, zero bias.
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| S::lit(rng.random_range(-bound..bound)))
            .collect();
        Self {
            weight: Param::new(Tensor::from_vec(&[outputs, inputs], w).expect("shape")),
            bias: Param::new(Tensor::zeros(&[outputs])),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&mut self, x: &Tensor<S>, ctx: &Ctx) -> Result<Tensor<S>> {
        let (fi, fo) = (self.in_features(), self.out_features());
        if x.ndim() != 2 || x.dim(1) != fi {
            return Err(Error::Shape(format!(
                "linear expects (N, {fi}), got {:?}",
                x.shape()
            )));
        }
        let n = x.dim(0);
        let half = ctx.precision == Precision::Half;
        let (xr, wr);
        let (xs, ws): (&[S], &[S]) = if half {
            xr = x.data().iter().map(|v| v.round_half()).collect::<Vec<_>>();
            wr = self
                .weight
                .value
                .data()
                .iter()
                .map(|v| v.round_half())
                .collect::<Vec<_>>();
            (&xr, &wr)
        } else {
            (x.data(), self.weight.value.data())
        };
        let mut out = Vec::with_capacity(n * fo);
        for _ in 0..n {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(
            S::one(),
            MatRef::row_major(xs, n, fi),
            MatRef::transposed(ws, fo, fi),
            S::one(),
            &mut out,
            fo,
        );
        if ctx.keep_graph {
            self.input = Some((x.clone(), ctx.precision));
        }
        Tensor::from_vec(&[n, fo], out)
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let (x, precision) = self.input.take().ok_or(Error::NoForward("linear"))?;
        let (fi, fo) = (self.in_features(), self.out_features());
        let n = x.dim(0);
        let half = precision == Precision::Half;
        let round = |v: &[S]| -> Vec<S> {
            if half {
                v.iter().map(|a| a.round_half()).collect()
            } else {
                v.to_vec()
            }
        };
        let (xs, ws, gs) = (
            round(x.data()),
            round(self.weight.value.data()),
            round(grad.data()),
        );
        gemm(
            S::one(),
            MatRef::transposed(&gs, n, fo),
            MatRef::row_major(&xs, n, fi),
            S::one(),
            self.weight.grad.data_mut(),
            fi,
        );
        for row in grad.data().chunks(fo) {
            for (b, g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b = *b + *g;
            }
        }
        let mut dx = vec![S::zero(); n * fi];
        gemm(
            S::one(),
            MatRef::row_major(&gs, n, fo),
            MatRef::row_major(&ws, fo, fi),
            S::zero(),
            &mut dx,
            fi,
        );
        Tensor::from_vec(&[n, fi], dx)
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn forward_and_backward() {
        let mut lin = Linear::<f64>::new(2, 3, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        lin.weight
            .value
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        lin.bias.value.data_mut().copy_from_slice(&[0.5, 0.0, -0.5]);
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        let y = lin.forward(&x, &Ctx::train(0)).unwrap();
        assert_eq!(y.data(), &[3.5, 7.0, 10.5, 4.5, 8.0, 11.5]);
        let g = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let dx = lin.backward(&g).unwrap();
        assert_eq!(dx.data(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(lin.weight.grad.data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        assert_eq!(lin.bias.grad.data(), &[1.0, 0.0, 1.0]);
    }
}
