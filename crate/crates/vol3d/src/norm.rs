use crate::param::{join_name, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Ctx, Error, Result};

#[derive(Debug, Clone)]
struct Cache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
    training: bool,
}

/// Batch normalization over all non-channel axes of `(N, C, ...)` inputs.
///
/// Running statistics follow the usual exponential update with the unbiased
/// batch variance; normalization in training mode uses the biased one.
#[derive(Debug, Clone)]
pub struct BatchNorm3d<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub num_batches_tracked: Tensor<S>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<Cache<S>>,
}

impl<S: Scalar> BatchNorm3d<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::new(Tensor::full(&[channels], S::one())),
            bias: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], S::one()),
            num_batches_tracked: Tensor::zeros(&[]),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.value.len()
    }

    fn check(&self, x: &Tensor<S>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {:?}",
                self.channels(),
                s
            )));
        }
        Ok((s[0], s[2..].iter().product()))
    }

    pub fn forward(&mut self, mut x: Tensor<S>, ctx: &Ctx) -> Result<Tensor<S>> {
        let (n, p) = self.check(&x)?;
        let c = self.channels();
        let m = (n * p) as f64;
        let mut inv_std = Vec::with_capacity(c);
        let data = x.data_mut();
        for ch in 0..c {
            let (mean, istd) = if ctx.training {
                let mut sum = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * p;
                    sum += data[off..off + p].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / m;
                let mut ss = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * p;
                    ss += data[off..off + p]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = ss / m;
                let unbiased = if m > 1.0 { ss / (m - 1.0) } else { var };
                let mo = self.momentum;
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = S::lit((1.0 - mo) * rm.as_f64() + mo * mean);
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = S::lit((1.0 - mo) * rv.as_f64() + mo * unbiased);
                (mean, 1.0 / (var + self.eps).sqrt())
            } else {
                let rm = self.running_mean.data()[ch].as_f64();
                let rv = self.running_var.data()[ch].as_f64();
                (rm, 1.0 / (rv + self.eps).sqrt())
            };
            inv_std.push(S::lit(istd));
            let (mean, istd) = (S::lit(mean), S::lit(istd));
            for b in 0..n {
                let off = (b * c + ch) * p;
                data[off..off + p]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean) * istd);
            }
        }
        if ctx.training {
            let t = &mut self.num_batches_tracked.data_mut()[0];
            *t = *t + S::one();
        }
        if ctx.keep_graph {
            self.cache = Some(Cache {
                xhat: x.clone(),
                inv_std,
                training: ctx.training,
            });
        }
        let data = x.data_mut();
        for ch in 0..c {
            let g = self.weight.value.data()[ch];
            let be = self.bias.value.data()[ch];
            for b in 0..n {
                let off = (b * c + ch) * p;
                data[off..off + p].iter_mut().for_each(|v| *v = *v * g + be);
            }
        }
        Ok(x)
    }

    pub fn backward(&mut self, mut grad: Tensor<S>) -> Result<Tensor<S>> {
        let cache = self.cache.take().ok_or(Error::NoForward("batch_norm"))?;
        let (n, p) = self.check(&grad)?;
        let c = self.channels();
        let m = S::lit((n * p) as f64);
        let xhat = cache.xhat.data();
        let g = grad.data_mut();
        for ch in 0..c {
            let mut sum_g = S::zero();
            let mut sum_gx = S::zero();
            for b in 0..n {
                let off = (b * c + ch) * p;
                for (gv, xv) in g[off..off + p].iter().zip(&xhat[off..off + p]) {
                    sum_g = sum_g + *gv;
                    sum_gx = sum_gx + *gv * *xv;
                }
            }
            let wg = &mut self.weight.grad.data_mut()[ch];
            *wg = *wg + sum_gx;
            let bg = &mut self.bias.grad.data_mut()[ch];
            *bg = *bg + sum_g;
            let gamma = self.weight.value.data()[ch];
            let k = gamma * cache.inv_std[ch];
            for b in 0..n {
                let off = (b * c + ch) * p;
                let (gs, xs) = (&mut g[off..off + p], &xhat[off..off + p]);
                if cache.training {
                    let km = k / m;
                    for (gv, xv) in gs.iter_mut().zip(xs) {
                        *gv = km * (m * *gv - sum_g - *xv * sum_gx);
                    }
                } else {
                    gs.iter_mut().for_each(|gv| *gv = *gv * k);
                }
            }
        }
        Ok(grad)
    }
}

impl<S: Scalar> Module<S> for BatchNorm3d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&join_name(prefix, "running_mean"), &mut self.running_mean);
        f(&join_name(prefix, "running_var"), &mut self.running_var);
        f(
            &join_name(prefix, "num_batches_tracked"),
            &mut self.num_batches_tracked,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f64> {
        let data = (0..2 * 3 * 8)
            .map(|i| ((i * 37 % 11) as f64) * 0.3 - 1.0)
            .collect();
        Tensor::from_vec(&[2, 3, 2, 2, 2], data).unwrap()
    }

    #[test]
    fn training_output_is_standardized() {
        let mut bn = BatchNorm3d::<f64>::new(3);
        let y = bn.forward(sample(), &Ctx::train(0)).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.outer(b)[ch * 8..(ch + 1) * 8].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert_eq!(bn.num_batches_tracked.data()[0], 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = sample();
        let weights: Vec<f64> = (0..x.len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let loss = |bn: &mut BatchNorm3d<f64>, x: &Tensor<f64>| {
            let y = bn.forward(x.clone(), &Ctx::train(0)).unwrap();
            y.data()
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b * a)
                .sum::<f64>()
        };
        let mut bn = BatchNorm3d::<f64>::new(3);
        bn.weight
            .value
            .data_mut()
            .copy_from_slice(&[1.5, 0.5, -0.7]);
        let y = bn.forward(x.clone(), &Ctx::train(0)).unwrap();
        let g: Vec<f64> = y
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| 2.0 * a * b)
            .collect();
        let dx = bn
            .backward(Tensor::from_vec(y.shape(), g).unwrap())
            .unwrap();
        let h = 1e-6;
        for i in [0, 5, 17, 30, 47] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6, "{fd} vs {}", dx.data()[i]);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm3d::<f64>::new(3);
        bn.running_mean
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, -1.0]);
        bn.running_var.data_mut().copy_from_slice(&[4.0, 1.0, 0.25]);
        bn.eps = 0.0;
        let x = Tensor::full(&[1, 3, 1, 1, 1], 1.0);
        let y = bn.forward(x, &Ctx::eval()).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 4.0]);
    }
}
