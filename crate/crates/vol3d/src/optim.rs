//! AdamW, global-norm gradient clipping and dynamic loss scaling.

use std::collections::BTreeMap;

use crate::param::Module;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// name, so the model may be traversed in any fixed order.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module<S> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let step_size = S::lit(lr / bc1);
        let bc2_sqrt = S::lit(bc2.sqrt());
        let decay = S::lit(1.0 - lr * self.config.weight_decay);
        let (b1s, b2s) = (S::lit(b1), S::lit(b2));
        let (ob1, ob2) = (S::lit(1.0 - b1), S::lit(1.0 - b2));
        let eps = S::lit(self.config.eps);
        let moments = &mut self.moments;
        model.visit_params("", &mut |name, p| {
            let (m, v) = moments.entry(name.to_string()).or_insert_with(|| {
                (
                    vec![S::zero(); p.value.len()],
                    vec![S::zero(); p.value.len()],
                )
            });
            let grads = p.grad.data();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w = *w * decay;
                *m = b1s * *m + ob1 * *g;
                *v = b2s * *v + ob2 * *g * *g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *w = *w - step_size * *m / denom;
            }
        });
    }
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm<S: Scalar, M: Module<S> + ?Sized>(model: &mut M) -> f64 {
    let mut ss = 0.0;
    model.visit_params("", &mut |_, p| ss += p.grad.sum_sq());
    ss.sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<S: Scalar, M: Module<S> + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let total = grad_norm(model);
    let coef = max_norm / (total + 1e-6);
    if coef < 1.0 {
        let k = S::lit(coef);
        model.visit_params("", &mut |_, p| p.grad.scale(k));
    }
    total
}

/// Dynamic loss scaling for reduced-precision training: the loss gradient is
/// multiplied by `scale`, parameter gradients are divided by it before the
/// update, and steps with non-finite gradients are skipped while the scale
/// backs off.
#[derive(Debug, Clone, PartialEq)]
pub struct GradScaler {
    pub scale: f64,
    pub growth_factor: f64,
    pub backoff_factor: f64,
    pub growth_interval: u32,
    good_steps: u32,
}

impl Default for GradScaler {
    fn default() -> Self {
        Self {
            scale: 65536.0,
            growth_factor: 2.0,
            backoff_factor: 0.5,
            growth_interval: 2000,
            good_steps: 0,
        }
    }
}

impl GradScaler {
    /// Divide gradients by the current scale; returns false if any gradient
    /// is not finite.
    pub fn unscale<S: Scalar, M: Module<S> + ?Sized>(&self, model: &mut M) -> bool {
        let inv = S::lit(1.0 / self.scale);
        let mut finite = true;
        model.visit_params("", &mut |_, p| {
            p.grad.scale(inv);
            finite &= p.grad.all_finite();
        });
        finite
    }

    pub fn update(&mut self, found_inf: bool) {
        if found_inf {
            self.scale *= self.backoff_factor;
            self.good_steps = 0;
        } else {
            self.good_steps += 1;
            if self.good_steps >= self.growth_interval {
                self.scale *= self.growth_factor;
                self.good_steps = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{join_name, Param};
    use crate::tensor::Tensor;

    struct Quad {
        w: Param<f64>,
    }

    impl Module<f64> for Quad {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&join_name(prefix, "w"), &mut self.w);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut q = Quad {
            w: Param::new(Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()),
        };
        q.w.grad.data_mut().copy_from_slice(&[0.3, -2.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut q, 0.1);
        let w = q.w.value.data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut q = Quad {
            w: Param::new(Tensor::from_vec(&[1], vec![2.0]).unwrap()),
        };
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut q, 0.1);
        assert!((q.w.value.data()[0] - 2.0 * 0.95).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad {
            w: Param::new(Tensor::from_vec(&[3], vec![5.0, -3.0, 0.5]).unwrap()),
        };
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..2000 {
            q.zero_grad();
            let g: Vec<f64> = q.w.value.data().iter().map(|v| 2.0 * v).collect();
            q.w.grad.data_mut().copy_from_slice(&g);
            opt.step(&mut q, 0.05);
        }
        assert!(q.w.value.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut q = Quad {
            w: Param::new(Tensor::zeros(&[2])),
        };
        q.w.grad.data_mut().copy_from_slice(&[3.0, 4.0]);
        let before = clip_grad_norm(&mut q, 1.0);
        assert_eq!(before, 5.0);
        assert!(grad_norm(&mut q) <= 1.0);
        q.w.grad.data_mut().copy_from_slice(&[0.3, 0.4]);
        clip_grad_norm(&mut q, 1.0);
        assert_eq!(q.w.grad.data(), &[0.3, 0.4]);
    }

    #[test]
    fn scaler_backs_off_on_overflow() {
        let mut q = Quad {
            w: Param::new(Tensor::zeros(&[1])),
        };
        let mut s = GradScaler::default();
        q.w.grad.data_mut()[0] = f64::INFINITY;
        assert!(!s.unscale(&mut q));
        s.update(true);
        assert_eq!(s.scale, 32768.0);
        q.w.grad.data_mut()[0] = 65536.0;
        let s2 = GradScaler::default();
        assert!(s2.unscale(&mut q));
        assert_eq!(q.w.grad.data()[0], 1.0);
    }
}
