use crate::error::{shape_err, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Cosine decay from `base` to `min` over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.total <= 1 {
            return self.base;
        }
        let p = (step.min(self.total - 1)) as f64 / (self.total - 1) as f64;
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(shapes: &[&[usize]], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            t: 0,
        }
    }

    /// One update; `grads[i]` is `None` for parameters that got no gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2): (T, T) = (lit(self.beta1), lit(self.beta2));
        let (one_b1, one_b2): (T, T) = (lit(1.0 - self.beta1), lit(1.0 - self.beta2));
        let step: T = lit(lr / bc1);
        let inv_bc2: T = lit(1.0 / bc2);
        let eps: T = lit(self.eps);
        let decay: T = lit(1.0 - lr * self.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return shape_err("AdamW::step", p.shape(), g.shape());
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv = *pv * decay - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
