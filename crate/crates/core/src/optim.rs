//! Adam with a separate learning rate per parameter group.

use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr_logits: f64,
    pub lr_base: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr_logits: f64, lr_base: f64) -> Self {
        let zeros = |id: ParamId| {
            let (r, c) = store.value(id).shape();
            Tensor::zeros(r, c)
        };
        Self {
            lr_logits,
            lr_base,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::AssignmentLogits => self.lr_logits,
            ParamGroup::Base => self.lr_base,
        }
    }

    /// One update from per-parameter gradients indexed by [`ParamId`];
    /// `None` entries (unused or frozen parameters) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (T::lit(self.beta1), T::lit(self.beta2), T::lit(self.eps));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else { continue };
            let lr = self.learning_rate(store.entry(id).group);
            let step_size = T::lit(lr / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = store.value_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}
