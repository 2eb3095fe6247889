use std::collections::HashMap;

use crate::numerics::float::{cast, Float};
use crate::numerics::graph::Gradients;
use crate::numerics::params::{ParamId, ParamStore};

/// Adaptive-moment optimiser with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<ParamId, Vec<T>>,
    v: HashMap<ParamId, Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2): (T, T) = (cast(self.beta1), cast(self.beta2));
        let (one_b1, one_b2): (T, T) = (cast(1.0 - self.beta1), cast(1.0 - self.beta2));
        let step_size: T = cast(self.lr / c1);
        let inv_c2: T = cast(1.0 / c2);
        let eps: T = cast(self.eps);
        for (id, g) in grads.params() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let n = g.numel();
            let m = self.m.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(id).or_insert_with(|| vec![T::zero(); n]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
    }
}
