//! Adam with L2 weight decay folded into the gradient.

use awb_tensor::{Grads, Real, Tensor};

use crate::error::{invalid, Result};
use crate::params::{Binding, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3.5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(invalid!("invalid optimizer settings {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    steps: i32,
}

/// Moment estimates per parameter. A parameter whose shape changes (a
/// rebuilt classifier) starts over with fresh moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    slots: Vec<Option<Slot<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, slots: Vec::new() }
    }

    pub fn reset(&mut self, id: ParamId) {
        if let Some(s) = self.slots.get_mut(id.0) {
            *s = None;
        }
    }

    /// Update every parameter in `binding` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, binding: &Binding<T>, grads: &Grads<T>) {
        if self.slots.len() < store.len() {
            self.slots.resize_with(store.len(), || None);
        }
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (eps, wd) = (T::of(c.eps), T::of(c.weight_decay));
        for &(id, var) in &binding.vars {
            let Some(grad) = grads.get(var) else { continue };
            let value = store.get_mut(id);
            let slot = match &mut self.slots[id.0] {
                Some(s) if s.m.shape() == value.shape() => s,
                other => other.insert(Slot { m: Tensor::zeros(value.shape()), v: Tensor::zeros(value.shape()), steps: 0 }),
            };
            slot.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(slot.steps);
            let bc2 = 1.0 - c.beta2.powi(slot.steps);
            let step = T::of(c.lr / bc1);
            let bc2_sqrt = T::of(bc2.sqrt());
            let data = value.data_mut();
            for (((p, &g), m), v) in data.iter_mut().zip(grad.data()).zip(slot.m.data_mut()).zip(slot.v.data_mut()) {
                let g = g + wd * *p;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - step * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Ctx, Mode, ParamGroup, ParamRole, Trainable};
    use awb_tensor::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap(), ParamGroup::Backbone, ParamRole::Weight);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
        for _ in 0..500 {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &store, Mode::Train, Trainable::ALL);
            let x = ctx.param(id);
            let binding = ctx.finish();
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq).unwrap();
            let grads = g.backward(loss).unwrap();
            opt.step(&mut store, &binding, &grads);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2), "{:?}", store.get(id));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr·sign(g) up to eps.
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_f64(&[1], &[1.0]).unwrap(), ParamGroup::Backbone, ParamRole::Weight);
        let mut opt = Adam::new(AdamConfig { lr: 0.01, weight_decay: 0.0, eps: 1e-12, ..Default::default() });
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, Mode::Train, Trainable::ALL);
        let x = ctx.param(id);
        let binding = ctx.finish();
        let loss = g.scale(x, 5.0).unwrap();
        let grads = g.backward(loss).unwrap();
        opt.step(&mut store, &binding, &grads);
        assert!((store.get(id).data()[0] - 0.99).abs() < 1e-9);
    }
}
