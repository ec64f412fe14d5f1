//! Adam optimizer with bias correction.

use super::elem::Elem;
use super::graph::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamState<E> {
    pub step_count: u64,
    pub learning_rate: E,
    pub beta1: E,
    pub beta2: E,
    pub epsilon: E,
    first_moment: Vec<Tensor<E>>,
    second_moment: Vec<Tensor<E>>,
}

impl<E: Elem> AdamState<E> {
    /// Defaults: lr 1e-3, beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn new(store: &ParamStore<E>) -> Self {
        Self::with_learning_rate(store, E::from_f64(1e-3))
    }

    pub fn with_learning_rate(store: &ParamStore<E>, lr: E) -> Self {
        AdamState {
            step_count: 0,
            learning_rate: lr,
            beta1: E::from_f64(0.9),
            beta2: E::from_f64(0.999),
            epsilon: E::from_f64(1e-8),
            first_moment: store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect(),
            second_moment: store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect(),
        }
    }

    /// One bias-corrected update from the gradients currently in `store`.
    pub fn step(&mut self, store: &mut ParamStore<E>) -> Result<()> {
        if self.first_moment.len() != store.len() {
            return Err(Error::shape(format!(
                "adam state tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        for (i, (m, v)) in self
            .first_moment
            .iter()
            .zip(&self.second_moment)
            .enumerate()
        {
            if m.shape() != store.values()[i].shape() || v.shape() != store.values()[i].shape() {
                return Err(Error::shape(format!(
                    "adam moment shape {:?} does not match parameter shape {:?}",
                    m.shape(),
                    store.values()[i].shape()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = E::one() - self.beta1.powi(t);
        let bc2 = E::one() - self.beta2.powi(t);
        let one = E::one();
        for id in store.ids().collect::<Vec<_>>() {
            let grad = store.grad(id).clone();
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            for ((mv, vv), &g) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(grad.data())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * g;
                *vv = self.beta2 * *vv + (one - self.beta2) * g * g;
            }
            let value = store.value_mut(id);
            for ((p, &mv), &vv) in value
                .data_mut()
                .iter_mut()
                .zip(m.data().iter())
                .zip(v.data().iter())
            {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *p = *p - self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
