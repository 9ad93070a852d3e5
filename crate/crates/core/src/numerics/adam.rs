use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::Tensor;

/// Adam with decoupled weight decay.
///
/// The decay term `lr · λ · θ` is applied directly to the parameters rather
/// than folded into the moment estimates; it plays the role of a Gaussian
/// prior on the weights.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Moment estimates for parameter slot `index`, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        match (self.first.get(index), self.second.get(index)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    pub(crate) fn restore(&mut self, step: u64, moments: Vec<Option<(Tensor, Tensor)>>) {
        self.step = step;
        let (first, second) = moments
            .into_iter()
            .map(|m| match m {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            })
            .unzip();
        self.first = first;
        self.second = second;
    }

    /// Update every trainable parameter that received a gradient, then zero
    /// all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ready: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.trainable() && p.grad_ready())
            .map(|(id, _)| id)
            .collect();
        if ready.is_empty() {
            return Err(Error::contract("adam step without a preceding backward pass"));
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in ready {
            let (value, grad) = store.split_for_update(id);
            let m = self.first[id.index()].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for k in 0..grad.len() {
                let g = grad.data()[k];
                let mk = &mut m.data_mut()[k];
                *mk = b1 * *mk + (1.0 - b1) * g;
                let vk = &mut v.data_mut()[k];
                *vk = b2 * *vk + (1.0 - b2) * g * g;
                let m_hat = m.data()[k] / bc1;
                let v_hat = v.data()[k] / bc2;
                let theta = &mut value.data_mut()[k];
                *theta -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *theta);
            }
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn one_param(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(value), true).unwrap();
        store
    }

    fn set_grad(store: &mut ParamStore, g: f64) {
        let id = store.id("p").unwrap();
        store.accumulate_grad(id, &Tensor::scalar(g));
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut store = one_param(0.7);
        let mut adam = AdamState::new(0.1, 0.0);
        set_grad(&mut store, 0.0);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(store.id("p").unwrap()).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = one_param(0.0);
        let mut adam = AdamState::new(0.1, 0.0);
        set_grad(&mut store, 1.0);
        adam.step(&mut store).unwrap();
        let v = store.value(store.id("p").unwrap()).item();
        assert!((v + 0.1).abs() < 1e-8, "{v}");
        // gradients are cleared after the update
        assert!(!store.get(store.id("p").unwrap()).grad_ready());
        assert_eq!(store.get(store.id("p").unwrap()).grad().item(), 0.0);
    }

    #[test]
    fn pure_decay_shrinks_magnitude() {
        for start in [-2.0, 3.0] {
            let mut store = one_param(start);
            let mut adam = AdamState::new(0.01, 0.5);
            set_grad(&mut store, 0.0);
            adam.step(&mut store).unwrap();
            let v = store.value(store.id("p").unwrap()).item();
            assert!(v.abs() < start.abs());
        }
    }

    #[test]
    fn step_without_backward_is_rejected() {
        let mut store = one_param(1.0);
        let mut adam = AdamState::new(0.1, 0.0);
        assert!(matches!(adam.step(&mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = one_param(3.0);
        let id = store.id("p").unwrap();
        let mut adam = AdamState::new(0.05, 0.0);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let p = tape.param(&store, id);
            let shifted = tape.add_scalar(p, -1.0).unwrap();
            let sq = tape.square(shifted).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss, &mut store).unwrap();
            adam.step(&mut store).unwrap();
        }
        assert!((store.value(id).item() - 1.0).abs() < 1e-2);
        assert_eq!(adam.steps(), 500);
    }
}
