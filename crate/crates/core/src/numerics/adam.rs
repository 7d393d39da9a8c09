use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Adam with bias correction.
///
/// Moments and step counts are tracked per parameter. A parameter that has
/// no gradient buffer in a given step is left untouched, moments included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: Vec<Option<Moments>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.0005)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if !grads.has_any() {
            return Err(Error::MissingGradients);
        }
        self.step += 1;
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let param = params.get_mut(id);
            if !param.trainable {
                continue;
            }
            let value = param.value.data_mut();
            let m = self.moments[id.index()].get_or_insert_with(|| Moments {
                step: 0,
                first: vec![0.0; value.len()],
                second: vec![0.0; value.len()],
            });
            m.step += 1;
            let t = m.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            for (((p, &g), m1), m2) in value
                .iter_mut()
                .zip(g)
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = self.beta1 * *m1 + (1.0 - self.beta1) * g;
                *m2 = self.beta2 * *m2 + (1.0 - self.beta2) * g * g;
                let m_hat = *m1 / c1;
                let v_hat = *m2 / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(value: f64) -> (ParamStore, crate::numerics::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(value), true).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, id) = single(0.7);
        let mut grads = Gradients::new(&store);
        grads.buffer(id, 1)[0] = 0.0;
        let mut adam = AdamState::default();
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.value(id).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t = 1: m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        let (mut store, id) = single(0.0);
        let mut grads = Gradients::new(&store);
        grads.buffer(id, 1)[0] = 1.0;
        let mut adam = AdamState::default();
        adam.step(&mut store, &grads).unwrap();
        let expected = -0.0005 / (1.0 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
        assert_eq!(adam.step, 1);
        assert_eq!(grads.get(id).unwrap(), &[1.0]);
    }

    #[test]
    fn missing_gradients_is_an_error() {
        let (mut store, _) = single(1.0);
        let grads = Gradients::new(&store);
        let mut adam = AdamState::default();
        assert!(matches!(adam.step(&mut store, &grads), Err(Error::MissingGradients)));
    }

    #[test]
    fn frozen_and_untouched_parameters_are_skipped() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0), true).unwrap();
        let b = store.add("b", Tensor::scalar(1.0), false).unwrap();
        let c = store.add("c", Tensor::scalar(1.0), true).unwrap();
        let mut grads = Gradients::new(&store);
        grads.buffer(a, 1)[0] = 1.0;
        grads.buffer(b, 1)[0] = 1.0;
        let mut adam = AdamState::default();
        adam.step(&mut store, &grads).unwrap();
        assert!(store.value(a).item() < 1.0);
        assert_eq!(store.value(b).item(), 1.0);
        assert_eq!(store.value(c).item(), 1.0);
    }

    #[test]
    fn identical_runs_have_identical_trajectories() {
        let run = || {
            let (mut store, id) = single(0.3);
            let mut adam = AdamState::new(0.01);
            let mut traj = Vec::new();
            for _ in 0..20 {
                let x = store.value(id).item();
                let mut grads = Gradients::new(&store);
                grads.buffer(id, 1)[0] = 2.0 * x - 1.0;
                adam.step(&mut store, &grads).unwrap();
                traj.push(store.value(id).item().to_bits());
            }
            traj
        };
        assert_eq!(run(), run());
    }
}
