use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8 }
    }
}

/// First and second moment estimates for an ordered group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub ids: Vec<ParamId>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let zeros: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.get(id).value.numel()]).collect();
        Self { ids, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Apply one bias-corrected Adam update from the accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &Adam) -> Result<()> {
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get(id);
            if !p.requires_grad {
                return Err(TensorError::FrozenParameter(p.name.clone()));
            }
            if p.value.numel() != self.m[k].len() || p.grad.numel() != self.m[k].len() {
                return Err(TensorError::shape("adam", format!("state for `{}` does not match", p.name)));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grad = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(values)).unwrap();
        (store, id)
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let (mut store, id) = store_with(vec![1.0, -2.0, 0.5]);
        store.get_mut(id).grad = Tensor::from_vec(vec![0.3, -7.0, 2.0]);
        let cfg = Adam::new(1e-3, 0.9, 0.999);
        let mut state = AdamState::new(&store, vec![id]);
        state.step(&mut store, &cfg).unwrap();
        let got = store.get(id).value.data().to_vec();
        let want = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-10);
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = store_with(vec![1.0, 2.0]);
        let cfg = Adam::new(1e-2, 0.5, 0.9);
        let mut state = AdamState::new(&store, vec![id]);
        for _ in 0..20 {
            state.step(&mut store, &cfg).unwrap();
        }
        assert_eq!(store.get(id).value.data(), &[1.0, 2.0]);
        assert_eq!(state.t, 20);
    }

    #[test]
    fn frozen_parameter_update_is_refused() {
        let (mut store, id) = store_with(vec![1.0]);
        store.set_requires_grad(&[id], false);
        let mut state = AdamState::new(&store, vec![id]);
        assert!(matches!(
            state.step(&mut store, &Adam::new(1e-3, 0.9, 0.999)),
            Err(TensorError::FrozenParameter(_))
        ));
    }
}
