use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::spectral::SpectralNormState;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient accumulator.
#[derive(Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

/// Named parameters, their gradient accumulators and spectral-norm state.
///
/// Loading a parameter onto a tape bumps an atomic access counter so callers can
/// audit which parameters a forward pass touched, even from several threads.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
    spectral: BTreeMap<ParamId, SpectralNormState>,
    access: Vec<AtomicU64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.clone(), value, grad, requires_grad: true });
        self.by_name.insert(name, id);
        self.access.push(AtomicU64::new(0));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).copied().ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids whose names satisfy `pred`, in registration order.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| pred(&p.name)).map(|(id, _)| id).collect()
    }

    pub fn set_requires_grad(&mut self, ids: &[ParamId], flag: bool) {
        for id in ids {
            self.params[id.0].requires_grad = flag;
        }
    }

    /// Record the parameter on a tape as a leaf, tracking gradient only if enabled.
    pub fn load(&self, tape: &mut Tape, id: ParamId) -> Var {
        self.access[id.0].fetch_add(1, Ordering::Relaxed);
        let p = &self.params[id.0];
        tape.param_leaf(id, p.value.clone(), p.requires_grad)
    }

    pub fn access_count(&self, id: ParamId) -> u64 {
        self.access[id.0].load(Ordering::Relaxed)
    }

    pub fn reset_access(&self) {
        for a in &self.access {
            a.store(0, Ordering::Relaxed);
        }
    }

    /// Add the parameter gradients of one backward pass into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.requires_grad {
                continue;
            }
            p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn attach_spectral(&mut self, id: ParamId, state: SpectralNormState) {
        self.spectral.insert(id, state);
    }

    pub fn spectral(&self, id: ParamId) -> Option<&SpectralNormState> {
        self.spectral.get(&id)
    }

    pub fn spectral_mut(&mut self, id: ParamId) -> Option<&mut SpectralNormState> {
        self.spectral.get_mut(&id)
    }

    pub fn spectral_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.spectral.keys().copied()
    }

    /// One round of power iteration for every spectrally normalized weight in `ids`.
    pub fn power_iterate(&mut self, ids: &[ParamId]) -> Result<()> {
        for id in ids {
            if let Some(state) = self.spectral.get_mut(id) {
                let p = &self.params[id.0];
                state.power_iterate(&p.value, 1).map_err(|e| match e {
                    TensorError::ZeroSpectralNorm(_) => TensorError::ZeroSpectralNorm(p.name.clone()),
                    other => other,
                })?;
            }
        }
        Ok(())
    }

    /// Global L2 norm of the gradient accumulators of `ids`.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|id| self.params[id.0].grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale gradients of `ids` so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        let norm = self.grad_norm(ids);
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for id in ids {
                self.params[id.0].grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameter_gets_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let b = store.add("b", Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        store.set_requires_grad(&[b], false);
        let mut tape = Tape::new();
        let va = store.load(&mut tape, a);
        let vb = store.load(&mut tape, b);
        let m = tape.mul(va, vb).unwrap();
        let root = tape.sum(m);
        let grads = tape.backward(root).unwrap();
        store.accumulate(&grads);
        assert_eq!(store.get(a).grad.data(), &[3.0, 4.0]);
        assert_eq!(store.get(b).grad.data(), &[0.0, 0.0]);
        assert_eq!(store.access_count(a), 1);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.add("w", Tensor::scalar(1.0)).is_err());
        assert!(store.id("missing").is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        store.get_mut(a).grad = Tensor::from_vec(vec![30.0, 40.0]);
        let before = store.clip_grad_norm(&[a], 10.0);
        assert_eq!(before, 50.0);
        assert!((store.grad_norm(&[a]) - 10.0).abs() < 1e-12);
    }
}
