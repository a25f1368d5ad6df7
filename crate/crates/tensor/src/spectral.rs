//! Spectral normalization via power iteration.
//!
//! A weight of shape `[out, ...]` is viewed as an `out x rest` matrix `W`. The state
//! keeps a unit left singular vector estimate `u`; the norm estimate is
//! `sigma = ||W^T u||`, which is also `u^T W v` for `v = W^T u / ||W^T u||`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};
use crate::kernels::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState {
    pub u: Vec<f64>,
    pub iterations: usize,
}

fn normalize(v: &mut [f64]) -> Option<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(norm)
}

fn dims(w: &Tensor) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.numel() / rows)
}

impl SpectralNormState {
    pub fn new(rows: usize, rng: &mut impl Rng) -> Self {
        loop {
            let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
            if normalize(&mut u).is_some() {
                return Self { u, iterations: 1 };
            }
        }
    }

    /// Current estimate `||W^T u||` without touching `u`.
    pub fn sigma(&self, w: &Tensor) -> Result<f64> {
        let (rows, cols) = dims(w);
        if self.u.len() != rows {
            return Err(TensorError::shape("spectral_norm", format!("u has {} entries for {rows} rows", self.u.len())));
        }
        let mut v = vec![0.0; cols];
        gemm(1, rows, cols, &self.u, false, w.data(), false, &mut v, false);
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s <= 0.0 {
            return Err(TensorError::ZeroSpectralNorm(format!("{:?}", w.shape())));
        }
        Ok(s)
    }

    /// Run `iters` rounds of `v = norm(W^T u); u = norm(W v)`; returns the new estimate.
    pub fn power_iterate(&mut self, w: &Tensor, iters: usize) -> Result<f64> {
        let (rows, cols) = dims(w);
        if self.u.len() != rows {
            return Err(TensorError::shape("spectral_norm", format!("u has {} entries for {rows} rows", self.u.len())));
        }
        let zero = || TensorError::ZeroSpectralNorm(format!("{:?}", w.shape()));
        let mut v = vec![0.0; cols];
        let mut u = vec![0.0; rows];
        for _ in 0..iters {
            gemm(1, rows, cols, &self.u, false, w.data(), false, &mut v, false);
            normalize(&mut v).ok_or_else(zero)?;
            gemm(rows, cols, 1, w.data(), false, &v, false, &mut u, false);
            normalize(&mut u).ok_or_else(zero)?;
            self.u.copy_from_slice(&u);
        }
        self.sigma(w)
    }
}

/// Power-iterate `state.iterations` times and return `weight / sigma`.
pub fn spectral_normalize(weight: &Tensor, state: &mut SpectralNormState) -> Result<Tensor> {
    let iters = state.iterations;
    let sigma = state.power_iterate(weight, iters)?;
    Ok(weight.map(|x| x / sigma))
}
