//! Parameterized layers recorded onto a [`Graph`].

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::spectral::SpectralNormState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// A tape bound to a read-only parameter store for one forward pass.
pub struct Graph<'a> {
    tape: Tape,
    store: &'a ParamStore,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { tape: Tape::new(), store }
    }

    /// Continue recording onto an existing tape, e.g. after the store was updated.
    pub fn with_tape(tape: Tape, store: &'a ParamStore) -> Self {
        Self { tape, store }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.store.load(&mut self.tape, id)
    }

    /// Load a weight, dividing by its spectral-norm estimate when it carries state.
    pub fn weight(&mut self, id: ParamId) -> Result<Var> {
        let w = self.param(id);
        match self.store.spectral(id) {
            Some(state) => {
                let u = state.u.clone();
                self.tape.spectral_norm(w, &u)
            }
            None => Ok(w),
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| dist.sample(rng)).collect()).expect("consistent shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        spectral: bool,
    ) -> Result<Self> {
        let w = he_normal(&[out_c, in_c, kernel, kernel], in_c * kernel * kernel, rng);
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_c]))?;
        if spectral {
            store.attach_spectral(weight, SpectralNormState::new(out_c, rng));
        }
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.weight(self.weight)?;
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_f: usize, out_f: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_normal(&[out_f, in_f], in_f, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_f]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.weight(self.weight)?;
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Pre-activation residual block: `x + conv(relu(norm(conv(relu(norm(x))))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, spectral: bool) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1, spectral)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1, 1, spectral)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.instance_norm(x, INSTANCE_NORM_EPS)?;
        let h = g.relu(h);
        let h = self.conv1.forward(g, h)?;
        let h = g.instance_norm(h, INSTANCE_NORM_EPS)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Residual block that doubles the spatial size with nearest-neighbour upsampling
/// followed by convolution on both the main and the 1x1 shortcut path.
#[derive(Clone, Debug)]
pub struct UpResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Conv2d,
}

impl UpResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        spectral: bool,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), in_c, out_c, 3, 1, 1, spectral)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1, spectral)?,
            shortcut: Conv2d::new(store, rng, &format!("{name}.shortcut"), in_c, out_c, 1, 1, 0, spectral)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.instance_norm(x, INSTANCE_NORM_EPS)?;
        let h = g.relu(h);
        let h = g.upsample2x(h)?;
        let h = self.conv1.forward(g, h)?;
        let h = g.instance_norm(h, INSTANCE_NORM_EPS)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let s = g.upsample2x(x)?;
        let s = self.shortcut.forward(g, s)?;
        g.add(h, s)
    }
}
