//! Central finite-difference verification of reverse-mode gradients.
//!
//! Relative error is `|a - n| / max(|a|, |n|, REL_FLOOR)`. Coordinates where the
//! one-sided differences disagree (a kink such as ReLU at 0 lies within the step)
//! are excluded and counted separately, as are coordinates where central differences
//! at `h` and `h/2` disagree.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};
use crate::nn::{Conv2d, Graph, Linear, ResidualBlock, UpResidualBlock, INSTANCE_NORM_EPS};
use crate::params::{ParamId, ParamStore};
use crate::spectral::SpectralNormState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-3;
const KINK_RATIO: f64 = 1e-2;
/// Central differences at `h` and `h/2` must agree this closely for a coordinate to count.
const SMOOTH_RATIO: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub excluded: usize,
    /// Description of the coordinate with the largest error.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tolerance
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.excluded += other.excluded;
    }

    fn record(&mut self, analytic: f64, eval: &mut dyn FnMut(f64) -> Result<f64>, h: f64, label: impl Fn() -> String) -> Result<()> {
        let f0 = eval(0.0)?;
        let fp = eval(h)?;
        let fm = eval(-h)?;
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()).max(REL_FLOOR) {
            self.excluded += 1;
            return Ok(());
        }
        let central = (fp - fm) / (2.0 * h);
        let half = (eval(h / 2.0)? - eval(-h / 2.0)?) / h;
        if (central - half).abs() > SMOOTH_RATIO * central.abs().max(half.abs()).max(REL_FLOOR) {
            self.excluded += 1;
            return Ok(());
        }
        let err = rel_error(analytic, central);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {central:.6e})", label());
        }
        Ok(())
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max rel err {:.3e} over {} coords ({} excluded near kinks); worst: {}",
            self.max_rel_err, self.checked, self.excluded, self.worst
        )
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Check gradients of `f` with respect to every coordinate of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let mut report = GradCheckReport::default();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        tape.constant(t)
                    })
                    .collect();
                let root = f(&mut tape, &vars)?;
                Ok(tape.value(root).item())
            };
            report.record(analytic[i][j], &mut eval, h, || format!("input {i}[{j}]"))?;
        }
    }
    Ok(report)
}

/// Check gradients of the scalar built by `f` with respect to selected parameter
/// coordinates. `f` must not mutate spectral-norm state, so repeated evaluations agree.
pub fn check_params<F>(store: &mut ParamStore, coords: &[(ParamId, usize)], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let (mut tape, root) = f(store)?;
    let grads = tape.backward(root)?;
    let mut analytic: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
    for (id, g) in grads.params() {
        let slot = analytic.entry(id).or_insert_with(|| vec![0.0; g.len()]);
        slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    let mut report = GradCheckReport::default();
    for &(id, j) in coords {
        let a = analytic.get(&id).map_or(0.0, |g| g[j]);
        let original = store.get(id).value.data()[j];
        let name = store.get(id).name.clone();
        let mut eval = |delta: f64| -> Result<f64> {
            store.get_mut(id).value.data_mut()[j] = original + delta;
            let (tape, root) = f(store)?;
            Ok(tape.value(root).item())
        };
        let outcome = report.record(a, &mut eval, h, || format!("{name}[{j}]"));
        store.get_mut(id).value.data_mut()[j] = original;
        outcome?;
    }
    Ok(report)
}

/// Every coordinate of every parameter in `ids`.
pub fn all_coords(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
    ids.iter().flat_map(|&id| (0..store.get(id).value.numel()).map(move |j| (id, j))).collect()
}

/// `count` coordinates sampled uniformly (with replacement) across `ids`.
pub fn sample_coords(store: &ParamStore, ids: &[ParamId], count: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    let all = all_coords(store, ids);
    if all.len() <= count {
        return all;
    }
    (0..count).map(|_| all[rng.gen_range(0..all.len())]).collect()
}

/// Layer kinds covered by the built-in self-test suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    UpsampleConv,
    Linear,
    Relu,
    LeakyRelu,
    Sigmoid,
    Softmax,
    LogSoftmax,
    InstanceNorm,
    GlobalAvgPool,
    ElementwiseAdd,
    ChannelConcat,
    ResidualBlock,
    UpResidualBlock,
    SpectralNorm,
}

impl LayerKind {
    pub const ALL: [LayerKind; 15] = [
        LayerKind::Conv2d,
        LayerKind::UpsampleConv,
        LayerKind::Linear,
        LayerKind::Relu,
        LayerKind::LeakyRelu,
        LayerKind::Sigmoid,
        LayerKind::Softmax,
        LayerKind::LogSoftmax,
        LayerKind::InstanceNorm,
        LayerKind::GlobalAvgPool,
        LayerKind::ElementwiseAdd,
        LayerKind::ChannelConcat,
        LayerKind::ResidualBlock,
        LayerKind::UpResidualBlock,
        LayerKind::SpectralNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::UpsampleConv => "upsample_conv",
            LayerKind::Linear => "fully_connected",
            LayerKind::Relu => "relu",
            LayerKind::LeakyRelu => "leaky_relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Softmax => "softmax",
            LayerKind::LogSoftmax => "log_softmax",
            LayerKind::InstanceNorm => "instance_norm",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::ElementwiseAdd => "elementwise_add",
            LayerKind::ChannelConcat => "channel_concat",
            LayerKind::ResidualBlock => "residual_block",
            LayerKind::UpResidualBlock => "upsampling_residual_block",
            LayerKind::SpectralNorm => "spectral_norm",
        }
    }
}

impl FromStr for LayerKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::invalid(format!("unknown layer kind `{s}`")))
    }
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).expect("shape")
}

/// Scalar readout `sum(y * r)` with a fixed random `r`, so every output coordinate
/// contributes a distinct weight.
fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let r = randn(tape.shape(y), &mut rng);
    let p = tape.mul_const(y, r)?;
    Ok(tape.sum(p))
}

/// Finite-difference check of one layer kind on random ~100-element inputs,
/// covering both input and parameter gradients.
pub fn check_layer(kind: LayerKind, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let h = DEFAULT_STEP;
    let out_seed = seed ^ 0x5eed;

    type Body = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
    let (inputs, body): (Vec<Tensor>, Body) = match kind {
        LayerKind::Conv2d => {
            let conv = Conv2d::new(&mut store, &mut rng, "conv", 2, 3, 3, 2, 1, false)?;
            (vec![randn(&[1, 2, 7, 7], &mut rng)], Box::new(move |g, x| conv.forward(g, x[0])))
        }
        LayerKind::UpsampleConv => {
            let conv = Conv2d::new(&mut store, &mut rng, "conv", 2, 2, 3, 1, 1, false)?;
            (
                vec![randn(&[1, 2, 5, 5], &mut rng)],
                Box::new(move |g, x| {
                    let u = g.upsample2x(x[0])?;
                    conv.forward(g, u)
                }),
            )
        }
        LayerKind::Linear => {
            let fc = Linear::new(&mut store, &mut rng, "fc", 20, 5)?;
            (vec![randn(&[5, 20], &mut rng)], Box::new(move |g, x| fc.forward(g, x[0])))
        }
        LayerKind::Relu => (vec![randn(&[100], &mut rng)], Box::new(|g, x| Ok(g.relu(x[0])))),
        LayerKind::LeakyRelu => (vec![randn(&[100], &mut rng)], Box::new(|g, x| Ok(g.leaky_relu(x[0], 0.2)))),
        LayerKind::Sigmoid => (vec![randn(&[100], &mut rng)], Box::new(|g, x| Ok(g.sigmoid(x[0])))),
        LayerKind::Softmax => (vec![randn(&[10, 10], &mut rng)], Box::new(|g, x| Ok(g.softmax(x[0])))),
        LayerKind::LogSoftmax => (vec![randn(&[10, 10], &mut rng)], Box::new(|g, x| Ok(g.log_softmax(x[0])))),
        LayerKind::InstanceNorm => (
            vec![randn(&[2, 3, 4, 4], &mut rng)],
            Box::new(|g, x| g.instance_norm(x[0], INSTANCE_NORM_EPS)),
        ),
        LayerKind::GlobalAvgPool => (vec![randn(&[2, 3, 4, 4], &mut rng)], Box::new(|g, x| g.global_avg_pool(x[0]))),
        LayerKind::ElementwiseAdd => (
            vec![randn(&[2, 50], &mut rng), randn(&[2, 50], &mut rng)],
            Box::new(|g, x| g.add(x[0], x[1])),
        ),
        LayerKind::ChannelConcat => (
            vec![randn(&[2, 1, 5, 5], &mut rng), randn(&[2, 2, 5, 5], &mut rng)],
            Box::new(|g, x| g.concat_channels(&[x[0], x[1]])),
        ),
        LayerKind::ResidualBlock => {
            let block = ResidualBlock::new(&mut store, &mut rng, "res", 2, true)?;
            (vec![randn(&[1, 2, 5, 5], &mut rng)], Box::new(move |g, x| block.forward(g, x[0])))
        }
        LayerKind::UpResidualBlock => {
            let block = UpResidualBlock::new(&mut store, &mut rng, "up", 2, 2, true)?;
            (vec![randn(&[1, 2, 4, 4], &mut rng)], Box::new(move |g, x| block.forward(g, x[0])))
        }
        LayerKind::SpectralNorm => {
            let w = store.add("w", randn(&[6, 12], &mut rng))?;
            store.attach_spectral(w, SpectralNormState::new(6, &mut rng));
            let x = randn(&[12], &mut rng);
            let x = x.reshape(&[1, 12])?;
            (
                vec![x],
                Box::new(move |g, x| {
                    let wn = g.weight(w)?;
                    g.linear(x[0], wn, None)
                }),
            )
        }
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let store_ref = &store;
    let mut report = check_inputs(&inputs, h, |tape, vars| {
        let mut g = Graph::new(store_ref);
        std::mem::swap(&mut *g, tape);
        let y = body(&mut g, vars);
        std::mem::swap(&mut *g, tape);
        readout(tape, y?, out_seed)
    })?;
    if !ids.is_empty() {
        let coords = all_coords(&store, &ids);
        let consts = inputs.clone();
        let param_report = check_params(&mut store, &coords, h, |s| {
            let mut g = Graph::new(s);
            let vars: Vec<Var> = consts.iter().map(|t| g.constant(t.clone())).collect();
            let y = body(&mut g, &vars)?;
            let root = readout(&mut g, y, out_seed)?;
            Ok((g.into_tape(), root))
        })?;
        report.merge(param_report);
    }
    Ok(report)
}
