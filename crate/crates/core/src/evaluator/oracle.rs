//! Stand-in annotators: an AU intensity regressor and an identity classifier,
//! trained on real renders only.

use eet_tensor::{Adam, AdamState, Conv2d, Graph, Linear, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Container;
use crate::data::{sample_images, DatasetMeta, GlyphConfig, LabeledImage};
use crate::error::{EetError, Result};

/// Held-out quality required before an oracle may score anything.
pub const MAX_AU_MSE: f64 = 0.25;
pub const MIN_ID_ACCURACY: f64 = 0.95;

const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSettings {
    /// Training renders per identity.
    pub per_identity: usize,
    /// Held-out renders per identity for the quality gate.
    pub heldout_per_identity: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { per_identity: 150, heldout_per_identity: 30, epochs: 30, batch: 16, lr: 1e-3, seed: 7_000 }
    }
}

/// Held-out measurements behind the gate.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleQuality {
    pub au_mse: Vec<f64>,
    pub id_accuracy: f64,
}

impl OracleQuality {
    pub fn check(&self) -> Result<()> {
        if let Some((i, m)) = self.au_mse.iter().enumerate().find(|(_, m)| !(**m <= MAX_AU_MSE)) {
            return Err(EetError::OracleGate(format!("AU {i} held-out MSE {m:.4} exceeds {MAX_AU_MSE}")));
        }
        if !(self.id_accuracy >= MIN_ID_ACCURACY) {
            return Err(EetError::OracleGate(format!(
                "identity accuracy {:.4} below {MIN_ID_ACCURACY}",
                self.id_accuracy
            )));
        }
        Ok(())
    }
}

/// Three stride-2 convolutions, a hidden layer and a linear head.
#[derive(Clone, Debug)]
struct OracleNet {
    convs: [Conv2d; 3],
    hidden: Linear,
    head: Linear,
}

impl OracleNet {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &GlyphConfig, outputs: usize) -> Result<Self> {
        let s = cfg.resolution / 8;
        Ok(Self {
            convs: [
                Conv2d::new(store, rng, &format!("{name}.conv1"), 1, 8, 3, 2, 1, false)?,
                Conv2d::new(store, rng, &format!("{name}.conv2"), 8, 16, 3, 2, 1, false)?,
                Conv2d::new(store, rng, &format!("{name}.conv3"), 16, 32, 3, 2, 1, false)?,
            ],
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), 32 * s * s, 64)?,
            head: Linear::new(store, rng, &format!("{name}.head"), 64, outputs)?,
        })
    }

    /// `(penultimate features, head output)`.
    fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h)?;
            h = g.relu(h);
        }
        let h = g.flatten(h)?;
        let h = self.hidden.forward(g, h)?;
        let feat = g.relu(h);
        let out = self.head.forward(g, feat)?;
        Ok((feat, out))
    }
}

/// Frozen AU regressor and identity classifier.
#[derive(Debug)]
pub struct Oracles {
    pub config: GlyphConfig,
    pub quality: OracleQuality,
    store: ParamStore,
    au: OracleNet,
    id: OracleNet,
}

/// Random blur, contrast and noise so the oracles tolerate soft generator output.
fn degrade(img: &Tensor, rng: &mut impl Rng) -> Tensor {
    let shape = img.shape();
    let (h, w) = (shape[2], shape[3]);
    let src = img.data();
    let mut out = src.to_vec();
    if rng.gen_bool(0.5) {
        let alpha: f64 = rng.gen_range(0.3..1.0);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut count = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        acc += src[yy * w + xx];
                        count += 1.0;
                    }
                }
                out[y * w + x] = (1.0 - alpha) * src[y * w + x] + alpha * acc / count;
            }
        }
    }
    let contrast: f64 = rng.gen_range(0.85..1.0);
    let sigma: f64 = rng.gen_range(0.0..0.04);
    let noise = Normal::new(0.0, sigma.max(1e-12)).expect("positive sigma");
    for v in &mut out {
        *v = (0.5 + contrast * (*v - 0.5) + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(shape, out).expect("same shape")
}

fn stack(images: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat_batch(images)?)
}

impl Oracles {
    /// Render a fresh training and held-out set covering every identity, train both
    /// oracles and apply the quality gate.
    pub fn train(cfg: &GlyphConfig, settings: &OracleSettings) -> Result<Self> {
        let train = sample_images(cfg, settings.per_identity, settings.seed)?;
        let heldout = sample_images(cfg, settings.heldout_per_identity, settings.seed.wrapping_add(1))?;
        Self::train_on(cfg, &train, &heldout, settings)
    }

    /// Train on `train`, measure on `heldout`, and refuse if the gate fails.
    pub fn train_on(
        cfg: &GlyphConfig,
        train: &[LabeledImage],
        heldout: &[LabeledImage],
        settings: &OracleSettings,
    ) -> Result<Self> {
        if train.is_empty() || heldout.is_empty() {
            return Err(EetError::OracleGate("oracle training needs nonempty train and held-out sets".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let mut store = ParamStore::new();
        let au = OracleNet::new(&mut store, &mut rng, "oracle_au", cfg, cfg.aus.len())?;
        let id = OracleNet::new(&mut store, &mut rng, "oracle_id", cfg, cfg.identities)?;
        let mut oracles = Self {
            config: cfg.clone(),
            quality: OracleQuality { au_mse: Vec::new(), id_accuracy: 0.0 },
            store,
            au,
            id,
        };
        oracles.fit(train, settings, &mut rng)?;
        oracles.quality = oracles.measure(heldout)?;
        oracles.quality.check()?;
        Ok(oracles)
    }

    fn fit(&mut self, train: &[LabeledImage], settings: &OracleSettings, rng: &mut ChaCha8Rng) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        let mut adam = AdamState::new(&self.store, ids);
        let batch = settings.batch.clamp(1, train.len());
        let steps = train.len() / batch;
        let total = settings.epochs * steps;
        let l = self.config.max_level as f64;
        let n_ids = self.config.identities;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..settings.epochs {
            order.shuffle(rng);
            for s in 0..steps {
                let idx = &order[s * batch..(s + 1) * batch];
                let pixels: Vec<Tensor> = idx
                    .iter()
                    .map(|&i| {
                        let img = if rng.gen_bool(0.5) { train[i].pixels.flip_last_axis() } else { train[i].pixels.clone() };
                        degrade(&img, rng)
                    })
                    .collect();
                let x = stack(&pixels.iter().collect::<Vec<_>>())?;
                let au_target: Vec<f64> = idx.iter().flat_map(|&i| train[i].au.iter().map(|u| u / l)).collect();
                let mut one_hot = vec![0.0; batch * n_ids];
                for (k, &i) in idx.iter().enumerate() {
                    one_hot[k * n_ids + train[i].identity - 1] = 1.0;
                }

                let mut g = Graph::new(&self.store);
                let xv = g.constant(x);
                let (_, au_out) = self.au.forward(&mut g, xv)?;
                let pred = g.sigmoid(au_out);
                let diff = g.sub_const(pred, Tensor::new(&[batch, self.config.aus.len()], au_target)?)?;
                let sq = g.square(diff);
                let au_loss = g.mean(sq);
                let (_, logits) = self.id.forward(&mut g, xv)?;
                let logp = g.log_softmax(logits);
                let picked = g.mul_const(logp, Tensor::new(&[batch, n_ids], one_hot)?)?;
                let sum = g.sum(picked);
                let ce = g.scale(sum, -1.0 / batch as f64);
                let total_loss = g.add(au_loss, ce)?;
                let mut tape = g.into_tape();
                if let Some(op) = tape.non_finite_op() {
                    return Err(EetError::NonFinite { op: op.to_string(), epoch, step: s });
                }
                let grads = tape.backward(total_loss)?;
                self.store.zero_grad();
                self.store.accumulate(&grads);
                // Cosine-decayed learning rate.
                let progress = (epoch * steps + s) as f64 / total.max(1) as f64;
                let lr = settings.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                adam.step(&mut self.store, &Adam::new(lr, 0.9, 0.999))?;
            }
        }
        Ok(())
    }

    /// Held-out per-AU MSE (intensity units) and identity accuracy.
    pub fn measure(&self, images: &[LabeledImage]) -> Result<OracleQuality> {
        let pixels: Vec<&Tensor> = images.iter().map(|i| &i.pixels).collect();
        let x = stack(&pixels)?;
        let pred = self.predict_au(&x)?;
        let m = self.config.aus.len();
        let au_mse = (0..m)
            .map(|i| images.iter().zip(&pred).map(|(img, p)| (p[i] - img.au[i]).powi(2)).sum::<f64>() / images.len() as f64)
            .collect();
        let ids = self.predict_identity(&x)?;
        let hits = images.iter().zip(&ids).filter(|(img, &d)| img.identity == d).count();
        Ok(OracleQuality { au_mse, id_accuracy: hits as f64 / images.len() as f64 })
    }

    fn run<T>(&self, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>, mut each: impl FnMut(&[f64]) -> T) -> Result<Vec<T>> {
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = INFERENCE_CHUNK.min(n - start);
            let mut g = Graph::new(&self.store);
            let v = g.constant(x.slice_batch(start, len)?);
            let y = f(&mut g, v)?;
            let t = g.value(y);
            let width = t.numel() / len;
            out.extend(t.data().chunks(width).map(&mut each));
            start += len;
        }
        Ok(out)
    }

    /// AU intensities in `[0, l]` for each image of an `N x 1 x H x W` batch.
    pub fn predict_au(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let l = self.config.max_level as f64;
        self.run(
            x,
            |g, v| {
                let (_, out) = self.au.forward(g, v)?;
                Ok(g.sigmoid(out))
            },
            |row| row.iter().map(|p| p * l).collect(),
        )
    }

    /// Most likely 1-based identity per image.
    pub fn predict_identity(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.run(
            x,
            |g, v| Ok(self.id.forward(g, v)?.1),
            |row| 1 + row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k).unwrap_or(0),
        )
    }

    /// Penultimate identity features used for verification.
    pub fn embed(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.run(x, |g, v| Ok(self.id.forward(g, v)?.0), |row| row.to_vec())
    }

    pub fn to_container(&self) -> Container {
        let meta = DatasetMeta { config: self.config.clone(), seed: 0, images_per_id: 0, test_fraction: 0.0 };
        let mut c = Container { header: meta.to_kv(), ..Container::default() };
        let mses: Vec<String> = self.quality.au_mse.iter().map(|m| m.to_string()).collect();
        c.header.set("quality_au_mse", mses.join(","));
        c.header.set("quality_id_accuracy", self.quality.id_accuracy);
        for (_, p) in self.store.iter() {
            c.arrays.insert(format!("param/{}", p.name), p.value.clone());
        }
        c
    }

    /// Load saved oracles; the stored quality must still pass the gate.
    pub fn from_container(c: &Container) -> Result<Self> {
        let mut header = c.header.clone();
        let au_mse: String = c.header_value("quality_au_mse")?;
        let id_accuracy: f64 = c.header_value("quality_id_accuracy")?;
        header.remove("quality_au_mse");
        header.remove("quality_id_accuracy");
        let config = DatasetMeta::from_kv(&header)?.config;
        let au_mse = au_mse
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|_| EetError::Checkpoint(format!("bad oracle quality `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let quality = OracleQuality { au_mse, id_accuracy };
        quality.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let au = OracleNet::new(&mut store, &mut rng, "oracle_au", &config, config.aus.len())?;
        let id = OracleNet::new(&mut store, &mut rng, "oracle_id", &config, config.identities)?;
        let ids: Vec<_> = store.ids().collect();
        for pid in ids {
            let name = store.get(pid).name.clone();
            let value = c.array(&format!("param/{name}"))?;
            if value.shape() != store.get(pid).value.shape() {
                return Err(EetError::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            store.get_mut(pid).value = value.clone();
        }
        if c.arrays.len() != store.len() {
            return Err(EetError::Checkpoint(format!("{} oracle arrays, expected {}", c.arrays.len(), store.len())));
        }
        Ok(Self { config, quality, store, au, id })
    }
}
