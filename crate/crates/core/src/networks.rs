//! The nine sub-networks and the composed disentangle/swap/generate dataflows.

use std::fmt;

use eet_tensor::nn::INSTANCE_NORM_EPS;
use eet_tensor::{Conv2d, Graph, Linear, ParamId, ParamStore, ResidualBlock, Tensor, UpResidualBlock, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::error::{EetError, Result};
use crate::kv::KeyValues;

/// Architecture hyperparameters; everything that determines parameter shapes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub resolution: usize,
    pub channels: usize,
    /// Channel width of the encoder output and of both latent features.
    pub feat: usize,
    pub num_aus: usize,
    pub max_level: usize,
    pub identities: usize,
    pub poses: usize,
    pub single_branch: bool,
    pub spectral: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 1,
            feat: 16,
            num_aus: 4,
            max_level: 5,
            identities: 10,
            poses: 3,
            single_branch: false,
            spectral: true,
        }
    }
}

const ARCH_KEYS: [&str; 9] =
    ["resolution", "channels", "feat", "num_aus", "max_level", "identities", "poses", "single_branch", "spectral"];

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution % 4 != 0 || self.resolution < 32 {
            return Err(EetError::Config(format!("resolution {} must be a multiple of 4 and at least 32", self.resolution)));
        }
        if self.feat < 4 || self.feat % 2 != 0 {
            return Err(EetError::Config(format!("feature width {} must be even and at least 4", self.feat)));
        }
        if self.channels == 0 || self.num_aus == 0 || self.max_level == 0 || self.identities < 2 || self.poses == 0 {
            return Err(EetError::Config("channels, AUs, levels and poses must be positive; identities at least 2".into()));
        }
        Ok(())
    }

    /// Spatial size of the encoder output.
    pub fn latent_size(&self) -> usize {
        self.resolution / 4
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("resolution", self.resolution);
        kv.set("channels", self.channels);
        kv.set("feat", self.feat);
        kv.set("num_aus", self.num_aus);
        kv.set("max_level", self.max_level);
        kv.set("identities", self.identities);
        kv.set("poses", self.poses);
        kv.set("single_branch", self.single_branch);
        kv.set("spectral", self.spectral);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let cfg = Self {
            resolution: kv.require("resolution")?,
            channels: kv.require("channels")?,
            feat: kv.require("feat")?,
            num_aus: kv.require("num_aus")?,
            max_level: kv.require("max_level")?,
            identities: kv.require("identities")?,
            poses: kv.require("poses")?,
            single_branch: kv.require("single_branch")?,
            spectral: kv.require("spectral")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical key-value rendering.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_kv().render().as_bytes()))
    }
}

/// Parameter groups, one per sub-network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Module {
    E,
    Er,
    Ef,
    G,
    Du,
    Dd,
    C,
    Dsc,
    Dg,
}

impl Module {
    pub const ALL: [Module; 9] =
        [Module::E, Module::Er, Module::Ef, Module::G, Module::Du, Module::Dd, Module::C, Module::Dsc, Module::Dg];

    pub fn prefix(self) -> &'static str {
        match self {
            Module::E => "E",
            Module::Er => "Er",
            Module::Ef => "Ef",
            Module::G => "G",
            Module::Du => "Du",
            Module::Dd => "Dd",
            Module::C => "C",
            Module::Dsc => "Dsc",
            Module::Dg => "Dg",
        }
    }

    /// Whether every convolution of the module is spectrally normalized.
    pub fn spectral(self) -> bool {
        !matches!(self, Module::E | Module::C)
    }

    pub fn of_param(name: &str) -> Option<Module> {
        let prefix = name.split('.').next()?;
        Module::ALL.into_iter().find(|m| m.prefix() == prefix)
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Output of the shared encoder `E`.
#[derive(Clone, Copy, Debug)]
pub struct Feature(Var);

/// AU-related latent `f_r`; the only input accepted by the identity discriminator.
#[derive(Clone, Copy, Debug)]
pub struct AuRelated(Var);

/// AU-free latent `f_f`; the only input accepted by the AU discriminator.
#[derive(Clone, Copy, Debug)]
pub struct AuFree(Var);

impl Feature {
    pub fn var(self) -> Var {
        self.0
    }
}

impl AuRelated {
    pub fn var(self) -> Var {
        self.0
    }
}

impl AuFree {
    pub fn var(self) -> Var {
        self.0
    }
}

/// Both latents, the per-AU branch features and the AU intensity predictions.
#[derive(Clone, Debug)]
pub struct Latents {
    pub f_r: AuRelated,
    pub f_f: AuFree,
    pub branches: Vec<Var>,
    /// Sigmoid outputs in `(0, 1)`, `N x m`.
    pub au_pred: Var,
}

/// Arithmetic mean of equally shaped branch features.
pub fn fuse_branches(g: &mut Graph, branches: &[Var]) -> Result<Var> {
    let (first, rest) = branches.split_first().ok_or_else(|| EetError::Config("no branches to fuse".into()))?;
    let mut acc = *first;
    for &b in rest {
        acc = g.add(acc, b)?;
    }
    Ok(g.scale(acc, 1.0 / branches.len() as f64))
}

fn swap_halves(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    if n % 2 != 0 {
        return Err(EetError::Data(format!("cannot swap halves of a batch of {n}")));
    }
    let a = g.slice_batch(x, 0, n / 2)?;
    let b = g.slice_batch(x, n / 2, n / 2)?;
    Ok(g.concat_batch(&[b, a])?)
}

fn conv_in_relu(g: &mut Graph, conv: &Conv2d, x: Var) -> Result<Var> {
    let h = conv.forward(g, x)?;
    let h = g.instance_norm(h, INSTANCE_NORM_EPS)?;
    Ok(g.relu(h))
}

#[derive(Clone, Debug)]
struct Encoder {
    convs: [Conv2d; 3],
}

#[derive(Clone, Debug)]
struct TwoConv {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl TwoConv {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, f: usize, spectral: bool) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), f, f, 3, 1, 1, spectral)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), f, f, 3, 1, 1, spectral)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = conv_in_relu(g, &self.conv1, x)?;
        Ok(self.conv2.forward(g, h)?)
    }
}

#[derive(Clone, Debug)]
struct Branch {
    body: TwoConv,
    head: Linear,
}

#[derive(Clone, Debug)]
struct Generator {
    res: [ResidualBlock; 2],
    up: [UpResidualBlock; 2],
    out: Conv2d,
}

/// Two convolutions with LeakyReLU, global pooling and a linear head.
#[derive(Clone, Debug)]
struct FeatureHead {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
}

impl FeatureHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, f: usize, out: usize, spectral: bool) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), f, f, 3, 1, 1, spectral)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), f, f, 3, 2, 1, spectral)?,
            fc: Linear::new(store, rng, &format!("{name}.fc"), f, out)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.leaky_relu(h, 0.2);
        let h = self.conv2.forward(g, h)?;
        let h = g.leaky_relu(h, 0.2);
        let h = g.global_avg_pool(h)?;
        Ok(self.fc.forward(g, h)?)
    }
}

#[derive(Clone, Debug)]
struct Classifier {
    conv1: Conv2d,
    conv2: Conv2d,
    id: Linear,
    pose: Linear,
}

/// PatchGAN: three 4x4 stride-2 convolutions and a 3x3 scoring convolution.
#[derive(Clone, Debug)]
struct PatchDiscriminator {
    convs: [Conv2d; 3],
    score: Conv2d,
}

impl PatchDiscriminator {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, f: usize, spectral: bool) -> Result<Self> {
        let widths = [c, f / 2, f, 2 * f];
        let convs = [0, 1, 2].map(|k| {
            Conv2d::new(store, rng, &format!("{name}.conv{}", k + 1), widths[k], widths[k + 1], 4, 2, 1, spectral)
        });
        let [a, b, d] = convs;
        Ok(Self {
            convs: [a?, b?, d?],
            score: Conv2d::new(store, rng, &format!("{name}.score"), 2 * f, 1, 3, 1, 1, spectral)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h)?;
            h = g.leaky_relu(h, 0.2);
        }
        Ok(self.score.forward(g, h)?)
    }
}

/// Parameters and spectral-norm states of every sub-network.
#[derive(Debug)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub store: ParamStore,
    e: Encoder,
    ef: TwoConv,
    er: Vec<Branch>,
    g: Generator,
    du: FeatureHead,
    dd: FeatureHead,
    c: Classifier,
    dsc: PatchDiscriminator,
    dg: PatchDiscriminator,
}

/// Every intermediate of the two disentangle-swap-generate passes over a pair batch
/// `[a; b]`.
#[derive(Clone, Debug)]
pub struct CrossCycle {
    pub input: Var,
    pub feature: Feature,
    pub latents: Latents,
    /// Self-reconstructions `G(f_r(I), f_f(I))`.
    pub self_recon: Var,
    /// Swapped generations: row `a` is `G(f_r(b), f_f(a))`.
    pub swap: Var,
    pub swap_feature: Feature,
    pub swap_latents: Latents,
    /// Cross-cycle reconstructions: row `a` is `G(f_r(swap_b), f_f(swap_a))`.
    pub cycle: Var,
}

impl ModelBundle {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sn = |m: Module| arch.spectral && m.spectral();
        let (c, f) = (arch.channels, arch.feat);
        let s = &mut store;
        let r = &mut rng;

        let e = Encoder {
            convs: [
                Conv2d::new(s, r, "E.conv1", c, f / 2, 3, 1, 1, false)?,
                Conv2d::new(s, r, "E.conv2", f / 2, f, 3, 2, 1, false)?,
                Conv2d::new(s, r, "E.conv3", f, f, 3, 2, 1, false)?,
            ],
        };
        let branches = if arch.single_branch { 1 } else { arch.num_aus };
        let head_out = if arch.single_branch { arch.num_aus } else { 1 };
        let er = (0..branches)
            .map(|i| {
                Ok(Branch {
                    body: TwoConv::new(s, r, &format!("Er.{i}"), f, sn(Module::Er))?,
                    head: Linear::new(s, r, &format!("Er.{i}.head"), f, head_out)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ef = TwoConv::new(s, r, "Ef", f, sn(Module::Ef))?;
        let gs = sn(Module::G);
        let g = Generator {
            res: [
                ResidualBlock::new(s, r, "G.res1", 2 * f, gs)?,
                ResidualBlock::new(s, r, "G.res2", 2 * f, gs)?,
            ],
            up: [
                UpResidualBlock::new(s, r, "G.up1", 2 * f, f, gs)?,
                UpResidualBlock::new(s, r, "G.up2", f, f / 2, gs)?,
            ],
            out: Conv2d::new(s, r, "G.out", f / 2, c, 3, 1, 1, gs)?,
        };
        let du = FeatureHead::new(s, r, "Du", f, arch.num_aus * (arch.max_level + 1), sn(Module::Du))?;
        let dd = FeatureHead::new(s, r, "Dd", f, arch.identities, sn(Module::Dd))?;
        let cls = Classifier {
            conv1: Conv2d::new(s, r, "C.conv1", f, f, 3, 1, 1, false)?,
            conv2: Conv2d::new(s, r, "C.conv2", f, f, 3, 2, 1, false)?,
            id: Linear::new(s, r, "C.id", f, arch.identities)?,
            pose: Linear::new(s, r, "C.pose", f, arch.poses)?,
        };
        let dsc = PatchDiscriminator::new(s, r, "Dsc", c, f, sn(Module::Dsc))?;
        let dg = PatchDiscriminator::new(s, r, "Dg", c, f, sn(Module::Dg))?;
        Ok(Self { arch, store, e, ef, er, g, du, dd, c: cls, dsc, dg })
    }

    /// Parameter ids of the given modules, in registration order.
    pub fn params(&self, modules: &[Module]) -> Vec<ParamId> {
        self.store.select(|name| Module::of_param(name).is_some_and(|m| modules.contains(&m)))
    }

    /// Spectrally normalized weights among `ids`.
    pub fn spectral_params(&self, modules: &[Module]) -> Vec<ParamId> {
        self.params(modules).into_iter().filter(|&id| self.store.spectral(id).is_some()).collect()
    }

    fn check_image(&self, g: &Graph, x: Var) -> Result<()> {
        let a = &self.arch;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != a.channels || shape[2] != a.resolution || shape[3] != a.resolution {
            return Err(EetError::Data(format!(
                "expected images of shape N x {} x {} x {}, got {shape:?}",
                a.channels, a.resolution, a.resolution
            )));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Feature> {
        self.check_image(g, x)?;
        let mut h = x;
        for conv in &self.e.convs {
            h = conv_in_relu(g, conv, h)?;
        }
        Ok(Feature(h))
    }

    pub fn disentangle(&self, g: &mut Graph, f: Feature) -> Result<Latents> {
        let x = f.0;
        let mut branches = Vec::with_capacity(self.er.len());
        let mut preds = Vec::with_capacity(self.er.len());
        for b in &self.er {
            let fr = b.body.forward(g, x)?;
            let pooled = g.global_avg_pool(fr)?;
            let logit = b.head.forward(g, pooled)?;
            preds.push(g.sigmoid(logit));
            branches.push(fr);
        }
        let f_r = fuse_branches(g, &branches)?;
        let au_pred = if preds.len() == 1 {
            preds[0]
        } else {
            let n = g.shape(x)[0];
            let cols = preds.iter().map(|&p| g.reshape(p, &[n, 1, 1, 1])).collect::<std::result::Result<Vec<_>, _>>()?;
            let joined = g.concat_channels(&cols)?;
            g.reshape(joined, &[n, preds.len()])?
        };
        let f_f = self.ef.forward(g, x)?;
        Ok(Latents { f_r: AuRelated(f_r), f_f: AuFree(f_f), branches, au_pred })
    }

    pub fn generate(&self, g: &mut Graph, f_r: AuRelated, f_f: AuFree) -> Result<Var> {
        let want = [self.arch.feat, self.arch.latent_size(), self.arch.latent_size()];
        for v in [f_r.0, f_f.0] {
            if g.shape(v).len() != 4 || g.shape(v)[1..] != want {
                return Err(EetError::Data(format!("latent of shape {:?}, expected N x {want:?}", g.shape(v))));
            }
        }
        let mut h = g.concat_channels(&[f_r.0, f_f.0])?;
        for block in &self.g.res {
            h = block.forward(g, h)?;
        }
        for block in &self.g.up {
            h = block.forward(g, h)?;
        }
        let h = g.instance_norm(h, INSTANCE_NORM_EPS)?;
        let h = g.relu(h);
        let h = self.g.out.forward(g, h)?;
        Ok(g.sigmoid(h))
    }

    /// AU discriminator scores on the AU-free latent, `N x m x (l+1)`.
    pub fn au_discriminator(&self, g: &mut Graph, f_f: AuFree) -> Result<Var> {
        let n = g.shape(f_f.0)[0];
        let s = self.du.forward(g, f_f.0)?;
        Ok(g.reshape(s, &[n, self.arch.num_aus, self.arch.max_level + 1])?)
    }

    /// Identity discriminator scores on the AU-related latent, `N x n`.
    pub fn id_discriminator(&self, g: &mut Graph, f_r: AuRelated) -> Result<Var> {
        self.dd.forward(g, f_r.0)
    }

    /// Identity and pose logits of the attribute classifier.
    pub fn classify(&self, g: &mut Graph, f: Feature) -> Result<(Var, Var)> {
        let h = self.c.conv1.forward(g, f.0)?;
        let h = g.relu(h);
        let h = self.c.conv2.forward(g, h)?;
        let h = g.relu(h);
        let h = g.global_avg_pool(h)?;
        let id = self.c.id.forward(g, h)?;
        let pose = self.c.pose.forward(g, h)?;
        Ok((id, pose))
    }

    pub fn swap_discriminator(&self, g: &mut Graph, img: Var) -> Result<Var> {
        self.check_image(g, img)?;
        self.dsc.forward(g, img)
    }

    pub fn image_discriminator(&self, g: &mut Graph, img: Var) -> Result<Var> {
        self.check_image(g, img)?;
        self.dg.forward(g, img)
    }

    /// Both disentangle-swap-generate passes over `input = [a; b]`.
    pub fn cross_cycle(&self, g: &mut Graph, input: Var) -> Result<CrossCycle> {
        let feature = self.encode(g, input)?;
        let latents = self.disentangle(g, feature)?;
        let swapped_r = swap_halves(g, latents.f_r.0)?;
        // Self-reconstruction and swap share one generator pass.
        let fr = g.concat_batch(&[latents.f_r.0, swapped_r])?;
        let ff = g.concat_batch(&[latents.f_f.0, latents.f_f.0])?;
        let both = self.generate(g, AuRelated(fr), AuFree(ff))?;
        let n = g.shape(input)[0];
        let self_recon = g.slice_batch(both, 0, n)?;
        let swap = g.slice_batch(both, n, n)?;

        let swap_feature = self.encode(g, swap)?;
        let swap_latents = self.disentangle(g, swap_feature)?;
        let back_r = swap_halves(g, swap_latents.f_r.0)?;
        let cycle = self.generate(g, AuRelated(back_r), swap_latents.f_f)?;
        Ok(CrossCycle { input, feature, latents, self_recon, swap, swap_feature, swap_latents, cycle })
    }

    /// Test-time transfer for batches of targets `a` and sources `b`: returns
    /// `(G(f_r(b), f_f(a)), G(f_r(a), f_f(b)))`. Touches only E, E_r, E_f and G.
    pub fn transfer(&self, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = a.shape().first().copied().unwrap_or(0);
        if a.shape() != b.shape() {
            return Err(EetError::Data(format!("transfer inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut g = Graph::new(&self.store);
        let x = g.constant(Tensor::cat_batch(&[a, b])?);
        let lat = self.disentangle_input(&mut g, x)?;
        let fr = swap_halves(&mut g, lat.f_r.0)?;
        let out = self.generate(&mut g, AuRelated(fr), lat.f_f)?;
        let v = g.value(out);
        Ok((v.slice_batch(0, n)?, v.slice_batch(n, n)?))
    }

    /// `G(f_r(x), f_f(x))`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let v = g.constant(x.clone());
        let lat = self.disentangle_input(&mut g, v)?;
        let out = self.generate(&mut g, lat.f_r, lat.f_f)?;
        Ok(g.value(out).clone())
    }

    /// AU intensity predictions scaled to `[0, l]`.
    pub fn predict_au(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let v = g.constant(x.clone());
        let lat = self.disentangle_input(&mut g, v)?;
        Ok(g.value(lat.au_pred).map(|p| p * self.arch.max_level as f64))
    }

    fn disentangle_input(&self, g: &mut Graph, x: Var) -> Result<Latents> {
        let f = self.encode(g, x)?;
        self.disentangle(g, f)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.header = self.arch.to_kv();
        c.header.set("arch_hash", self.arch.hash());
        for (id, p) in self.store.iter() {
            c.arrays.insert(format!("param/{}", p.name), p.value.clone());
            if let Some(state) = self.store.spectral(id) {
                c.arrays.insert(format!("sn/{}", p.name), Tensor::from_vec(state.u.clone()));
            }
        }
        c
    }

    /// Rebuild a bundle from a container, verifying the architecture hash and that
    /// every array is present with the expected shape.
    pub fn from_container(c: &Container) -> Result<Self> {
        let arch = ArchConfig::from_kv(&arch_subset(&c.header))
            .map_err(|e| EetError::Checkpoint(format!("bad architecture header: {e}")))?;
        let stored: String = c.header_value("arch_hash")?;
        if stored != arch.hash() {
            return Err(EetError::Checkpoint("architecture hash mismatch".into()));
        }
        let mut bundle = Self::new(arch, 0)?;
        bundle.load_arrays(c)?;
        Ok(bundle)
    }

    /// Overwrite parameters and spectral states from `c`.
    pub fn load_arrays(&mut self, c: &Container) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            let value = c.array(&format!("param/{name}"))?;
            if value.shape() != self.store.get(id).value.shape() {
                return Err(EetError::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            self.store.get_mut(id).value = value.clone();
            if let Some(state) = self.store.spectral_mut(id) {
                let u = c.array(&format!("sn/{name}"))?;
                if u.numel() != state.u.len() {
                    return Err(EetError::Checkpoint(format!("spectral state size mismatch for `{name}`")));
                }
                state.u = u.data().to_vec();
            }
        }
        let expected = self.store.len() + self.store.spectral_ids().count();
        let present = c.arrays.keys().filter(|k| k.starts_with("param/") || k.starts_with("sn/")).count();
        if present != expected {
            return Err(EetError::Checkpoint(format!("{present} model arrays present, expected {expected}")));
        }
        Ok(())
    }

    /// SHA-256 over the values of the given modules' parameters.
    pub fn param_hash(&self, modules: &[Module]) -> String {
        let mut h = Sha256::new();
        for id in self.params(modules) {
            let p = self.store.get(id);
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

fn arch_subset(header: &KeyValues) -> KeyValues {
    let mut kv = KeyValues::new();
    for key in ARCH_KEYS {
        if let Some(v) = header.get(key) {
            kv.set(key, v);
        }
    }
    kv
}
