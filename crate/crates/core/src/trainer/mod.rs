//! Two-stage training: stage 1 fits the encoder, classifier, latent branches and
//! latent discriminators jointly; stage 2 freezes `E`, `C`, `D_u`, `D_d` and
//! alternates image-discriminator and generator updates.

mod config;
mod sampler;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use eet_tensor::{AdamState, Graph, ParamId, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::{lr_at, StageOptim, TrainConfig, CONFIG_KEYS};
pub use sampler::{sample_batch, sample_pair};

use crate::checkpoint::Container;
use crate::data::{augment_mirror, occurrence_rates, GlyphConfig, LabeledImage};
use crate::error::{EetError, Result};
use crate::losses::{
    au_weights, stage1_objective, stage2_discriminator_objective, stage2_generator_objective, BatchLabels,
    DiscriminatorOutputs, Objective, ObjectiveSettings, Stage1Outputs, Stage2Outputs, Term,
};
use crate::networks::{ArchConfig, ModelBundle, Module};

use Module::*;

pub const STAGE1_TRAINEES: [Module; 6] = [E, C, Er, Ef, Du, Dd];
pub const STAGE2_FROZEN: [Module; 4] = [E, C, Du, Dd];
pub const GENERATOR_SIDE: [Module; 3] = [Er, Ef, G];
pub const DISCRIMINATOR_SIDE: [Module; 2] = [Dsc, Dg];

/// Architecture implied by a training config and the dataset it runs on.
pub fn arch_for(cfg: &TrainConfig, glyph: &GlyphConfig) -> ArchConfig {
    ArchConfig {
        resolution: glyph.resolution,
        channels: 1,
        feat: cfg.feat,
        num_aus: glyph.aus.len(),
        max_level: glyph.max_level,
        identities: glyph.identities,
        poses: glyph.poses,
        single_branch: cfg.variant.single_branch(),
        spectral: cfg.spectral,
    }
}

/// SHA-256 over the pixels and labels of an image set.
pub fn data_hash(images: &[LabeledImage]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update((img.identity as u64).to_le_bytes());
        h.update((img.pose as u64).to_le_bytes());
        for v in img.au.iter().chain(img.pixels.data()) {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// Unweighted loss values of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// Global step counter, starting at 0.
    pub step: usize,
    /// 0-based epoch the step belongs to.
    pub epoch: usize,
    pub values: Vec<(Term, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub stage: u8,
    /// Number of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    /// Per-term means over the epoch's steps.
    pub means: Vec<(Term, f64)>,
}

struct Group {
    name: &'static str,
    state: AdamState,
}

/// Mutable training state for one stage over an in-memory image set.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    bundle: ModelBundle,
    images: &'d [LabeledImage],
    poses: usize,
    settings: ObjectiveSettings,
    groups: Vec<Group>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
    train_hash: String,
    data_hash: String,
}

fn decode_seed(s: &str) -> Result<[u8; 32]> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).map_err(|_| EetError::Checkpoint(format!("malformed RNG seed `{s}`")))?;
    Ok(out)
}

impl<'d> Trainer<'d> {
    /// Fresh trainer: stage 1 initializes the networks from the seed, stage 2 loads
    /// them from `cfg.init_from`.
    pub fn new(cfg: &TrainConfig, images: &'d [LabeledImage], glyph: &GlyphConfig) -> Result<Self> {
        cfg.validate()?;
        if images.len() < cfg.batch {
            return Err(EetError::Data(format!(
                "{} training images cannot fill a batch of {}",
                images.len(),
                cfg.batch
            )));
        }
        let arch = arch_for(cfg, glyph);
        let mut bundle = if cfg.stage == 1 {
            ModelBundle::new(arch, cfg.seed)?
        } else {
            let path = cfg.init_from.as_deref().expect("validated stage-2 config has init_from");
            let init = Container::load(path)?;
            if init.header.get("stage") == Some("2") {
                return Err(EetError::Config(format!(
                    "{} is a stage-2 checkpoint; stage 2 must start from a stage-1 checkpoint",
                    path.display()
                )));
            }
            let bundle = ModelBundle::from_container(&init)?;
            if bundle.arch != arch {
                return Err(EetError::Config(format!(
                    "{} was trained with a different architecture ({:?} vs {:?})",
                    path.display(),
                    bundle.arch,
                    arch
                )));
            }
            bundle
        };
        let groups = if cfg.stage == 1 {
            vec![Group { name: "joint", state: AdamState::new(&bundle.store, bundle.params(&STAGE1_TRAINEES)) }]
        } else {
            let frozen = bundle.params(&STAGE2_FROZEN);
            bundle.store.set_requires_grad(&frozen, false);
            vec![
                Group { name: "gen", state: AdamState::new(&bundle.store, bundle.params(&GENERATOR_SIDE)) },
                Group { name: "disc", state: AdamState::new(&bundle.store, bundle.params(&DISCRIMINATOR_SIDE)) },
            ]
        };
        let settings = ObjectiveSettings {
            weights: cfg.weights,
            toggles: cfg.variant.toggles(),
            au_weights: au_weights(&occurrence_rates(images, glyph.max_level)?)?,
            max_level: glyph.max_level,
            poses: glyph.poses,
            form: cfg.adversarial,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(cfg.stage as u64);
        Ok(Self {
            cfg: cfg.clone(),
            bundle,
            images,
            poses: glyph.poses,
            settings,
            groups,
            rng,
            epoch: 0,
            step: 0,
            train_hash: cfg.hash(),
            data_hash: data_hash(images),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.images.len() / self.cfg.batch
    }

    pub fn lr(&self) -> Result<f64> {
        lr_at(self.epoch, self.cfg.epochs, self.cfg.optim().lr)
    }

    fn non_finite(&self, op: &str) -> EetError {
        EetError::NonFinite { op: op.to_string(), epoch: self.epoch, step: self.step }
    }

    fn lift<T>(&self, r: std::result::Result<T, TensorError>) -> Result<T> {
        r.map_err(|e| match e {
            TensorError::NonFinite { op, .. } => self.non_finite(op),
            other => other.into(),
        })
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        match tape.non_finite_op() {
            Some(op) => Err(self.non_finite(op)),
            None => Ok(()),
        }
    }

    fn next_batch(&mut self) -> Result<(Tensor, BatchLabels)> {
        let idx = sample_batch(self.images.len(), self.cfg.batch / 2, &mut self.rng)?;
        let mut pixels = Vec::with_capacity(idx.len());
        let mut labels = BatchLabels { au: Vec::new(), identities: Vec::new(), poses: Vec::new() };
        for i in idx {
            let coin = self.cfg.mirror && self.rng.gen::<bool>();
            let img = augment_mirror(&self.images[i], self.poses, coin);
            labels.au.push(img.au);
            labels.identities.push(img.identity);
            labels.poses.push(img.pose);
            pixels.push(img.pixels);
        }
        let refs: Vec<&Tensor> = pixels.iter().collect();
        Ok((Tensor::cat_batch(&refs)?, labels))
    }

    /// Backpropagate `obj`, then clip and apply the Adam update of group `k`.
    fn apply(&mut self, tape: &mut Tape, obj: &Objective, k: usize, lr: f64) -> Result<()> {
        let total = obj.total(tape)?;
        self.check_tape(tape)?;
        let grads = self.lift(tape.backward(total))?;
        self.bundle.store.zero_grad();
        self.bundle.store.accumulate(&grads);
        let ids: Vec<ParamId> = self.groups[k].state.ids.clone();
        if !self.bundle.store.grad_norm(&ids).is_finite() {
            return Err(self.non_finite("backward"));
        }
        if let Some(c) = self.cfg.clip_norm {
            self.bundle.store.clip_grad_norm(&ids, c);
        }
        let adam = self.cfg.optim().adam(lr);
        self.groups[k].state.step(&mut self.bundle.store, &adam)?;
        Ok(())
    }

    fn stage1_step(&mut self, input: Tensor, labels: &BatchLabels, lr: f64) -> Result<Vec<(Term, f64)>> {
        let sn = self.bundle.spectral_params(&STAGE1_TRAINEES);
        self.bundle.store.power_iterate(&sn)?;
        let b = &self.bundle;
        let mut g = Graph::new(&b.store);
        let x = g.constant(input);
        let f = b.encode(&mut g, x)?;
        let lat = b.disentangle(&mut g, f)?;
        let (id_logits, pose_logits) = b.classify(&mut g, f)?;
        let du_scores = b.au_discriminator(&mut g, lat.f_f)?;
        let dd_scores = b.id_discriminator(&mut g, lat.f_r)?;
        let out = Stage1Outputs { au_pred: lat.au_pred, id_logits, pose_logits, du_scores, dd_scores };
        let obj = stage1_objective(&mut g, &out, labels, &self.settings)?;
        let mut tape = g.into_tape();
        let values = obj.values(&tape);
        self.apply(&mut tape, &obj, 0, lr)?;
        Ok(values)
    }

    fn stage2_step(&mut self, input: Tensor, labels: &BatchLabels, lr: f64) -> Result<Vec<(Term, f64)>> {
        let mut sn = self.bundle.spectral_params(&GENERATOR_SIDE);
        sn.extend(self.bundle.spectral_params(&DISCRIMINATOR_SIDE));
        self.bundle.store.power_iterate(&sn)?;
        let disc = self.groups[1].state.ids.clone();

        // Shared forward pass with the image discriminators excluded from the tape.
        self.bundle.store.set_requires_grad(&disc, false);
        let b = &self.bundle;
        let mut g = Graph::new(&b.store);
        let x = g.constant(input.clone());
        let cc = b.cross_cycle(&mut g, x)?;
        let du_scores = b.au_discriminator(&mut g, cc.latents.f_f)?;
        let dd_scores = b.id_discriminator(&mut g, cc.latents.f_r)?;
        let (swap_id_logits, swap_pose_logits) = b.classify(&mut g, cc.swap_feature)?;
        let main = g.into_tape();
        self.check_tape(&main)?;

        // Discriminator step on detached generations.
        self.bundle.store.set_requires_grad(&disc, true);
        let b = &self.bundle;
        let mut g = Graph::new(&b.store);
        let real = g.constant(input);
        let swap = g.constant(main.value(cc.swap).clone());
        let recon = g.constant(main.value(cc.self_recon).clone());
        let d_out = DiscriminatorOutputs {
            sc_self: b.swap_discriminator(&mut g, recon)?,
            sc_swap: b.swap_discriminator(&mut g, swap)?,
            g_real: b.image_discriminator(&mut g, real)?,
            g_swap: b.image_discriminator(&mut g, swap)?,
        };
        let d_obj = stage2_discriminator_objective(&mut g, &d_out, &self.settings)?;
        let mut d_tape = g.into_tape();
        let d_values = d_obj.values(&d_tape);
        self.apply(&mut d_tape, &d_obj, 1, lr)?;
        self.bundle.store.set_requires_grad(&disc, false);

        // Generator step against the updated discriminators.
        let b = &self.bundle;
        let mut g = Graph::with_tape(main, &b.store);
        let sc_swap = b.swap_discriminator(&mut g, cc.swap)?;
        let g_swap = b.image_discriminator(&mut g, cc.swap)?;
        let out = Stage2Outputs {
            input: cc.input,
            au_pred: cc.latents.au_pred,
            du_scores,
            dd_scores,
            swap: cc.swap,
            self_recon: cc.self_recon,
            cycle: cc.cycle,
            swap_au_pred: cc.swap_latents.au_pred,
            swap_id_logits,
            swap_pose_logits,
            sc_swap,
            g_swap,
        };
        let g_obj = stage2_generator_objective(&mut g, &out, labels, &self.settings)?;
        let mut g_tape = g.into_tape();
        let mut values = g_obj.values(&g_tape);
        self.apply(&mut g_tape, &g_obj, 0, lr)?;
        values.extend(d_values);
        Ok(values)
    }

    /// One optimization step (stage 2: one discriminator and one generator update).
    pub fn train_step(&mut self) -> Result<StepLog> {
        if self.epoch >= self.cfg.epochs {
            return Err(EetError::Config(format!("all {} epochs already completed", self.cfg.epochs)));
        }
        let lr = self.lr()?;
        let (input, labels) = self.next_batch()?;
        let values = if self.cfg.stage == 1 {
            self.stage1_step(input, &labels, lr)?
        } else {
            self.stage2_step(input, &labels, lr)?
        };
        if let Some((t, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(self.non_finite(t.name()));
        }
        let log = StepLog { step: self.step, epoch: self.epoch, values };
        self.step += 1;
        Ok(log)
    }

    /// Run `steps_per_epoch` steps and advance the epoch counter.
    pub fn train_epoch(&mut self) -> Result<Vec<StepLog>> {
        let logs = (0..self.steps_per_epoch()).map(|_| self.train_step()).collect::<Result<Vec<_>>>()?;
        self.epoch += 1;
        Ok(logs)
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.bundle.to_container();
        let h = &mut c.header;
        h.set("stage", self.cfg.stage);
        h.set("epoch", self.epoch);
        h.set("step", self.step);
        h.set("train_hash", &self.train_hash);
        h.set("data_hash", &self.data_hash);
        h.set("rng_seed", hex::encode(self.rng.get_seed()));
        h.set("rng_stream", self.rng.get_stream());
        h.set("rng_word_pos", self.rng.get_word_pos());
        for group in &self.groups {
            h.set(&format!("adam.{}.t", group.name), group.state.t);
            for (k, &id) in group.state.ids.iter().enumerate() {
                let name = &self.bundle.store.get(id).name;
                let shape = self.bundle.store.get(id).value.shape();
                for (kind, data) in [("m", &group.state.m[k]), ("v", &group.state.v[k])] {
                    let t = Tensor::new(shape, data.clone()).expect("moment matches parameter shape");
                    c.arrays.insert(format!("adam/{}/{kind}/{name}", group.name), t);
                }
            }
        }
        c
    }

    /// Restore the full training state saved by [`Trainer::to_container`].
    pub fn restore(&mut self, c: &Container) -> Result<()> {
        let stage: u8 = c.header_value("stage")?;
        if stage != self.cfg.stage {
            return Err(EetError::Checkpoint(format!("checkpoint is from stage {stage}, not {}", self.cfg.stage)));
        }
        if c.header_value::<String>("train_hash")? != self.train_hash {
            return Err(EetError::Config("training config differs from the one that wrote the checkpoint".into()));
        }
        if c.header_value::<String>("data_hash")? != self.data_hash {
            return Err(EetError::Data("training images differ from the ones the checkpoint was trained on".into()));
        }
        if c.header_value::<String>("arch_hash")? != self.bundle.arch.hash() {
            return Err(EetError::Checkpoint("architecture hash mismatch".into()));
        }
        self.bundle.load_arrays(c)?;
        for group in &mut self.groups {
            group.state.t = c.header_value(&format!("adam.{}.t", group.name))?;
            for (k, &id) in group.state.ids.iter().enumerate() {
                let name = &self.bundle.store.get(id).name;
                for kind in ["m", "v"] {
                    let t = c.array(&format!("adam/{}/{kind}/{name}", group.name))?;
                    let dst = if kind == "m" { &mut group.state.m[k] } else { &mut group.state.v[k] };
                    if t.numel() != dst.len() {
                        return Err(EetError::Checkpoint(format!("Adam moment size mismatch for `{name}`")));
                    }
                    dst.copy_from_slice(t.data());
                }
            }
        }
        let mut rng = ChaCha8Rng::from_seed(decode_seed(&c.header_value::<String>("rng_seed")?)?);
        rng.set_stream(c.header_value("rng_stream")?);
        rng.set_word_pos(c.header_value("rng_word_pos")?);
        self.rng = rng;
        self.epoch = c.header_value("epoch")?;
        self.step = c.header_value("step")?;
        if self.epoch > self.cfg.epochs {
            return Err(EetError::Checkpoint(format!("checkpoint epoch {} exceeds configured {}", self.epoch, self.cfg.epochs)));
        }
        Ok(())
    }
}

pub type EpochHook<'h> = dyn FnMut(&EpochSummary, &ModelBundle) -> Result<()> + 'h;

#[derive(Default)]
pub struct RunOptions<'h> {
    pub out_dir: PathBuf,
    /// Continue from `stage{N}.ckpt` in `out_dir` when present.
    pub resume: bool,
    /// Return after this many completed epochs, as if the process were killed.
    pub stop_after: Option<usize>,
    pub on_epoch: Option<&'h mut EpochHook<'h>>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub bundle: ModelBundle,
    pub checkpoint: PathBuf,
    pub losses_csv: PathBuf,
    pub epochs_completed: usize,
    pub summaries: Vec<EpochSummary>,
}

pub fn checkpoint_path(out_dir: &Path, stage: u8) -> PathBuf {
    out_dir.join(format!("stage{stage}.ckpt"))
}

pub fn losses_path(out_dir: &Path, stage: u8) -> PathBuf {
    out_dir.join(format!("stage{stage}_losses.csv"))
}

pub const CSV_HEADER: &str = "step,epoch,term,value";

/// Drop every row logged at or after `epoch`, keeping the header.
fn truncate_csv(path: &Path, epoch: usize) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(EetError::io(path, e)),
    };
    let mut out = format!("{CSV_HEADER}\n");
    for line in text.lines().skip(1) {
        let row_epoch: usize = line
            .split(',')
            .nth(1)
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| EetError::Data(format!("{}: malformed row `{line}`", path.display())))?;
        if row_epoch < epoch {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| EetError::io(path, e))
}

fn append_rows(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut rows = String::new();
    for log in logs {
        for (term, v) in &log.values {
            rows.push_str(&format!("{},{},{},{v}\n", log.step, log.epoch, term.name()));
        }
    }
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| EetError::io(path, e))?;
    f.write_all(rows.as_bytes()).map_err(|e| EetError::io(path, e))
}

fn summarize(stage: u8, epoch: usize, lr: f64, logs: &[StepLog]) -> EpochSummary {
    let mut means: Vec<(Term, f64)> = Vec::new();
    for log in logs {
        for &(t, v) in &log.values {
            match means.iter_mut().find(|(u, _)| *u == t) {
                Some(slot) => slot.1 += v,
                None => means.push((t, v)),
            }
        }
    }
    for m in &mut means {
        m.1 /= logs.len().max(1) as f64;
    }
    EpochSummary { stage, epoch, lr, means }
}

/// Train one stage on `images`, writing `stage{N}.ckpt`, `stage{N}_losses.csv` and
/// `stage{N}.conf` to `opts.out_dir`.
pub fn run(cfg: &TrainConfig, images: &[LabeledImage], glyph: &GlyphConfig, mut opts: RunOptions) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(cfg, images, glyph)?;
    let dir = &opts.out_dir;
    fs::create_dir_all(dir).map_err(|e| EetError::io(dir, e))?;
    let ckpt = checkpoint_path(dir, cfg.stage);
    let csv = losses_path(dir, cfg.stage);
    if opts.resume && ckpt.exists() {
        trainer.restore(&Container::load(&ckpt)?)?;
    }
    truncate_csv(&csv, trainer.epoch())?;
    let mut conf = cfg.to_kv();
    conf.set("train_hash", cfg.hash());
    let conf_path = dir.join(format!("stage{}.conf", cfg.stage));
    fs::write(&conf_path, conf.render()).map_err(|e| EetError::io(&conf_path, e))?;

    let frozen_hash = (cfg.stage == 2).then(|| trainer.bundle().param_hash(&STAGE2_FROZEN));
    let mut summaries = Vec::new();
    while trainer.epoch() < cfg.epochs {
        let lr = trainer.lr()?;
        let logs = trainer.train_epoch()?;
        append_rows(&csv, &logs)?;
        if let Some(h) = &frozen_hash {
            if *h != trainer.bundle().param_hash(&STAGE2_FROZEN) {
                return Err(EetError::Checkpoint(format!(
                    "frozen parameters changed during stage-2 epoch {}",
                    trainer.epoch()
                )));
            }
        }
        let e = trainer.epoch();
        if e % cfg.checkpoint_every == 0 || e == cfg.epochs {
            trainer.to_container().save(&ckpt)?;
        }
        let summary = summarize(cfg.stage, e, lr, &logs);
        if let Some(hook) = opts.on_epoch.as_mut() {
            hook(&summary, trainer.bundle())?;
        }
        summaries.push(summary);
        if opts.stop_after.is_some_and(|k| e >= k) {
            break;
        }
    }
    let epochs_completed = trainer.epoch();
    Ok(RunOutcome { bundle: trainer.into_bundle(), checkpoint: ckpt, losses_csv: csv, epochs_completed, summaries })
}
