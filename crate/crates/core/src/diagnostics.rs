//! Finite-difference checks of every loss and of the complete second-stage graph.

use std::fmt;
use std::str::FromStr;

pub use eet_tensor::gradcheck::{GradCheckReport, DEFAULT_STEP};
use eet_tensor::gradcheck::{check_inputs, check_params, sample_coords};
use eet_tensor::{Graph, ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{render_labeled, sample_au, GlyphConfig, GlyphSpec};
use crate::error::{EetError, Result};
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, attribute_constraint_loss, au_confusion_loss, au_discrimination_loss,
    au_weights, identity_confusion_loss, identity_discrimination_loss, reconstruction_loss, stage2_discriminator_objective,
    stage2_generator_objective, weighted_au_loss, AdversarialForm, BatchLabels, DiscriminatorOutputs, LossWeights,
    ObjectiveSettings, Stage2Outputs, Variant,
};
use crate::networks::{ArchConfig, ModelBundle, Module};

/// Elementwise tolerance for single losses and layers.
pub const LOSS_TOLERANCE: f64 = 1e-6;
/// Tolerance for the composite second-stage graph.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    AuDiscrimination,
    AuConfusion,
    IdDiscrimination,
    IdConfusion,
    WeightedAu,
    AdversarialLsgan,
    AdversarialLog,
    Attribute,
    Reconstruction,
}

impl LossKind {
    pub const ALL: [LossKind; 9] = [
        LossKind::AuDiscrimination,
        LossKind::AuConfusion,
        LossKind::IdDiscrimination,
        LossKind::IdConfusion,
        LossKind::WeightedAu,
        LossKind::AdversarialLsgan,
        LossKind::AdversarialLog,
        LossKind::Attribute,
        LossKind::Reconstruction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::AuDiscrimination => "au_discrimination",
            LossKind::AuConfusion => "au_confusion",
            LossKind::IdDiscrimination => "id_discrimination",
            LossKind::IdConfusion => "id_confusion",
            LossKind::WeightedAu => "weighted_au",
            LossKind::AdversarialLsgan => "adversarial_lsgan",
            LossKind::AdversarialLog => "adversarial_log",
            LossKind::Attribute => "attribute",
            LossKind::Reconstruction => "reconstruction",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = EetError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EetError::Config(format!("unknown loss `{s}`")))
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn lower(e: EetError) -> TensorError {
    match e {
        EetError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

fn wrap<F>(f: F) -> impl Fn(&mut Tape, &[Var]) -> eet_tensor::Result<Var>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    move |t, v| f(t, v).map_err(lower)
}

/// Gradient check of one loss with respect to all of its differentiable inputs.
pub fn check_loss(kind: LossKind, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, levels, ids, poses) = (3, 4, 6, 10, 3);
    let h = DEFAULT_STEP;
    let level_labels: Vec<Vec<usize>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0..levels)).collect()).collect();
    let id_labels: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=ids)).collect();
    let pose_labels: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=poses)).collect();
    let au_targets: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0.0..5.0)).collect()).collect();
    let weights = au_weights(&(0..m).map(|_| rng.gen_range(0.1..1.0)).collect::<Vec<_>>())?;

    let report = match kind {
        LossKind::AuDiscrimination => check_inputs(
            &[uniform(&mut rng, &[n, m, levels], 0.0, 1.0)],
            h,
            wrap(|t, v| au_discrimination_loss(t, v[0], &level_labels)),
        ),
        LossKind::AuConfusion => {
            check_inputs(&[uniform(&mut rng, &[n, m, levels], 0.0, 1.0)], h, wrap(|t, v| au_confusion_loss(t, v[0])))
        }
        LossKind::IdDiscrimination => check_inputs(
            &[uniform(&mut rng, &[n, ids], 0.0, 1.0)],
            h,
            wrap(|t, v| identity_discrimination_loss(t, v[0], &id_labels)),
        ),
        LossKind::IdConfusion => {
            check_inputs(&[uniform(&mut rng, &[n, ids], 0.0, 1.0)], h, wrap(|t, v| identity_confusion_loss(t, v[0])))
        }
        LossKind::WeightedAu => check_inputs(
            &[uniform(&mut rng, &[n, m], 0.0, 1.0)],
            h,
            wrap(|t, v| weighted_au_loss(t, v[0], &au_targets, &weights, 5)),
        ),
        LossKind::AdversarialLsgan | LossKind::AdversarialLog => {
            let form = if kind == LossKind::AdversarialLog { AdversarialForm::Log } else { AdversarialForm::LeastSquares };
            check_inputs(
                &[uniform(&mut rng, &[n, 1], -2.0, 2.0), uniform(&mut rng, &[n, 1], -2.0, 2.0)],
                h,
                wrap(|t, v| {
                    let d = adversarial_d_loss(t, v[0], v[1], form)?;
                    let g = adversarial_g_loss(t, v[1], form);
                    let g = t.scale(g, 0.7);
                    Ok(t.add(d, g)?)
                }),
            )
        }
        LossKind::Attribute => check_inputs(
            &[uniform(&mut rng, &[n, ids], -3.0, 3.0), uniform(&mut rng, &[n, poses], -3.0, 3.0)],
            h,
            wrap(|t, v| attribute_constraint_loss(t, v[0], v[1], &id_labels, &pose_labels, 1.0)),
        ),
        LossKind::Reconstruction => {
            let shape = [2, 1, 4, 4];
            check_inputs(
                &[
                    uniform(&mut rng, &shape, 0.0, 1.0),
                    uniform(&mut rng, &shape, 0.0, 1.0),
                    uniform(&mut rng, &shape, 0.0, 1.0),
                ],
                h,
                wrap(|t, v| reconstruction_loss(t, v[0], v[1], v[2])),
            )
        }
    };
    Ok(report?)
}

/// Sum of the second-stage generator and discriminator objectives, built without
/// detaching anything, so gradients reach every module.
fn composite(
    bundle: &ModelBundle,
    store: &ParamStore,
    input: &Tensor,
    labels: &BatchLabels,
    s: &ObjectiveSettings,
) -> Result<(Tape, Var)> {
    let mut g = Graph::new(store);
    let x = g.constant(input.clone());
    let cc = bundle.cross_cycle(&mut g, x)?;
    let du_scores = bundle.au_discriminator(&mut g, cc.latents.f_f)?;
    let dd_scores = bundle.id_discriminator(&mut g, cc.latents.f_r)?;
    let (swap_id_logits, swap_pose_logits) = bundle.classify(&mut g, cc.swap_feature)?;
    let sc_swap = bundle.swap_discriminator(&mut g, cc.swap)?;
    let g_swap = bundle.image_discriminator(&mut g, cc.swap)?;
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
    let gen = stage2_generator_objective(&mut g, &out, labels, s)?.total(&mut g)?;
    let d_out = DiscriminatorOutputs {
        sc_self: bundle.swap_discriminator(&mut g, cc.self_recon)?,
        sc_swap,
        g_real: bundle.image_discriminator(&mut g, cc.input)?,
        g_swap,
    };
    let disc = stage2_discriminator_objective(&mut g, &d_out, s)?.total(&mut g)?;
    let root = g.add(gen, disc)?;
    Ok((g.into_tape(), root))
}

/// Gradient check of the full second-stage graph on two rendered 32x32 images,
/// sampling `per_module` parameter coordinates from each of the nine modules.
pub fn check_stage2_composite(seed: u64, per_module: usize, step: f64) -> Result<GradCheckReport> {
    let glyph = GlyphConfig::default();
    let arch = ArchConfig {
        resolution: glyph.resolution,
        num_aus: glyph.aus.len(),
        max_level: glyph.max_level,
        identities: glyph.identities,
        poses: glyph.poses,
        ..ArchConfig::default()
    };
    let mut bundle = ModelBundle::new(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = [(1, 1), (2, 3)]
        .into_iter()
        .map(|(identity, pose)| render_labeled(&GlyphSpec { identity, pose, au: sample_au(&glyph, &mut rng) }, &glyph))
        .collect::<Result<Vec<_>>>()?;
    let pixels: Vec<&Tensor> = images.iter().map(|i| &i.pixels).collect();
    let input = Tensor::cat_batch(&pixels)?;
    let labels = BatchLabels {
        au: images.iter().map(|i| i.au.clone()).collect(),
        identities: images.iter().map(|i| i.identity).collect(),
        poses: images.iter().map(|i| i.pose).collect(),
    };
    let settings = ObjectiveSettings {
        weights: LossWeights::default(),
        toggles: Variant::Eet.toggles(),
        au_weights: au_weights(&vec![0.5; glyph.aus.len()])?,
        max_level: glyph.max_level,
        poses: glyph.poses,
        form: AdversarialForm::LeastSquares,
    };

    let mut coords = Vec::new();
    for module in Module::ALL {
        let ids = bundle.params(&[module]);
        coords.extend(sample_coords(&bundle.store, &ids, per_module, &mut rng));
    }
    let mut store = std::mem::take(&mut bundle.store);
    let report = check_params(&mut store, &coords, step, |store| {
        composite(&bundle, store, &input, &labels, &settings).map_err(lower)
    });
    bundle.store = store;
    Ok(report?)
}
