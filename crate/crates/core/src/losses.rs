//! Loss terms as differentiable operations on tape variables.
//!
//! Every term is averaged over the batch; patch maps and images are averaged per
//! element.

use std::fmt;
use std::str::FromStr;

use eet_tensor::{Tape, Tensor, Var};

use crate::error::{EetError, Result};

/// Loss weights: attribute constraint, pose share of it, AU and identity
/// disentanglement, swap consistency, image adversarial and reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub c: f64,
    pub p: f64,
    pub adu: f64,
    pub add: f64,
    pub sc: f64,
    pub adg: f64,
    pub r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { c: 2.0, p: 1.0, adu: 40.0, add: 40.0, sc: 0.2, adg: 1.2, r: 40.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.c, self.p, self.adu, self.add, self.sc, self.adg, self.r];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(EetError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Pose weight actually used: zero when there is a single pose.
    pub fn pose_weight(&self, poses: usize) -> f64 {
        if poses == 1 {
            0.0
        } else {
            self.p
        }
    }
}

/// Which terms are active, used to build the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles {
    pub attribute: bool,
    pub disentangle: bool,
    pub swap_consistency: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self { attribute: true, disentangle: true, swap_consistency: true }
    }
}

/// Named model variants: the full model, its single-branch form and the reduced
/// baselines obtained by switching loss groups off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Eet,
    EetSingle,
    BNet,
    BcNet,
    BcaNet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Eet, Variant::EetSingle, Variant::BNet, Variant::BcNet, Variant::BcaNet];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Eet => "eet",
            Variant::EetSingle => "eet-single",
            Variant::BNet => "b-net",
            Variant::BcNet => "bc-net",
            Variant::BcaNet => "bca-net",
        }
    }

    pub fn toggles(self) -> LossToggles {
        match self {
            Variant::Eet | Variant::EetSingle => LossToggles::default(),
            Variant::BNet => LossToggles { attribute: false, disentangle: false, swap_consistency: false },
            Variant::BcNet => LossToggles { attribute: true, disentangle: false, swap_consistency: false },
            Variant::BcaNet => LossToggles { attribute: true, disentangle: true, swap_consistency: false },
        }
    }

    pub fn single_branch(self) -> bool {
        self == Variant::EetSingle
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = EetError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| EetError::Config(format!("unknown variant `{s}`")))
    }
}

/// Least-squares or log-likelihood adversarial objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdversarialForm {
    #[default]
    LeastSquares,
    Log,
}

impl FromStr for AdversarialForm {
    type Err = EetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsgan" => Ok(AdversarialForm::LeastSquares),
            "log" => Ok(AdversarialForm::Log),
            _ => Err(EetError::Config(format!("unknown adversarial form `{s}` (lsgan|log)"))),
        }
    }
}

impl fmt::Display for AdversarialForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdversarialForm::LeastSquares => "lsgan",
            AdversarialForm::Log => "log",
        })
    }
}

/// Nearest integer level, ties away from zero.
pub fn discretize(u: f64, max_level: usize) -> Result<usize> {
    if !(0.0..=max_level as f64).contains(&u) {
        return Err(EetError::Data(format!("AU intensity {u} outside [0, {max_level}]")));
    }
    Ok(u.round() as usize)
}

fn expect_shape(tape: &Tape, v: Var, rank: usize, what: &str) -> Result<Vec<usize>> {
    let shape = tape.shape(v).to_vec();
    if shape.len() != rank {
        return Err(EetError::Data(format!("{what}: expected rank {rank}, got shape {shape:?}")));
    }
    Ok(shape)
}

/// Mean squared distance of `scores` (`N x m x (l+1)`) to the one-hot codes of the
/// discretized intensities `levels` (`N x m`).
pub fn au_discrimination_loss(tape: &mut Tape, scores: Var, levels: &[Vec<usize>]) -> Result<Var> {
    let shape = expect_shape(tape, scores, 3, "AU discrimination scores")?;
    let (n, m, k) = (shape[0], shape[1], shape[2]);
    if levels.len() != n || levels.iter().any(|row| row.len() != m) {
        return Err(EetError::Data(format!("AU labels do not match scores of shape {shape:?}")));
    }
    let mut target = vec![0.0; n * m * k];
    for (s, row) in levels.iter().enumerate() {
        for (i, &q) in row.iter().enumerate() {
            if q >= k {
                return Err(EetError::Data(format!("AU level {q} outside [0, {}]", k - 1)));
            }
            target[(s * m + i) * k + q] = 1.0;
        }
    }
    let diff = tape.sub_const(scores, Tensor::new(&shape, target)?)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Mean squared distance of `scores` to the uniform probability `1 / (l+1)`.
pub fn au_confusion_loss(tape: &mut Tape, scores: Var) -> Result<Var> {
    let shape = expect_shape(tape, scores, 3, "AU confusion scores")?;
    let diff = tape.sub_const(scores, Tensor::full(&shape, 1.0 / shape[2] as f64))?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Identity analogue of the AU discrimination loss over `N x n` scores and 1-based labels.
pub fn identity_discrimination_loss(tape: &mut Tape, scores: Var, identities: &[usize]) -> Result<Var> {
    let shape = expect_shape(tape, scores, 2, "identity discrimination scores")?;
    let target = one_hot(identities, shape[0], shape[1], "identity")?;
    let diff = tape.sub_const(scores, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

pub fn identity_confusion_loss(tape: &mut Tape, scores: Var) -> Result<Var> {
    let shape = expect_shape(tape, scores, 2, "identity confusion scores")?;
    let diff = tape.sub_const(scores, Tensor::full(&shape, 1.0 / shape[1] as f64))?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

fn one_hot(labels: &[usize], n: usize, classes: usize, what: &str) -> Result<Tensor> {
    if labels.len() != n {
        return Err(EetError::Data(format!("{} {what} labels for a batch of {n}", labels.len())));
    }
    let mut t = vec![0.0; n * classes];
    for (s, &d) in labels.iter().enumerate() {
        if !(1..=classes).contains(&d) {
            return Err(EetError::Data(format!("{what} label {d} outside [1, {classes}]")));
        }
        t[s * classes + d - 1] = 1.0;
    }
    Ok(Tensor::new(&[n, classes], t)?)
}

/// Normalized inverse occurrence rates.
#[derive(Clone, Debug, PartialEq)]
pub struct AuWeights(pub Vec<f64>);

pub fn au_weights(rates: &[f64]) -> Result<AuWeights> {
    if rates.is_empty() {
        return Err(EetError::Data("no occurrence rates".into()));
    }
    if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(EetError::Data(format!("occurrence rate {r} outside (0, 1]")));
    }
    let inv: Vec<f64> = rates.iter().map(|r| 1.0 / r).collect();
    let total: f64 = inv.iter().sum();
    Ok(AuWeights(inv.into_iter().map(|w| w / total).collect()))
}

/// `(1/m) sum_i w_i (u_i - l * pred_i)^2`, averaged over the batch. `pred` holds
/// sigmoid outputs of shape `N x m`.
pub fn weighted_au_loss(
    tape: &mut Tape,
    pred: Var,
    targets: &[Vec<f64>],
    weights: &AuWeights,
    max_level: usize,
) -> Result<Var> {
    let shape = expect_shape(tape, pred, 2, "AU predictions")?;
    let (n, m) = (shape[0], shape[1]);
    if targets.len() != n || targets.iter().any(|t| t.len() != m) || weights.0.len() != m {
        return Err(EetError::Data(format!("AU targets/weights do not match predictions of shape {shape:?}")));
    }
    let u = Tensor::new(&shape, targets.concat())?;
    let w = Tensor::new(&shape, (0..n).flat_map(|_| weights.0.iter().copied()).collect())?;
    let scaled = tape.scale(pred, max_level as f64);
    let diff = tape.sub_const(scaled, u)?;
    let sq = tape.square(diff);
    let weighted = tape.mul_const(sq, w)?;
    Ok(tape.mean(weighted))
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(EetError::Data(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Discriminator loss: push `real` outputs to 1 and `fake` outputs to 0.
pub fn adversarial_d_loss(tape: &mut Tape, real: Var, fake: Var, form: AdversarialForm) -> Result<Var> {
    same_shape(tape, real, fake, "adversarial outputs")?;
    let (r, f) = match form {
        AdversarialForm::LeastSquares => {
            let r = tape.add_scalar(real, -1.0);
            (tape.square(r), tape.square(fake))
        }
        AdversarialForm::Log => {
            let neg = tape.scale(real, -1.0);
            (tape.softplus(neg), tape.softplus(fake))
        }
    };
    let r = tape.mean(r);
    let f = tape.mean(f);
    Ok(tape.add(r, f)?)
}

/// Generator loss: push `fake` outputs to 1.
pub fn adversarial_g_loss(tape: &mut Tape, fake: Var, form: AdversarialForm) -> Var {
    let t = match form {
        AdversarialForm::LeastSquares => {
            let f = tape.add_scalar(fake, -1.0);
            tape.square(f)
        }
        AdversarialForm::Log => {
            let neg = tape.scale(fake, -1.0);
            tape.softplus(neg)
        }
    };
    tape.mean(t)
}

/// `(d_loss, g_loss)` of the swap-consistency discriminator, which treats
/// self-reconstructions as real and swapped generations as fake.
pub fn swap_consistency_losses(
    tape: &mut Tape,
    self_out: Var,
    swap_out: Var,
    form: AdversarialForm,
) -> Result<(Var, Var)> {
    let d = adversarial_d_loss(tape, self_out, swap_out, form)?;
    Ok((d, adversarial_g_loss(tape, swap_out, form)))
}

/// `(d_loss, g_loss)` of the image discriminator on real inputs and generations.
pub fn image_adversarial_losses(
    tape: &mut Tape,
    real_out: Var,
    fake_out: Var,
    form: AdversarialForm,
) -> Result<(Var, Var)> {
    let d = adversarial_d_loss(tape, real_out, fake_out, form)?;
    Ok((d, adversarial_g_loss(tape, fake_out, form)))
}

/// Cross-entropy on identity and (weighted) pose logits, 1-based labels.
pub fn attribute_constraint_loss(
    tape: &mut Tape,
    id_logits: Var,
    pose_logits: Var,
    identities: &[usize],
    poses: &[usize],
    pose_weight: f64,
) -> Result<Var> {
    let id_shape = expect_shape(tape, id_logits, 2, "identity logits")?;
    let pose_shape = expect_shape(tape, pose_logits, 2, "pose logits")?;
    let n = id_shape[0];
    let id_target = one_hot(identities, n, id_shape[1], "identity")?;
    let pose_target = one_hot(poses, pose_shape[0], pose_shape[1], "pose")?;
    let ls = tape.log_softmax(id_logits);
    let picked = tape.mul_const(ls, id_target)?;
    let id_term = tape.sum(picked);
    let mut loss = tape.scale(id_term, -1.0 / n as f64);
    if pose_weight != 0.0 {
        let ls = tape.log_softmax(pose_logits);
        let picked = tape.mul_const(ls, pose_target)?;
        let pose_term = tape.sum(picked);
        let pose_term = tape.scale(pose_term, -pose_weight / n as f64);
        loss = tape.add(loss, pose_term)?;
    }
    Ok(loss)
}

/// Mean absolute self-reconstruction error plus mean absolute cross-cycle error.
pub fn reconstruction_loss(tape: &mut Tape, check: Var, hat: Var, real: Var) -> Result<Var> {
    same_shape(tape, check, real, "self-reconstruction")?;
    same_shape(tape, hat, real, "cross-cycle reconstruction")?;
    let mut total = None;
    for x in [check, hat] {
        let d = tape.sub(x, real)?;
        let a = tape.abs(d);
        let m = tape.mean(a);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(total.expect("two terms"))
}

/// Names under which loss terms are logged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Au,
    Attribute,
    AuDiscrimination,
    IdDiscrimination,
    AuSwap,
    AttributeSwap,
    Reconstruction,
    AuConfusion,
    IdConfusion,
    SwapG,
    ImageG,
    SwapD,
    ImageD,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Au => "au",
            Term::Attribute => "attr",
            Term::AuDiscrimination => "au_disc",
            Term::IdDiscrimination => "id_disc",
            Term::AuSwap => "au_swap",
            Term::AttributeSwap => "attr_swap",
            Term::Reconstruction => "recon",
            Term::AuConfusion => "au_conf",
            Term::IdConfusion => "id_conf",
            Term::SwapG => "sc_g",
            Term::ImageG => "adg_g",
            Term::SwapD => "sc_d",
            Term::ImageD => "adg_d",
        }
    }
}

/// A weighted sum of named terms.
#[derive(Clone, Debug, Default)]
pub struct Objective {
    pub terms: Vec<(Term, f64, Var)>,
}

impl Objective {
    pub fn push(&mut self, term: Term, weight: f64, value: Var) {
        self.terms.push((term, weight, value));
    }

    pub fn total(&self, tape: &mut Tape) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(_, w, v) in &self.terms {
            let scaled = if w == 1.0 { v } else { tape.scale(v, w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| EetError::Config("objective has no active terms".into()))
    }

    /// Unweighted term values in insertion order.
    pub fn values(&self, tape: &Tape) -> Vec<(Term, f64)> {
        self.terms.iter().map(|&(t, _, v)| (t, tape.value(v).item())).collect()
    }
}

/// Labels of a batch, aligned with its rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLabels {
    pub au: Vec<Vec<f64>>,
    pub identities: Vec<usize>,
    pub poses: Vec<usize>,
}

impl BatchLabels {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn levels(&self, max_level: usize) -> Result<Vec<Vec<usize>>> {
        self.au.iter().map(|row| row.iter().map(|&u| discretize(u, max_level)).collect()).collect()
    }

    /// Swap the first and second halves (the two sides of a pair batch).
    pub fn swap_halves(&self) -> Self {
        fn swap<T: Clone>(v: &[T]) -> Vec<T> {
            let h = v.len() / 2;
            v[h..].iter().chain(&v[..h]).cloned().collect()
        }
        Self { au: swap(&self.au), identities: swap(&self.identities), poses: swap(&self.poses) }
    }
}

/// Network outputs needed by the first-stage objective.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Outputs {
    pub au_pred: Var,
    pub id_logits: Var,
    pub pose_logits: Var,
    /// AU discriminator scores on the AU-free feature, `N x m x (l+1)`.
    pub du_scores: Var,
    /// Identity discriminator scores on the AU-related feature, `N x n`.
    pub dd_scores: Var,
}

/// Settings shared by both stage objectives.
#[derive(Clone, Debug)]
pub struct ObjectiveSettings {
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub au_weights: AuWeights,
    pub max_level: usize,
    pub poses: usize,
    pub form: AdversarialForm,
}

/// AU regression, attribute constraint and the discriminator side of both
/// disentanglement games, on the real images of the batch.
pub fn stage1_objective(
    tape: &mut Tape,
    out: &Stage1Outputs,
    labels: &BatchLabels,
    s: &ObjectiveSettings,
) -> Result<Objective> {
    let mut obj = Objective::default();
    let au = weighted_au_loss(tape, out.au_pred, &labels.au, &s.au_weights, s.max_level)?;
    obj.push(Term::Au, 1.0, au);
    if s.toggles.attribute {
        let pw = s.weights.pose_weight(s.poses);
        let c = attribute_constraint_loss(tape, out.id_logits, out.pose_logits, &labels.identities, &labels.poses, pw)?;
        obj.push(Term::Attribute, s.weights.c, c);
    }
    if s.toggles.disentangle {
        let du = au_discrimination_loss(tape, out.du_scores, &labels.levels(s.max_level)?)?;
        obj.push(Term::AuDiscrimination, s.weights.adu, du);
        let dd = identity_discrimination_loss(tape, out.dd_scores, &labels.identities)?;
        obj.push(Term::IdDiscrimination, s.weights.add, dd);
    }
    Ok(obj)
}

/// Network outputs needed by the generator side of the second-stage objective.
/// Rows are ordered `[a; b]`; swapped generations carry the expression of the
/// other half.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Outputs {
    pub input: Var,
    pub au_pred: Var,
    pub du_scores: Var,
    pub dd_scores: Var,
    pub swap: Var,
    pub self_recon: Var,
    pub cycle: Var,
    pub swap_au_pred: Var,
    pub swap_id_logits: Var,
    pub swap_pose_logits: Var,
    /// Swap-consistency discriminator on the swapped generations.
    pub sc_swap: Var,
    /// Image discriminator on the swapped generations.
    pub g_swap: Var,
}

/// Generator-side objective of the second stage.
pub fn stage2_generator_objective(
    tape: &mut Tape,
    out: &Stage2Outputs,
    labels: &BatchLabels,
    s: &ObjectiveSettings,
) -> Result<Objective> {
    let mut obj = Objective::default();
    let au = weighted_au_loss(tape, out.au_pred, &labels.au, &s.au_weights, s.max_level)?;
    obj.push(Term::Au, 1.0, au);
    let swapped = labels.swap_halves();
    let au_swap = weighted_au_loss(tape, out.swap_au_pred, &swapped.au, &s.au_weights, s.max_level)?;
    obj.push(Term::AuSwap, 1.0, au_swap);
    if s.toggles.attribute {
        let pw = s.weights.pose_weight(s.poses);
        let c = attribute_constraint_loss(
            tape,
            out.swap_id_logits,
            out.swap_pose_logits,
            &labels.identities,
            &labels.poses,
            pw,
        )?;
        obj.push(Term::AttributeSwap, s.weights.c, c);
    }
    let r = reconstruction_loss(tape, out.self_recon, out.cycle, out.input)?;
    obj.push(Term::Reconstruction, s.weights.r, r);
    if s.toggles.disentangle {
        let cu = au_confusion_loss(tape, out.du_scores)?;
        obj.push(Term::AuConfusion, s.weights.adu, cu);
        let cd = identity_confusion_loss(tape, out.dd_scores)?;
        obj.push(Term::IdConfusion, s.weights.add, cd);
    }
    if s.toggles.swap_consistency {
        let g = adversarial_g_loss(tape, out.sc_swap, s.form);
        obj.push(Term::SwapG, s.weights.sc, g);
    }
    let g = adversarial_g_loss(tape, out.g_swap, s.form);
    obj.push(Term::ImageG, s.weights.adg, g);
    Ok(obj)
}

/// Discriminator outputs for the second-stage discriminator step.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorOutputs {
    pub sc_self: Var,
    pub sc_swap: Var,
    pub g_real: Var,
    pub g_swap: Var,
}

pub fn stage2_discriminator_objective(
    tape: &mut Tape,
    out: &DiscriminatorOutputs,
    s: &ObjectiveSettings,
) -> Result<Objective> {
    let mut obj = Objective::default();
    if s.toggles.swap_consistency {
        let d = adversarial_d_loss(tape, out.sc_self, out.sc_swap, s.form)?;
        obj.push(Term::SwapD, s.weights.sc, d);
    }
    let d = adversarial_d_loss(tape, out.g_real, out.g_swap, s.form)?;
    obj.push(Term::ImageD, s.weights.adg, d);
    Ok(obj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_rounds_half_away_from_zero() {
        assert_eq!(discretize(2.6, 5).unwrap(), 3);
        assert_eq!(discretize(0.0, 5).unwrap(), 0);
        assert_eq!(discretize(4.5, 5).unwrap(), 5);
        assert_eq!(discretize(0.5, 5).unwrap(), 1);
        assert!(discretize(5.01, 5).is_err());
        assert!(discretize(-0.1, 5).is_err());
    }

    #[test]
    fn pose_weight_vanishes_for_single_pose() {
        let w = LossWeights::default();
        assert_eq!(w.pose_weight(1), 0.0);
        assert_eq!(w.pose_weight(3), 1.0);
    }

    #[test]
    fn variants_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(!Variant::BcNet.toggles().disentangle);
        assert!(Variant::BcNet.toggles().attribute);
    }

    #[test]
    fn label_errors_are_reported() {
        let mut tape = Tape::new();
        let s = tape.input(Tensor::zeros(&[1, 2, 6]));
        assert!(au_discrimination_loss(&mut tape, s, &[vec![0, 6]]).is_err());
        assert!(au_discrimination_loss(&mut tape, s, &[vec![0]]).is_err());
        let d = tape.input(Tensor::zeros(&[1, 10]));
        assert!(identity_discrimination_loss(&mut tape, d, &[0]).is_err());
        assert!(identity_discrimination_loss(&mut tape, d, &[11]).is_err());
        assert!(au_weights(&[0.0, 0.5]).is_err());
    }

    #[test]
    fn swap_halves_exchanges_pair_sides() {
        let labels = BatchLabels {
            au: vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]],
            identities: vec![1, 2, 3, 4],
            poses: vec![1, 1, 2, 2],
        };
        let s = labels.swap_halves();
        assert_eq!(s.identities, vec![3, 4, 1, 2]);
        assert_eq!(s.swap_halves(), labels);
    }
}
