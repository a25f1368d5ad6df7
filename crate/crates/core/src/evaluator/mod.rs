//! Quantitative protocol on synthetic ground truth: AU agreement of transferred
//! expressions through an oracle regressor, and identity preservation through an
//! oracle identity embedding.

mod metrics;
mod oracle;
mod report;

use eet_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use metrics::{balanced_threshold, mse, pearson_cc, threshold_at_far};
pub use oracle::{OracleQuality, OracleSettings, Oracles, MAX_AU_MSE, MIN_ID_ACCURACY};
pub use report::{emit_report, format_table, identity_csv, parse_identity_csv, parse_transfer_csv, transfer_csv};

use crate::data::{render, AuKind, GlyphConfig, GlyphSpec, LabeledImage};
use crate::error::{EetError, Result};
use crate::networks::ModelBundle;

const TRANSFER_CHUNK: usize = 32;

/// Anything that puts the expression of `sources[k]` onto `targets[k]`.
pub trait Transfer {
    fn name(&self) -> &str;
    fn transfer(&self, targets: &[&LabeledImage], sources: &[&LabeledImage]) -> Result<Vec<Tensor>>;
}

fn stack(images: &[&LabeledImage]) -> Result<Tensor> {
    let pixels: Vec<&Tensor> = images.iter().map(|i| &i.pixels).collect();
    Ok(Tensor::cat_batch(&pixels)?)
}

impl Transfer for ModelBundle {
    fn name(&self) -> &str {
        "model"
    }

    fn transfer(&self, targets: &[&LabeledImage], sources: &[&LabeledImage]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(targets.len());
        for (t, s) in targets.chunks(TRANSFER_CHUNK).zip(sources.chunks(TRANSFER_CHUNK)) {
            let (generated, _) = ModelBundle::transfer(self, &stack(t)?, &stack(s)?)?;
            for k in 0..t.len() {
                out.push(generated.slice_batch(k, 1)?);
            }
        }
        Ok(out)
    }
}

/// Returns every target unchanged.
pub struct KeepTarget;

impl Transfer for KeepTarget {
    fn name(&self) -> &str {
        "real"
    }

    fn transfer(&self, targets: &[&LabeledImage], _: &[&LabeledImage]) -> Result<Vec<Tensor>> {
        Ok(targets.iter().map(|t| t.pixels.clone()).collect())
    }
}

/// Returns the source image in place of the target.
pub struct CopySource;

impl Transfer for CopySource {
    fn name(&self) -> &str {
        "copy-source"
    }

    fn transfer(&self, _: &[&LabeledImage], sources: &[&LabeledImage]) -> Result<Vec<Tensor>> {
        Ok(sources.iter().map(|s| s.pixels.clone()).collect())
    }
}

/// Re-renders the target glyph with the source's true AU intensities.
pub struct RenderWithSource(pub GlyphConfig);

impl Transfer for RenderWithSource {
    fn name(&self) -> &str {
        "render-with-source"
    }

    fn transfer(&self, targets: &[&LabeledImage], sources: &[&LabeledImage]) -> Result<Vec<Tensor>> {
        targets
            .iter()
            .zip(sources)
            .map(|(t, s)| render(&GlyphSpec { identity: t.identity, pose: t.pose, au: s.au.clone() }, &self.0))
            .collect()
    }
}

/// Per-AU agreement between oracle readings of generated targets and the sources'
/// ground-truth intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub method: String,
    pub aus: Vec<AuKind>,
    /// `None` where the correlation is undefined (a constant column).
    pub pcc: Vec<Option<f64>>,
    pub mse: Vec<f64>,
    pub avg_pcc: Option<f64>,
    pub avg_mse: f64,
    pub samples: usize,
}

impl TransferReport {
    fn from_columns(method: &str, aus: &[AuKind], pcc: Vec<Option<f64>>, mse: Vec<f64>, samples: usize) -> Self {
        let defined: Vec<f64> = pcc.iter().flatten().copied().collect();
        let avg_pcc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let avg_mse = mse.iter().sum::<f64>() / mse.len() as f64;
        Self { method: method.to_string(), aus: aus.to_vec(), pcc, mse, avg_pcc, avg_mse, samples }
    }
}

/// For every test image, draw `pairs_per_image` partners of other identities, transfer
/// each partner's expression onto it and score the result with the oracle.
pub fn evaluate_transfer(
    method: &dyn Transfer,
    test: &[LabeledImage],
    oracles: &Oracles,
    pairs_per_image: usize,
    seed: u64,
) -> Result<TransferReport> {
    if pairs_per_image == 0 {
        return Err(EetError::Config("pairs_per_image must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Vec::new();
    let mut sources = Vec::new();
    for a in test {
        let others: Vec<&LabeledImage> = test.iter().filter(|b| b.identity != a.identity).collect();
        if others.len() < pairs_per_image {
            return Err(EetError::Data(format!(
                "identity {} has only {} partner images of other identities",
                a.identity,
                others.len()
            )));
        }
        for b in others.choose_multiple(&mut rng, pairs_per_image) {
            targets.push(a);
            sources.push(*b);
        }
    }
    let generated = method.transfer(&targets, &sources)?;
    let refs: Vec<&Tensor> = generated.iter().collect();
    let predicted = oracles.predict_au(&Tensor::cat_batch(&refs)?)?;
    let m = oracles.config.aus.len();
    let mut pcc = Vec::with_capacity(m);
    let mut errs = Vec::with_capacity(m);
    for i in 0..m {
        let pred: Vec<f64> = predicted.iter().map(|p| p[i]).collect();
        let truth: Vec<f64> = sources.iter().map(|s| s.au[i]).collect();
        pcc.push(pearson_cc(&pred, &truth).ok());
        errs.push(mse(&pred, &truth)?);
    }
    Ok(TransferReport::from_columns(method.name(), &oracles.config.aus, pcc, errs, targets.len()))
}

/// Verification accuracy and TAR at 1% FAR when one member of each pair is replaced
/// by a transfer output that should keep its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub method: String,
    pub accuracy: f64,
    pub tar_at_far1: f64,
    /// Accept threshold on cosine similarity, calibrated on a disjoint pair set.
    pub threshold: f64,
    pub n_same: usize,
    pub n_diff: usize,
}

/// `(x, y, z, same)`: compare `x` with `y`; `z` is a source of another identity than `x`.
type Pair = (usize, usize, usize, bool);

fn build_pairs(test: &[LabeledImage], n_same: usize, n_diff: usize, rng: &mut impl Rng) -> Result<Vec<Pair>> {
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut pairs = Vec::with_capacity(n_same + n_diff);
    for same in std::iter::repeat(true).take(n_same).chain(std::iter::repeat(false).take(n_diff)) {
        let mut found = None;
        for _ in 0..1000 {
            let x = *idx.choose(rng).expect("nonempty");
            let y = *idx.choose(rng).expect("nonempty");
            let z = *idx.choose(rng).expect("nonempty");
            let (dx, dy, dz) = (test[x].identity, test[y].identity, test[z].identity);
            if x != y && (dx == dy) == same && dz != dx {
                found = Some((x, y, z, same));
                break;
            }
        }
        pairs.push(found.ok_or_else(|| {
            EetError::Data("test split cannot supply the requested same/different identity pairs".into())
        })?);
    }
    Ok(pairs)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn pair_scores(method: &dyn Transfer, test: &[LabeledImage], pairs: &[Pair], oracles: &Oracles) -> Result<Vec<f64>> {
    let targets: Vec<&LabeledImage> = pairs.iter().map(|p| &test[p.0]).collect();
    let sources: Vec<&LabeledImage> = pairs.iter().map(|p| &test[p.2]).collect();
    let replaced = method.transfer(&targets, &sources)?;
    let refs: Vec<&Tensor> = replaced.iter().collect();
    let a = oracles.embed(&Tensor::cat_batch(&refs)?)?;
    let partners: Vec<&LabeledImage> = pairs.iter().map(|p| &test[p.1]).collect();
    let b = oracles.embed(&stack(&partners)?)?;
    Ok(a.iter().zip(&b).map(|(u, v)| cosine(u, v)).collect())
}

pub fn evaluate_identity(
    method: &dyn Transfer,
    test: &[LabeledImage],
    oracles: &Oracles,
    n_same: usize,
    n_diff: usize,
    seed: u64,
) -> Result<IdentityReport> {
    if n_diff < 100 {
        return Err(EetError::Config(format!("TAR at 1% FAR needs at least 100 different-identity pairs, got {n_diff}")));
    }
    if n_same == 0 {
        return Err(EetError::Config("need at least one same-identity pair".into()));
    }
    let mut calib_rng = ChaCha8Rng::seed_from_u64(seed);
    calib_rng.set_stream(1);
    let calib = build_pairs(test, n_same, n_diff, &mut calib_rng)?;
    let calib_scores = pair_scores(method, test, &calib, oracles)?;
    let same: Vec<bool> = calib.iter().map(|p| p.3).collect();
    let threshold = balanced_threshold(&calib_scores, &same)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = build_pairs(test, n_same, n_diff, &mut rng)?;
    let scores = pair_scores(method, test, &pairs, oracles)?;
    let correct = pairs.iter().zip(&scores).filter(|(p, s)| (**s >= threshold) == p.3).count();
    let negatives: Vec<f64> = pairs.iter().zip(&scores).filter(|(p, _)| !p.3).map(|(_, s)| *s).collect();
    let positives: Vec<f64> = pairs.iter().zip(&scores).filter(|(p, _)| p.3).map(|(_, s)| *s).collect();
    let far_threshold = threshold_at_far(&negatives, 0.01)?;
    let tar = positives.iter().filter(|s| **s >= far_threshold).count() as f64 / positives.len() as f64;
    Ok(IdentityReport {
        method: method.name().to_string(),
        accuracy: correct as f64 / pairs.len() as f64,
        tar_at_far1: tar,
        threshold,
        n_same,
        n_diff,
    })
}
