//! Synthetic labelled glyph faces: rendering, dataset sampling, augmentation and I/O.

mod glyph;
mod io;

use std::collections::BTreeSet;

use eet_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use glyph::{region_bounds, render, AuKind, Geometry, GlyphConfig, GlyphSpec};
pub use io::{contact_sheet, load_dataset, read_image, read_manifest, save_dataset, write_image, DatasetMeta, ManifestEntry, MANIFEST_FILE, META_FILE};

use crate::error::{EetError, Result};

/// An image with exact expression, identity and pose labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `1 x C x H x W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub au: Vec<f64>,
    /// 1-based identity index.
    pub identity: usize,
    /// 1-based pose index; 1 is the leftmost pose.
    pub pose: usize,
}

impl LabeledImage {
    pub fn spec(&self) -> GlyphSpec {
        GlyphSpec { identity: self.identity, pose: self.pose, au: self.au.clone() }
    }
}

pub fn render_labeled(spec: &GlyphSpec, cfg: &GlyphConfig) -> Result<LabeledImage> {
    Ok(LabeledImage { pixels: render(spec, cfg)?, au: spec.au.clone(), identity: spec.identity, pose: spec.pose })
}

/// Subject-disjoint train/test split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: GlyphConfig,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Dataset {
    pub fn identities(images: &[LabeledImage]) -> BTreeSet<usize> {
        images.iter().map(|img| img.identity).collect()
    }
}

/// Archetype intensities on a 0..5 scale for each AU kind.
fn archetype(index: usize, kind: AuKind) -> f64 {
    use AuKind::*;
    match (index, kind) {
        // neutral
        (0, _) => 0.3,
        // happy
        (1, MouthCurve) => 4.2,
        (1, LipPart) => 2.5,
        (1, JawDrop) => 1.0,
        (1, _) => 0.4,
        // surprise
        (2, BrowRaise | InnerBrowRaise | OuterBrowRaise) => 4.2,
        (2, LipPart) => 3.5,
        (2, JawDrop) => 4.0,
        (2, _) => 0.2,
        // anger
        (3, BrowKnit) => 4.5,
        (3, _) => 0.3,
        // sadness
        (4, InnerBrowRaise) => 3.8,
        (4, BrowKnit) => 2.8,
        (4, BrowRaise) => 1.5,
        (4, _) => 0.5,
        _ => 0.0,
    }
}

const ARCHETYPES: usize = 5;
const UNIFORM_SHARE: f64 = 0.3;
const NOISE: f64 = 1.5;

/// Draw one AU vector: with some probability uniform on `[0, l]`, otherwise a random
/// archetype plus uniform noise, clamped to `[0, l]`.
pub fn sample_au(cfg: &GlyphConfig, rng: &mut impl Rng) -> Vec<f64> {
    let l = cfg.max_level as f64;
    let scale = l / 5.0;
    if rng.gen::<f64>() < UNIFORM_SHARE {
        return cfg.aus.iter().map(|_| rng.gen_range(0.0..=l)).collect();
    }
    let a = rng.gen_range(0..ARCHETYPES);
    cfg.aus
        .iter()
        .map(|&k| (archetype(a, k) * scale + rng.gen_range(-NOISE..NOISE) * scale).clamp(0.0, l))
        .collect()
}

/// Sample `images_per_id` labelled renders for each of `cfg.identities` identities,
/// holding out `round(test_fraction * n)` identities for the test split.
pub fn sample_dataset(cfg: &GlyphConfig, images_per_id: usize, test_fraction: f64, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.identities;
    if n < 4 {
        return Err(EetError::Config(format!("need at least 4 identities, got {n}")));
    }
    if images_per_id == 0 {
        return Err(EetError::Config("images_per_id must be positive".into()));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(EetError::Config(format!(
            "test fraction {test_fraction} leaves an empty split for {n} identities"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (1..=n).collect();
    ids.shuffle(&mut rng);
    let test_ids: BTreeSet<usize> = ids[..n_test].iter().copied().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for identity in 1..=n {
        for _ in 0..images_per_id {
            let pose = rng.gen_range(1..=cfg.poses);
            let au = sample_au(cfg, &mut rng);
            let img = render_labeled(&GlyphSpec { identity, pose, au }, cfg)?;
            if test_ids.contains(&identity) {
                test.push(img);
            } else {
                train.push(img);
            }
        }
    }
    Ok(Dataset { config: cfg.clone(), train, test })
}

/// Render `count` images per identity for every identity (no split).
pub fn sample_images(cfg: &GlyphConfig, per_identity: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_identity * cfg.identities);
    for identity in 1..=cfg.identities {
        for _ in 0..per_identity {
            let pose = rng.gen_range(1..=cfg.poses);
            let au = sample_au(cfg, &mut rng);
            out.push(render_labeled(&GlyphSpec { identity, pose, au }, cfg)?);
        }
    }
    Ok(out)
}

/// Horizontal mirror with the pose label remapped; AU labels are unchanged since
/// every action unit is drawn bilaterally.
pub fn mirror(img: &LabeledImage, poses: usize) -> LabeledImage {
    LabeledImage {
        pixels: img.pixels.flip_last_axis(),
        au: img.au.clone(),
        identity: img.identity,
        pose: poses + 1 - img.pose,
    }
}

/// Mirror `img` when `coin` is true.
pub fn augment_mirror(img: &LabeledImage, poses: usize, coin: bool) -> LabeledImage {
    if coin {
        mirror(img, poses)
    } else {
        img.clone()
    }
}

/// Fraction of images whose AU `i` intensity exceeds `(l - 1) / 2`, clamped below
/// at `1 / N` so the inverse-rate weights stay finite.
pub fn occurrence_rates(images: &[LabeledImage], max_level: usize) -> Result<Vec<f64>> {
    let first = images.first().ok_or_else(|| EetError::Data("empty image set".into()))?;
    let threshold = (max_level as f64 - 1.0) / 2.0;
    let n = images.len() as f64;
    Ok((0..first.au.len())
        .map(|i| {
            let hits = images.iter().filter(|img| img.au[i] > threshold).count() as f64;
            (hits / n).max(1.0 / n)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_subject_disjoint_and_sized() {
        let cfg = GlyphConfig::default();
        let ds = sample_dataset(&cfg, 20, 0.3, 5).unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 200);
        let train = Dataset::identities(&ds.train);
        let test = Dataset::identities(&ds.test);
        assert!(train.is_disjoint(&test));
        assert_eq!(test.len(), 3);
    }

    #[test]
    fn empty_split_is_rejected() {
        let cfg = GlyphConfig::default();
        assert!(sample_dataset(&cfg, 2, 0.0, 1).is_err());
        assert!(sample_dataset(&cfg, 2, 1.0, 1).is_err());
        let tiny = GlyphConfig { identities: 3, ..GlyphConfig::default() };
        assert!(sample_dataset(&tiny, 2, 0.3, 1).is_err());
    }

    #[test]
    fn fixed_seed_reproduces_dataset() {
        let cfg = GlyphConfig::default();
        let a = sample_dataset(&cfg, 3, 0.3, 17).unwrap();
        let b = sample_dataset(&cfg, 3, 0.3, 17).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn mirror_is_an_involution_and_keeps_frontal() {
        let cfg = GlyphConfig::default();
        let img = render_labeled(&GlyphSpec { identity: 2, pose: 2, au: vec![1.0, 2.0, 3.0, 4.0] }, &cfg).unwrap();
        let once = mirror(&img, 3);
        assert_eq!(once.pose, 2);
        assert_eq!(mirror(&once, 3), img);
        assert_eq!(augment_mirror(&img, 3, false), img);
    }

    #[test]
    fn occurrence_rates_are_clamped() {
        let cfg = GlyphConfig::default();
        let img = render_labeled(&GlyphSpec { identity: 1, pose: 1, au: vec![0.0, 3.0, 2.0, 2.1] }, &cfg).unwrap();
        let rates = occurrence_rates(&[img.clone(), img], 5).unwrap();
        assert_eq!(rates, vec![0.5, 1.0, 0.5, 1.0]);
    }
}
