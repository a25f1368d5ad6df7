//! Procedural "glyph face" renderer.
//!
//! All geometry lives in a 32-unit frame centred on the image. Inner features are
//! shifted horizontally by the pose offset; every drawing primitive depends on the
//! horizontal coordinate only through `|dx|` or `dx^2`, so a left pose is the exact
//! mirror image of the matching right pose. Each action unit only draws inside its
//! own clip box, and the boxes of any valid configuration are pairwise disjoint.

use std::fmt;
use std::str::FromStr;

use eet_tensor::Tensor;

use crate::error::{EetError, Result};

/// Action units the renderer knows how to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AuKind {
    /// AU1+2 combined: both brows move up.
    BrowRaise,
    /// AU1: inner brow halves move up.
    InnerBrowRaise,
    /// AU2: outer brow halves move up.
    OuterBrowRaise,
    /// AU4: vertical furrows between the brows.
    BrowKnit,
    /// AU12: mouth corners curve upward.
    MouthCurve,
    /// AU25: dark gap under the mouth line.
    LipPart,
    /// AU26: chin line drops.
    JawDrop,
}

impl AuKind {
    pub const ALL: [AuKind; 7] = [
        AuKind::BrowRaise,
        AuKind::InnerBrowRaise,
        AuKind::OuterBrowRaise,
        AuKind::BrowKnit,
        AuKind::MouthCurve,
        AuKind::LipPart,
        AuKind::JawDrop,
    ];

    pub const DEFAULT: [AuKind; 4] = [AuKind::BrowRaise, AuKind::BrowKnit, AuKind::MouthCurve, AuKind::JawDrop];

    pub fn name(self) -> &'static str {
        match self {
            AuKind::BrowRaise => "brow_raise",
            AuKind::InnerBrowRaise => "inner_brow_raise",
            AuKind::OuterBrowRaise => "outer_brow_raise",
            AuKind::BrowKnit => "brow_knit",
            AuKind::MouthCurve => "mouth_curve",
            AuKind::LipPart => "lip_part",
            AuKind::JawDrop => "jaw_drop",
        }
    }

    /// FACS label used in report headers.
    pub fn facs(self) -> &'static str {
        match self {
            AuKind::BrowRaise => "AU1+2",
            AuKind::InnerBrowRaise => "AU1",
            AuKind::OuterBrowRaise => "AU2",
            AuKind::BrowKnit => "AU4",
            AuKind::MouthCurve => "AU12",
            AuKind::LipPart => "AU25",
            AuKind::JawDrop => "AU26",
        }
    }

    /// Clip box `(|dx| range, y range)` in feature coordinates, half-open.
    fn region(self, geo: &Geometry) -> Region {
        let brow_band = (geo.eye_y - 8.0, geo.eye_y - 1.9);
        match self {
            AuKind::BrowRaise => Region { dx: (1.5, 11.0), y: brow_band },
            AuKind::InnerBrowRaise => Region { dx: (1.5, geo.eye_sep), y: brow_band },
            AuKind::OuterBrowRaise => Region { dx: (geo.eye_sep, 11.0), y: brow_band },
            AuKind::BrowKnit => Region { dx: (0.0, 1.5), y: (geo.eye_y - 7.0, geo.eye_y - 0.5) },
            AuKind::MouthCurve => Region { dx: (0.0, geo.mouth_hw + 1.5), y: (geo.mouth_y - 4.5, geo.mouth_y + 1.0) },
            AuKind::LipPart => Region { dx: (0.0, geo.mouth_hw + 1.5), y: (geo.mouth_y + 1.0, geo.mouth_y + 2.4) },
            AuKind::JawDrop => Region { dx: (0.0, 5.0), y: (geo.mouth_y + 2.4, geo.mouth_y + 7.0) },
        }
    }
}

impl fmt::Display for AuKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuKind {
    type Err = EetError;

    fn from_str(s: &str) -> Result<Self> {
        AuKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EetError::Config(format!("unknown action unit `{s}`")))
    }
}

#[derive(Clone, Copy, Debug)]
struct Region {
    dx: (f64, f64),
    y: (f64, f64),
}

impl Region {
    fn contains(&self, adx: f64, y: f64) -> bool {
        adx >= self.dx.0 && adx < self.dx.1 && y >= self.y.0 && y < self.y.1
    }

    fn overlaps(&self, other: &Region) -> bool {
        self.dx.0 < other.dx.1 && other.dx.0 < self.dx.1 && self.y.0 < other.y.1 && other.y.0 < self.y.1
    }
}

/// Renderer configuration shared by a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphConfig {
    pub aus: Vec<AuKind>,
    pub max_level: usize,
    pub identities: usize,
    pub poses: usize,
    pub resolution: usize,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self { aus: AuKind::DEFAULT.to_vec(), max_level: 5, identities: 10, poses: 3, resolution: 32 }
    }
}

impl GlyphConfig {
    pub fn num_aus(&self) -> usize {
        self.aus.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.aus.is_empty() {
            return Err(EetError::Config("at least one action unit is required".into()));
        }
        if self.resolution != 32 && self.resolution != 64 {
            return Err(EetError::Config(format!("resolution must be 32 or 64, got {}", self.resolution)));
        }
        if self.max_level == 0 || self.identities == 0 || self.poses == 0 {
            return Err(EetError::Config("max_level, identities and poses must be positive".into()));
        }
        // Regions depend on identity geometry only through eye/mouth placement; check
        // disjointness on the extreme geometries.
        for geo in [Geometry::for_identity(1), Geometry::extreme(false), Geometry::extreme(true)] {
            for (i, a) in self.aus.iter().enumerate() {
                for b in &self.aus[i + 1..] {
                    if a == b || a.region(&geo).overlaps(&b.region(&geo)) {
                        return Err(EetError::Config(format!("action units {a} and {b} draw in overlapping regions")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Horizontal feature offset for pose `p` in `1..=poses`; symmetric about frontal.
    pub fn pose_offset(&self, pose: usize) -> f64 {
        if self.poses == 1 {
            return 0.0;
        }
        let steps = (2 * (pose as i64 - 1) - (self.poses as i64 - 1)) as f64;
        POSE_SHIFT * steps / (self.poses - 1) as f64
    }

    /// Pose seen in a horizontally mirrored image.
    pub fn mirror_pose(&self, pose: usize) -> usize {
        self.poses + 1 - pose
    }
}

const POSE_SHIFT: f64 = 2.5;

/// One face to draw.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    pub identity: usize,
    pub pose: usize,
    pub au: Vec<f64>,
}

/// Identity-dependent base geometry in 32-unit coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub face_rx: f64,
    pub face_ry: f64,
    pub shade: f64,
    pub hair: f64,
    pub eye_sep: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub nose_len: f64,
    pub mouth_y: f64,
    pub mouth_hw: f64,
}

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut f = 1.0 / base as f64;
    while index > 0 {
        result += f * (index % base) as f64;
        index /= base;
        f /= base as f64;
    }
    result
}

fn lerp(range: (f64, f64), t: f64) -> f64 {
    range.0 + (range.1 - range.0) * t
}

const FACE_RX: (f64, f64) = (10.0, 13.5);
const FACE_RY: (f64, f64) = (12.0, 14.5);
const SHADE: (f64, f64) = (0.5, 0.92);
const HAIR: (f64, f64) = (0.0, 4.0);
const EYE_SEP: (f64, f64) = (3.8, 6.0);
const EYE_Y: (f64, f64) = (-3.5, -1.5);
const EYE_R: (f64, f64) = (0.9, 1.6);
const NOSE_LEN: (f64, f64) = (1.5, 4.5);
const MOUTH_Y: (f64, f64) = (5.0, 6.5);
const MOUTH_HW: (f64, f64) = (3.0, 5.0);

impl Geometry {
    /// Deterministic geometry for identity `d`: a Halton point in the parameter box,
    /// so identities are spread out rather than clustered.
    pub fn for_identity(identity: usize) -> Self {
        let i = identity as u64 + 7;
        let h = |base| radical_inverse(i, base);
        Self {
            face_rx: lerp(FACE_RX, h(2)),
            face_ry: lerp(FACE_RY, h(3)),
            shade: lerp(SHADE, h(5)),
            hair: lerp(HAIR, h(7)),
            eye_sep: lerp(EYE_SEP, h(11)),
            eye_y: lerp(EYE_Y, h(13)),
            eye_r: lerp(EYE_R, h(17)),
            nose_len: lerp(NOSE_LEN, h(19)),
            mouth_y: lerp(MOUTH_Y, h(23)),
            mouth_hw: lerp(MOUTH_HW, h(29)),
        }
    }

    fn extreme(high: bool) -> Self {
        let t = if high { 1.0 } else { 0.0 };
        Self {
            face_rx: lerp(FACE_RX, t),
            face_ry: lerp(FACE_RY, t),
            shade: lerp(SHADE, t),
            hair: lerp(HAIR, t),
            eye_sep: lerp(EYE_SEP, t),
            eye_y: lerp(EYE_Y, t),
            eye_r: lerp(EYE_R, t),
            nose_len: lerp(NOSE_LEN, t),
            mouth_y: lerp(MOUTH_Y, t),
            mouth_hw: lerp(MOUTH_HW, t),
        }
    }
}

const BACKGROUND: f64 = 0.08;
const BROW_RISE_PER_LEVEL: f64 = 0.6;
const MOUTH_CURVE_PER_LEVEL: f64 = 0.6;
const JAW_DROP_PER_LEVEL: f64 = 0.45;

/// Antialiased coverage of a stroke of half-width `half` at distance `d`, for pixels
/// of size `px` (in frame units).
fn stroke(d: f64, half: f64, px: f64) -> f64 {
    ((half - d) / px + 0.5).clamp(0.0, 1.0)
}

/// Distance from `(x, y)` to the horizontal segment `[x0, x1] x {y0}`.
fn dist_hseg(x: f64, y: f64, x0: f64, x1: f64, y0: f64) -> f64 {
    let cx = x.clamp(x0, x1);
    ((x - cx).powi(2) + (y - y0).powi(2)).sqrt()
}

/// Distance from `(x, y)` to the vertical segment `{x0} x [y0, y1]`.
fn dist_vseg(x: f64, y: f64, x0: f64, y0: f64, y1: f64) -> f64 {
    let cy = y.clamp(y0, y1);
    ((x - x0).powi(2) + (y - cy).powi(2)).sqrt()
}

impl GlyphSpec {
    pub fn validate(&self, cfg: &GlyphConfig) -> Result<()> {
        if self.au.len() != cfg.num_aus() {
            return Err(EetError::Data(format!("expected {} AU intensities, got {}", cfg.num_aus(), self.au.len())));
        }
        let l = cfg.max_level as f64;
        if let Some(u) = self.au.iter().find(|u| !(0.0..=l).contains(*u)) {
            return Err(EetError::Data(format!("AU intensity {u} outside [0, {l}]")));
        }
        if !(1..=cfg.identities).contains(&self.identity) {
            return Err(EetError::Data(format!("identity {} outside [1, {}]", self.identity, cfg.identities)));
        }
        if !(1..=cfg.poses).contains(&self.pose) {
            return Err(EetError::Data(format!("pose {} outside [1, {}]", self.pose, cfg.poses)));
        }
        Ok(())
    }
}

/// Render `spec` into a `1 x 1 x R x R` tensor with values in `[0, 1]`.
pub fn render(spec: &GlyphSpec, cfg: &GlyphConfig) -> Result<Tensor> {
    cfg.validate()?;
    spec.validate(cfg)?;
    let res = cfg.resolution;
    let px = 32.0 / res as f64;
    let geo = Geometry::for_identity(spec.identity);
    let offset = cfg.pose_offset(spec.pose);
    let regions: Vec<Region> = cfg.aus.iter().map(|k| k.region(&geo)).collect();
    let half_res = res as f64 / 2.0;

    let mut data = Vec::with_capacity(res * res);
    for row in 0..res {
        let y = (row as f64 + 0.5 - half_res) * px;
        for col in 0..res {
            let x = (col as f64 + 0.5 - half_res) * px;
            let dx = x - offset;
            let adx = dx.abs();

            // Face ellipse with a soft edge roughly one pixel wide.
            let r = ((x / geo.face_rx).powi(2) + (y / geo.face_ry).powi(2)).sqrt();
            let edge = (r - 1.0) * geo.face_rx.min(geo.face_ry);
            let face = stroke(edge, 0.0, px);
            let mut v = BACKGROUND + (geo.shade - BACKGROUND) * face;

            // Hair band across the top of the face.
            let hair_line = -geo.face_ry + geo.hair;
            v *= 1.0 - 0.55 * face * stroke(y - hair_line, 0.0, px);

            // Eyes.
            let eye_a = ((dx - geo.eye_sep).powi(2) + (y - geo.eye_y).powi(2)).sqrt();
            let eye_b = ((dx + geo.eye_sep).powi(2) + (y - geo.eye_y).powi(2)).sqrt();
            let eye = stroke(eye_a, geo.eye_r, px).max(stroke(eye_b, geo.eye_r, px));
            v *= 1.0 - 0.9 * eye;

            // Nose.
            let nose = stroke(dist_vseg(adx, y, 0.0, 0.0, geo.nose_len), 0.45, px);
            v *= 1.0 - 0.5 * nose;

            for ((kind, region), &u) in cfg.aus.iter().zip(&regions).zip(&spec.au) {
                if !region.contains(adx, y) {
                    continue;
                }
                let cov = au_coverage(*kind, &geo, adx, y, u, px);
                v *= 1.0 - cov;
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Tensor::new(&[1, 1, res, res], data)?)
}

/// Darkening (0..1) contributed by one action unit at `(|dx|, y)`.
fn au_coverage(kind: AuKind, geo: &Geometry, adx: f64, y: f64, u: f64, px: f64) -> f64 {
    let brow_y = geo.eye_y - 3.2;
    let brow = |rise: f64| {
        let x0 = geo.eye_sep - 2.3;
        let x1 = geo.eye_sep + 2.3;
        0.85 * stroke(dist_hseg(adx, y, x0, x1, brow_y - rise), 0.6, px)
    };
    match kind {
        AuKind::BrowRaise | AuKind::InnerBrowRaise | AuKind::OuterBrowRaise => brow(BROW_RISE_PER_LEVEL * u),
        AuKind::BrowKnit => {
            let top = geo.eye_y - 5.6;
            let d = dist_vseg(adx, y, 0.75, top, top + 3.8);
            0.15 * u * stroke(d, 0.55, px)
        }
        AuKind::MouthCurve => {
            let t = (adx / geo.mouth_hw).min(1.0);
            let lift = MOUTH_CURVE_PER_LEVEL * u * t * t;
            let line_y = geo.mouth_y - lift;
            let slope = 2.0 * MOUTH_CURVE_PER_LEVEL * u * t / geo.mouth_hw;
            let d = if adx <= geo.mouth_hw {
                (y - line_y).abs() / (1.0 + slope * slope).sqrt()
            } else {
                ((adx - geo.mouth_hw).powi(2) + (y - line_y).powi(2)).sqrt()
            };
            0.85 * stroke(d, 0.55, px)
        }
        AuKind::LipPart => {
            let gap = 0.22 * u;
            let d = dist_hseg(adx, y, 0.0, geo.mouth_hw - 0.8, geo.mouth_y + 1.0 + gap / 2.0);
            0.8 * stroke(d, gap / 2.0, px)
        }
        AuKind::JawDrop => {
            let d = dist_hseg(adx, y, 0.0, 2.5, geo.mouth_y + 3.2 + JAW_DROP_PER_LEVEL * u);
            0.7 * stroke(d, 0.5, px)
        }
    }
}

/// Pixel bounding box `(row0, row1, col0, col1)` (inclusive) of AU `index`'s clip region.
pub fn region_bounds(spec: &GlyphSpec, cfg: &GlyphConfig, index: usize) -> (usize, usize, usize, usize) {
    let geo = Geometry::for_identity(spec.identity);
    let region = cfg.aus[index].region(&geo);
    let offset = cfg.pose_offset(spec.pose);
    let res = cfg.resolution;
    let px = 32.0 / res as f64;
    let half_res = res as f64 / 2.0;
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for row in 0..res {
        let y = (row as f64 + 0.5 - half_res) * px;
        for col in 0..res {
            let x = (col as f64 + 0.5 - half_res) * px;
            if region.contains((x - offset).abs(), y) {
                r0 = r0.min(row);
                r1 = r1.max(row);
                c0 = c0.min(col);
                c1 = c1.max(col);
            }
        }
    }
    (r0, r1, c0, c1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(identity: usize, pose: usize, au: &[f64]) -> GlyphSpec {
        GlyphSpec { identity, pose, au: au.to_vec() }
    }

    #[test]
    fn neutral_render_is_deterministic() {
        let cfg = GlyphConfig::default();
        let s = spec(3, 2, &[0.0; 4]);
        let a = render(&s, &cfg).unwrap();
        let b = render(&s, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mouth_change_stays_in_mouth_box() {
        let cfg = GlyphConfig::default();
        let a = render(&spec(4, 1, &[1.0, 2.0, 0.0, 3.0]), &cfg).unwrap();
        let b = render(&spec(4, 1, &[1.0, 2.0, 5.0, 3.0]), &cfg).unwrap();
        let (r0, r1, c0, c1) = region_bounds(&spec(4, 1, &[0.0; 4]), &cfg, 2);
        let mut changed = 0;
        for row in 0..32 {
            for col in 0..32 {
                let k = row * 32 + col;
                if a.data()[k] != b.data()[k] {
                    changed += 1;
                    assert!((r0..=r1).contains(&row) && (c0..=c1).contains(&col), "({row},{col})");
                }
            }
        }
        assert!(changed > 5);
    }

    #[test]
    fn mirrored_left_pose_equals_right_pose() {
        for res in [32, 64] {
            let cfg = GlyphConfig { resolution: res, ..GlyphConfig::default() };
            let left = render(&spec(6, 1, &[2.5, 1.0, 4.0, 0.5]), &cfg).unwrap();
            let right = render(&spec(6, 3, &[2.5, 1.0, 4.0, 0.5]), &cfg).unwrap();
            assert!(left.flip_last_axis().max_abs_diff(&right) <= 1e-12);
            let front = render(&spec(6, 2, &[2.5, 1.0, 4.0, 0.5]), &cfg).unwrap();
            assert!(front.flip_last_axis().max_abs_diff(&front) <= 1e-12);
        }
    }

    #[test]
    fn out_of_range_specs_are_rejected() {
        let cfg = GlyphConfig::default();
        assert!(render(&spec(1, 1, &[0.0, 0.0, 0.0, 5.5]), &cfg).is_err());
        assert!(render(&spec(1, 4, &[0.0; 4]), &cfg).is_err());
        assert!(render(&spec(11, 1, &[0.0; 4]), &cfg).is_err());
        assert!(render(&spec(1, 1, &[0.0; 3]), &cfg).is_err());
    }

    #[test]
    fn overlapping_action_units_are_rejected() {
        let cfg = GlyphConfig { aus: vec![AuKind::BrowRaise, AuKind::InnerBrowRaise], ..GlyphConfig::default() };
        assert!(cfg.validate().is_err());
        let all_disjoint = GlyphConfig {
            aus: vec![
                AuKind::InnerBrowRaise,
                AuKind::OuterBrowRaise,
                AuKind::BrowKnit,
                AuKind::MouthCurve,
                AuKind::LipPart,
                AuKind::JawDrop,
            ],
            ..GlyphConfig::default()
        };
        all_disjoint.validate().unwrap();
    }

    #[test]
    fn pose_offsets_are_symmetric() {
        for poses in 1..6 {
            let cfg = GlyphConfig { poses, ..GlyphConfig::default() };
            for p in 1..=poses {
                assert_eq!(cfg.pose_offset(p), -cfg.pose_offset(cfg.mirror_pose(p)));
            }
        }
    }
}
