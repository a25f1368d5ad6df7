use std::fs;
use std::path::{Path, PathBuf};

use eet_tensor::Tensor;
use image::{DynamicImage, GrayImage, RgbImage};

use super::{AuKind, Dataset, GlyphConfig, LabeledImage};
use crate::error::{EetError, Result};
use crate::kv::KeyValues;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `1 x C x H x W` (or `C x H x W`) tensor with `C` in {1, 3} as 8-bit PNG,
/// PGM or PPM depending on the extension.
pub fn write_image(path: &Path, pixels: &Tensor) -> Result<()> {
    let shape = pixels.shape();
    let (c, h, w) = match *shape {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => return Err(EetError::Data(format!("cannot write tensor of shape {shape:?} as an image"))),
    };
    let d = pixels.data();
    let plane = h * w;
    let img = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| quantize(v)).collect())
                .expect("buffer matches dimensions"),
        ),
        3 => {
            let mut buf = Vec::with_capacity(3 * plane);
            for k in 0..plane {
                buf.extend((0..3).map(|ch| quantize(d[ch * plane + k])));
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions"))
        }
        _ => return Err(EetError::Data(format!("unsupported channel count {c}"))),
    };
    img.save(path).map_err(|e| EetError::Data(format!("{}: {e}", path.display())))
}

/// Read an 8-bit grayscale or RGB image into a `1 x C x H x W` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| EetError::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Ok(Tensor::new(&[1, 1, h, w], data)?)
        }
        DynamicImage::ImageRgb8(buf) => {
            let raw = buf.into_raw();
            let plane = h * w;
            let mut data = vec![0.0; 3 * plane];
            for (k, px) in raw.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    data[ch * plane + k] = px[ch] as f64 / 255.0;
                }
            }
            Ok(Tensor::new(&[1, 3, h, w], data)?)
        }
        other => Err(EetError::Data(format!(
            "{}: unsupported pixel format {:?}; expected 8-bit grayscale or RGB",
            path.display(),
            other.color()
        ))),
    }
}

/// Paste equally sized single-image tensors side by side into one row.
pub fn contact_sheet(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| EetError::Data("empty contact sheet".into()))?;
    let (c, h, w) = match *first.shape() {
        [1, c, h, w] => (c, h, w),
        ref s => return Err(EetError::Data(format!("contact sheet needs 1xCxHxW tensors, got {s:?}"))),
    };
    let total_w = w * images.len();
    let mut out = vec![0.0; c * h * total_w];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(EetError::Data("contact sheet images differ in shape".into()));
        }
        let d = img.data();
        for ch in 0..c {
            for y in 0..h {
                let src = &d[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = (ch * h + y) * total_w + k * w;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::new(&[1, c, h, total_w], out)?)
}

/// One manifest line: `relative_path<TAB>d<TAB>p<TAB>u_1,...,u_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub identity: usize,
    pub pose: usize,
    pub au: Vec<f64>,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        let au: Vec<String> = self.au.iter().map(|u| u.to_string()).collect();
        format!("{}\t{}\t{}\t{}", self.path, self.identity, self.pose, au.join(","))
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || EetError::Data(format!("malformed manifest line `{line}`"));
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, d, p, u] = fields.as_slice() else {
            return Err(bad());
        };
        let au = u.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            path: path.to_string(),
            identity: d.parse().map_err(|_| bad())?,
            pose: p.parse().map_err(|_| bad())?,
            au,
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| EetError::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(ManifestEntry::parse).collect()
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const META_FILE: &str = "dataset.conf";

/// Dataset-level metadata stored next to the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub config: GlyphConfig,
    pub seed: u64,
    pub images_per_id: usize,
    pub test_fraction: f64,
}

impl DatasetMeta {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let names: Vec<&str> = self.config.aus.iter().map(|k| k.name()).collect();
        kv.set("aus", names.join(","));
        kv.set("max_level", self.config.max_level);
        kv.set("identities", self.config.identities);
        kv.set("poses", self.config.poses);
        kv.set("resolution", self.config.resolution);
        kv.set("seed", self.seed);
        kv.set("images_per_id", self.images_per_id);
        kv.set("test_fraction", self.test_fraction);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&["aus", "max_level", "identities", "poses", "resolution", "seed", "images_per_id", "test_fraction"])?;
        let aus = kv
            .require::<String>("aus")?
            .split(',')
            .map(|s| s.trim().parse::<AuKind>())
            .collect::<Result<Vec<_>>>()?;
        let config = GlyphConfig {
            aus,
            max_level: kv.require("max_level")?,
            identities: kv.require("identities")?,
            poses: kv.require("poses")?,
            resolution: kv.require("resolution")?,
        };
        config.validate()?;
        Ok(Self {
            config,
            seed: kv.require("seed")?,
            images_per_id: kv.require("images_per_id")?,
            test_fraction: kv.require("test_fraction")?,
        })
    }
}

/// Write every image as PNG under `train/` or `test/`, plus the manifest and metadata.
pub fn save_dataset(dir: &Path, dataset: &Dataset, meta: &DatasetMeta) -> Result<()> {
    let mut lines = String::new();
    for (split, images) in [("train", &dataset.train), ("test", &dataset.test)] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| EetError::io(&sub, e))?;
        for (k, img) in images.iter().enumerate() {
            let rel = format!("{split}/id{:03}_{:05}.png", img.identity, k);
            write_image(&dir.join(&rel), &img.pixels)?;
            let entry = ManifestEntry { path: rel, identity: img.identity, pose: img.pose, au: img.au.clone() };
            lines.push_str(&entry.to_line());
            lines.push('\n');
        }
    }
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, lines).map_err(|e| EetError::io(&manifest, e))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta.to_kv().render()).map_err(|e| EetError::io(&meta_path, e))
}

/// Load a dataset directory written by [`save_dataset`]. The split of each image is
/// given by the first component of its manifest path.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| EetError::io(&meta_path, e))?;
    let meta = DatasetMeta::from_kv(&KeyValues::parse(&meta_text)?)?;
    let cfg = &meta.config;
    let mut dataset = Dataset { config: cfg.clone(), train: Vec::new(), test: Vec::new() };
    for entry in read_manifest(&dir.join(MANIFEST_FILE))? {
        let path: PathBuf = dir.join(&entry.path);
        let pixels = read_image(&path)?;
        let expected = [1, pixels.shape()[1], cfg.resolution, cfg.resolution];
        if pixels.shape() != expected {
            return Err(EetError::Data(format!(
                "{}: shape {:?} does not match resolution {}",
                path.display(),
                pixels.shape(),
                cfg.resolution
            )));
        }
        let img = LabeledImage { pixels, au: entry.au, identity: entry.identity, pose: entry.pose };
        img.spec().validate(cfg)?;
        match entry.path.split('/').next() {
            Some("train") => dataset.train.push(img),
            Some("test") => dataset.test.push(img),
            _ => return Err(EetError::Data(format!("manifest path `{}` is not under train/ or test/", entry.path))),
        }
    }
    if dataset.train.is_empty() {
        return Err(EetError::Data(format!("{}: no training images", dir.display())));
    }
    Ok((dataset, meta))
}
