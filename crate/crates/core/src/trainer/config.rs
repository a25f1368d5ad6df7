use std::path::PathBuf;

use eet_tensor::Adam;
use sha2::{Digest, Sha256};

use crate::error::{EetError, Result};
use crate::kv::KeyValues;
use crate::losses::{AdversarialForm, LossWeights, Variant};

/// Adam settings for one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageOptim {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl StageOptim {
    pub fn adam(&self, lr: f64) -> Adam {
        Adam::new(lr, self.beta1, self.beta2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    /// Images per step; each step draws `batch / 2` pairs.
    pub batch: usize,
    pub seed: u64,
    pub feat: usize,
    pub spectral: bool,
    pub variant: Variant,
    pub adversarial: AdversarialForm,
    pub weights: LossWeights,
    pub stage1: StageOptim,
    pub stage2: StageOptim,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub checkpoint_every: usize,
    pub mirror: bool,
    pub data: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            epochs: 60,
            batch: 4,
            seed: 0,
            feat: 16,
            spectral: true,
            variant: Variant::Eet,
            adversarial: AdversarialForm::LeastSquares,
            weights: LossWeights::default(),
            stage1: StageOptim { lr: 1e-3, beta1: 0.95, beta2: 0.999 },
            stage2: StageOptim { lr: 3e-4, beta1: 0.5, beta2: 0.9 },
            clip_norm: Some(10.0),
            checkpoint_every: 10,
            mirror: true,
            data: None,
            init_from: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 27] = [
    "stage",
    "epochs",
    "batch",
    "seed",
    "feat",
    "spectral",
    "variant",
    "adversarial",
    "lambda_c",
    "lambda_p",
    "lambda_adu",
    "lambda_add",
    "lambda_sc",
    "lambda_adg",
    "lambda_r",
    "stage1_lr",
    "stage1_beta1",
    "stage1_beta2",
    "stage2_lr",
    "stage2_beta1",
    "stage2_beta2",
    "clip_norm",
    "checkpoint_every",
    "mirror",
    "data",
    "init_from",
    "power_iterations",
];

/// Keys that do not influence the optimization trajectory.
const UNHASHED: [&str; 3] = ["checkpoint_every", "data", "init_from"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(EetError::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.epochs < 2 {
            return Err(EetError::Config(format!("epochs must be at least 2, got {}", self.epochs)));
        }
        if self.batch < 2 || self.batch % 2 != 0 {
            return Err(EetError::Config(format!("batch must be even and at least 2, got {}", self.batch)));
        }
        if self.checkpoint_every == 0 {
            return Err(EetError::Config("checkpoint_every must be positive".into()));
        }
        if self.stage == 2 && self.init_from.is_none() {
            return Err(EetError::Config("stage 2 needs a stage-1 checkpoint (init_from)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(EetError::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        for o in [self.stage1, self.stage2] {
            if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
                return Err(EetError::Config(format!("invalid Adam settings {o:?}")));
            }
        }
        self.weights.validate()
    }

    pub fn optim(&self) -> StageOptim {
        if self.stage == 1 {
            self.stage1
        } else {
            self.stage2
        }
    }

    /// Apply `key = value` settings on top of `self`; unknown keys are rejected.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(&CONFIG_KEYS)?;
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parse_value($key)? {
                    $field = v;
                }
            };
        }
        set!("stage", self.stage);
        set!("epochs", self.epochs);
        set!("batch", self.batch);
        set!("seed", self.seed);
        set!("feat", self.feat);
        set!("spectral", self.spectral);
        set!("variant", self.variant);
        set!("adversarial", self.adversarial);
        set!("lambda_c", self.weights.c);
        set!("lambda_p", self.weights.p);
        set!("lambda_adu", self.weights.adu);
        set!("lambda_add", self.weights.add);
        set!("lambda_sc", self.weights.sc);
        set!("lambda_adg", self.weights.adg);
        set!("lambda_r", self.weights.r);
        set!("stage1_lr", self.stage1.lr);
        set!("stage1_beta1", self.stage1.beta1);
        set!("stage1_beta2", self.stage1.beta2);
        set!("stage2_lr", self.stage2.lr);
        set!("stage2_beta1", self.stage2.beta1);
        set!("stage2_beta2", self.stage2.beta2);
        set!("checkpoint_every", self.checkpoint_every);
        set!("mirror", self.mirror);
        if let Some(c) = kv.parse_value::<f64>("clip_norm")? {
            self.clip_norm = (c > 0.0).then_some(c);
        }
        if let Some(p) = kv.get("data") {
            self.data = Some(PathBuf::from(p));
        }
        if let Some(p) = kv.get("init_from") {
            self.init_from = Some(PathBuf::from(p));
        }
        if let Some(it) = kv.parse_value::<usize>("power_iterations")? {
            if it != 1 {
                return Err(EetError::Config("only one power iteration per step is supported".into()));
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("stage", self.stage);
        kv.set("epochs", self.epochs);
        kv.set("batch", self.batch);
        kv.set("seed", self.seed);
        kv.set("feat", self.feat);
        kv.set("spectral", self.spectral);
        kv.set("variant", self.variant);
        kv.set("adversarial", self.adversarial);
        kv.set("lambda_c", self.weights.c);
        kv.set("lambda_p", self.weights.p);
        kv.set("lambda_adu", self.weights.adu);
        kv.set("lambda_add", self.weights.add);
        kv.set("lambda_sc", self.weights.sc);
        kv.set("lambda_adg", self.weights.adg);
        kv.set("lambda_r", self.weights.r);
        kv.set("stage1_lr", self.stage1.lr);
        kv.set("stage1_beta1", self.stage1.beta1);
        kv.set("stage1_beta2", self.stage1.beta2);
        kv.set("stage2_lr", self.stage2.lr);
        kv.set("stage2_beta1", self.stage2.beta1);
        kv.set("stage2_beta2", self.stage2.beta2);
        kv.set("clip_norm", self.clip_norm.unwrap_or(0.0));
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("mirror", self.mirror);
        kv.set("power_iterations", 1);
        if let Some(p) = &self.data {
            kv.set("data", p.display());
        }
        if let Some(p) = &self.init_from {
            kv.set("init_from", p.display());
        }
        kv
    }

    /// SHA-256 over every setting that affects the optimization trajectory.
    pub fn hash(&self) -> String {
        let kv = self.to_kv();
        let mut h = Sha256::new();
        for key in kv.keys().filter(|k| !UNHASHED.contains(k)) {
            h.update(format!("{key}={}\n", kv.get(key).unwrap_or_default()).as_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

/// Learning rate for `epoch` (0-based) of `total`: constant for the first
/// `ceil(total / 2)` epochs, then `lr0 * (total - epoch) / (total - ceil(total / 2))`.
pub fn lr_at(epoch: usize, total: usize, lr0: f64) -> Result<f64> {
    if total < 2 || epoch >= total {
        return Err(EetError::Config(format!("epoch {epoch} outside schedule of {total} epochs")));
    }
    let half = total.div_ceil(2);
    if epoch < half {
        Ok(lr0)
    } else {
        Ok(lr0 * (total - epoch) as f64 / (total - half) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(0, 140, 1e-4).unwrap(), 1e-4);
        assert_eq!(lr_at(69, 140, 1e-4).unwrap(), 1e-4);
        assert!((lr_at(105, 140, 1e-4).unwrap() - 5e-5).abs() < 1e-18);
        assert!(lr_at(140, 140, 1e-4).is_err());
        assert!(lr_at(0, 1, 1e-4).is_err());
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let mut cfg = TrainConfig { stage: 2, init_from: Some("a.ckpt".into()), clip_norm: None, ..Default::default() };
        cfg.weights.sc = 0.5;
        cfg.variant = Variant::BcNet;
        let back = TrainConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = TrainConfig { checkpoint_every: 3, ..cfg.clone() };
        assert_eq!(other.hash(), cfg.hash());
        let other = TrainConfig { seed: 1, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = |s: &str| TrainConfig::from_kv(&KeyValues::parse(s).unwrap()).is_err();
        assert!(bad("epochs = 1"));
        assert!(bad("batch = 3"));
        assert!(bad("stage = 2"));
        assert!(bad("unknown = 1"));
        assert!(bad("lambda_r = -1"));
        assert!(bad("variant = x-net"));
    }
}
