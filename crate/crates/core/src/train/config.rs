use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{PspError, Result};
use crate::model::{Ablation, Hyper, ModelConfig};
use crate::optim::LrSchedule;
use crate::skeleton::MotionKind;

pub const SEED_ENV: &str = "PSP_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size_labeled: usize,
    pub batch_size_unlabeled: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub seed: u64,
    pub label_fraction: f64,
    /// Held-out share used when no split file is given.
    pub test_fraction: f64,
    pub stratified: bool,
    pub target_t: usize,
    pub motion: MotionKind,
    pub ablation: Ablation,
    pub hyper: Hyper,
    pub model: ModelConfig,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale default: 50 frames, 16 channels.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size_labeled: 16,
            batch_size_unlabeled: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 5,
            total_epochs: 30,
            lr_drop_epochs: vec![20, 25],
            seed: 0,
            label_fraction: 0.1,
            test_fraction: 0.2,
            stratified: true,
            target_t: 50,
            motion: MotionKind::Forward,
            ablation: Ablation::default(),
            hyper: Hyper::default(),
            model: ModelConfig::default(),
            checkpoint_every: 0,
        }
    }

    /// Small model and short sequences for tests and quick experiments.
    /// Few labels per class, so labeled batches stay small and the unlabeled
    /// ones large; the softer temperature keeps the contrastive gradient from
    /// swamping the recognition loss at this width.
    pub fn tiny() -> Self {
        TrainConfig {
            batch_size_labeled: 4,
            batch_size_unlabeled: 32,
            lr: 0.05,
            warmup_epochs: 2,
            total_epochs: 40,
            lr_drop_epochs: vec![30],
            target_t: 12,
            model: ModelConfig::tiny(),
            hyper: Hyper {
                tau: 0.5,
                ..Hyper::default()
            },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(PspError::Config(format!("unknown preset {other:?}; expected \"desk\" or \"tiny\""))),
        }
    }

    /// Parses a config document. An optional top-level `"preset"` picks the
    /// base values; every other key overrides it. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| PspError::Config(e.to_string()))?;
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| PspError::Config("config must be a JSON object".into()))?;
        let base = match obj.remove("preset") {
            None => Self::desk(),
            Some(Value::String(name)) => Self::preset(&name)?,
            Some(_) => return Err(PspError::Config("preset must be a string".into())),
        };
        let mut merged = serde_json::to_value(&base).expect("config serializes");
        merge(&mut merged, doc);
        let cfg: TrainConfig = serde_json::from_value(merged).map_err(|e| PspError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PspError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            PspError::Config(m) => PspError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Replaces the seed with `PSP_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| PspError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            drop_epochs: self.lr_drop_epochs.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PspError::Config(m));
        if self.batch_size_labeled == 0 || self.batch_size_unlabeled == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.total_epochs == 0 {
            return bad("total_epochs must be positive".into());
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_drop_epochs must be strictly increasing".into());
        }
        if self.lr_drop_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return bad("lr_drop_epochs must be < total_epochs".into());
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label_fraction must lie in (0, 1], got {}", self.label_fraction));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        if self.target_t < 2 {
            return bad(format!("target_t must be >= 2, got {}", self.target_t));
        }
        self.ablation.validate()?;
        self.hyper.validate()?;
        self.model.validate()
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
