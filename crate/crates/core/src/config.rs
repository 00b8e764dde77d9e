//! Experiment configuration and its text-file resolution.
//!
//! Resolution order: built-in defaults, then the config file, then
//! `key=value` overrides. Keys are the field names of [`TrainConfig`];
//! nested tables use dotted paths (`backbone.feature_dim`, `weights.ct`).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bank::Selection;
use crate::error::{Error, Result};
use crate::losses::{ContrastConfig, LossWeights};
use crate::model::BackboneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    CrossTeacher,
    MeanTeacher,
    Mutual,
    DualTeacher,
    SelfTraining,
    SupervisedOnly,
    Ensemble,
}

impl Topology {
    pub const ALL: [Topology; 7] = [
        Topology::CrossTeacher,
        Topology::MeanTeacher,
        Topology::Mutual,
        Topology::DualTeacher,
        Topology::SelfTraining,
        Topology::SupervisedOnly,
        Topology::Ensemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topology::CrossTeacher => "cross_teacher",
            Topology::MeanTeacher => "mean_teacher",
            Topology::Mutual => "mutual",
            Topology::DualTeacher => "dual_teacher",
            Topology::SelfTraining => "self_training",
            Topology::SupervisedOnly => "supervised_only",
            Topology::Ensemble => "ensemble",
        }
    }

    pub fn parse(s: &str) -> Option<Topology> {
        Topology::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Whether the contrastive branch (memory banks, HC/LC) runs.
    pub fn uses_contrast(self) -> bool {
        self == Topology::CrossTeacher
    }

    pub fn uses_ema(self) -> bool {
        self != Topology::Mutual
    }
}

/// Which network produces evaluation predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalNet {
    StudentA,
    TeacherA,
    Ensemble,
}

impl EvalNet {
    pub fn parse(s: &str) -> Option<EvalNet> {
        match s {
            "student_a" | "studentA" => Some(EvalNet::StudentA),
            "teacher_a" | "teacherA" => Some(EvalNet::TeacherA),
            "ensemble" => Some(EvalNet::Ensemble),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub topology: Topology,
    pub pairs: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// (height, width) of training crops.
    pub crop: (usize, usize),
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_power: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub bank_capacity: usize,
    /// Must equal `backbone.feature_dim`.
    pub bank_dim: usize,
    pub selection: Selection,
    /// Contrastive queries on labeled pixels take the ground-truth class
    /// instead of the network's argmax.
    pub contrast_gt_labels: bool,
    /// Dataset directory (training pool).
    pub data_dir: String,
    /// Held-out dataset directory; empty disables periodic evaluation.
    pub val_dir: String,
    pub labeled_fraction: f64,
    pub split_seed: u64,
    /// Evaluate every this many iterations (0: final evaluation only).
    pub eval_interval: usize,
    /// Checkpoint every this many iterations (0: initial and final only).
    pub checkpoint_interval: usize,
    pub eval_network: EvalNet,
    pub backbone: BackboneConfig,
    pub weights: LossWeights,
    pub contrast: ContrastConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        TrainConfig {
            topology: Topology::CrossTeacher,
            pairs: 2,
            seed: 0,
            max_iters: 1500,
            batch_labeled: 4,
            batch_unlabeled: 4,
            crop: (64, 64),
            base_lr: 0.02,
            momentum: 0.9,
            lr_power: 0.9,
            weight_decay: 0.0,
            ema_decay: 0.99,
            bank_capacity: 64,
            bank_dim: backbone.feature_dim,
            selection: Selection::Random,
            contrast_gt_labels: false,
            data_dir: "data/train".into(),
            val_dir: "data/val".into(),
            labeled_fraction: 0.05,
            split_seed: 0,
            eval_interval: 0,
            checkpoint_interval: 0,
            eval_network: EvalNet::StudentA,
            backbone,
            weights: LossWeights::default(),
            contrast: ContrastConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.weights.validate()?;
        self.contrast.validate()?;
        if self.pairs < 1 {
            return Err(Error::config("pairs", "must be >= 1"));
        }
        if self.topology == Topology::CrossTeacher && self.pairs < 2 {
            return Err(Error::config("pairs", "cross_teacher requires at least 2 pairs"));
        }
        if matches!(self.topology, Topology::Mutual | Topology::Ensemble) && self.pairs < 2 {
            return Err(Error::config("pairs", format!("{} requires at least 2 pairs", self.topology.name())));
        }
        if self.batch_labeled < 1 {
            return Err(Error::config("batch_labeled", "must be >= 1"));
        }
        if self.bank_capacity < 1 {
            return Err(Error::config("bank_capacity", "must be >= 1"));
        }
        if self.bank_dim != self.backbone.feature_dim {
            return Err(Error::config("bank_dim", "must equal backbone.feature_dim"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1]"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::config("labeled_fraction", "must lie in (0, 1]"));
        }
        let m = self.backbone.input_multiple();
        if self.crop.0 % m != 0 || self.crop.1 % m != 0 || self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::config("crop", format!("dimensions must be positive multiples of {m}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        resolve_str(Some(text), &[])
    }
}

fn key_paths(table: &Table, prefix: &str, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if let Value::Table(t) = v {
            key_paths(t, &path, out);
        } else {
            out.insert(path);
        }
    }
}

/// Every settable dotted key, sorted.
pub fn valid_keys() -> Vec<String> {
    let table = Table::try_from(TrainConfig::default()).expect("config serializes");
    let mut keys = BTreeSet::new();
    key_paths(&table, "", &mut keys);
    keys.into_iter().collect()
}

fn unknown_key(key: &str) -> Error {
    Error::config(key, format!("unknown key; valid keys: {}", valid_keys().join(", ")))
}

fn merge(base: &mut Table, over: Table, prefix: &str, valid: &BTreeSet<String>) -> Result<()> {
    for (k, v) in over {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(bt)), Value::Table(vt)) => merge(bt, vt, &path, valid)?,
            (Some(_), v) if valid.contains(&path) => {
                base.insert(k, v);
            }
            _ => return Err(unknown_key(&path)),
        }
    }
    Ok(())
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().ok_or_else(|| unknown_key(key))?;
    let mut cur = table;
    for p in parts {
        cur = match cur.get_mut(p) {
            Some(Value::Table(t)) => t,
            _ => return Err(unknown_key(key)),
        };
    }
    match cur.get(last) {
        Some(Value::Table(_)) | None => Err(unknown_key(key)),
        Some(_) => {
            cur.insert(last.to_string(), value);
            Ok(())
        }
    }
}

/// Defaults < config text < overrides.
pub fn resolve_str(config_text: Option<&str>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut table = Table::try_from(TrainConfig::default()).expect("config serializes");
    let valid: BTreeSet<String> = valid_keys().into_iter().collect();
    if let Some(text) = config_text {
        let file: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        merge(&mut table, file, "", &valid)?;
    }
    for (k, v) in overrides {
        set_path(&mut table, k, parse_value(v))?;
    }
    let cfg: TrainConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve(config_path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let text = match config_path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    resolve_str(text.as_deref(), overrides)
}

/// Standard polynomial decay `base * (1 - iter / max_iters) ^ power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iters: usize, power: f64) -> Result<f64> {
    if iter > max_iters {
        return Err(Error::Range(format!("iteration {iter} exceeds max_iters {max_iters}")));
    }
    if max_iters == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iters as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_beat_file_beat_defaults() {
        let file = "max_iters = 50\npairs = 3\n[weights]\nct = 0.5\n";
        let cfg = resolve_str(
            Some(file),
            &[("max_iters".into(), "10".into()), ("topology".into(), "supervised_only".into())],
        )
        .unwrap();
        assert_eq!(cfg.max_iters, 10);
        assert_eq!(cfg.pairs, 3);
        assert_eq!(cfg.weights.ct, 0.5);
        assert_eq!(cfg.weights.hc, 0.1);
        assert_eq!(cfg.topology, Topology::SupervisedOnly);
        let cfg = resolve_str(None, &[("contrast.phi".into(), "0.9".into())]).unwrap();
        assert_eq!(cfg.contrast.phi, 0.9);
    }

    #[test]
    fn unknown_keys_list_the_valid_ones() {
        let err = resolve_str(None, &[("max_iter".into(), "3".into())]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("max_iter"));
        assert!(msg.contains("max_iters"));
        assert!(resolve_str(Some("bogus = 1"), &[]).is_err());
        assert!(resolve_str(Some("[weights]\nfoo = 1"), &[]).is_err());
    }

    #[test]
    fn cross_teacher_needs_two_pairs() {
        assert!(resolve_str(None, &[("pairs".into(), "1".into())]).is_err());
        assert!(resolve_str(
            None,
            &[("pairs".into(), "1".into()), ("topology".into(), "mean_teacher".into())]
        )
        .is_ok());
    }

    #[test]
    fn poly_schedule_values() {
        assert_eq!(poly_lr(2.5e-4, 0, 100, 0.9).unwrap(), 2.5e-4);
        assert_eq!(poly_lr(2.5e-4, 100, 100, 0.9).unwrap(), 0.0);
        let mid = poly_lr(2.5e-4, 50, 100, 0.9).unwrap();
        assert!((mid - 2.5e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!((mid - 1.3397e-4).abs() < 1e-8);
        assert!(matches!(poly_lr(1.0, 101, 100, 0.9), Err(Error::Range(_))));
    }
}
