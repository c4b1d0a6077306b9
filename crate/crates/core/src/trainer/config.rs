use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data_io::{AugmentSpec, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::{KdConfig, LossConfig, OrthMode, PerTerm};
use crate::model::{BackboneKind, GrlSpec, ModelConfig, Representation};
use crate::optim::AdamConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Synth,
    Manifest,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub synth: SynthConfig,
    /// Manifest CSV, resolved against the working directory.
    pub manifest: Option<PathBuf>,
    /// Class count for manifest data; inferred from the labels when absent.
    pub n_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub orth_mode: OrthMode,
    pub enable: PerTerm<bool>,
    pub weights: PerTerm<f64>,
    pub grl_lambda: f64,
    pub representation: Representation,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            orth_mode: OrthMode::Raw,
            enable: PerTerm::default(),
            weights: PerTerm::default(),
            grl_lambda: 1.0,
            representation: Representation::Both,
        }
    }
}

impl LossSection {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            orth_mode: self.orth_mode,
            enable: self.enable,
            weights: self.weights,
        }
    }

    pub fn grl(&self) -> GrlSpec {
        GrlSpec {
            lambda: self.grl_lambda,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning-rate multiplier for the adversarial modality head only.
    pub adversary_lr_scale: f64,
    /// Decoupled weight decay for the adversarial modality head only.
    pub adversary_weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            kind: OptimizerKind::Adam,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            epochs: 300,
            batch_size: 128,
            adversary_lr_scale: 1.0,
            adversary_weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityName {
    M1,
    M2,
}

impl ModalityName {
    pub const BOTH: [ModalityName; 2] = [ModalityName::M1, ModalityName::M2];

    pub fn index(self) -> usize {
        match self {
            ModalityName::M1 => 0,
            ModalityName::M2 => 1,
        }
    }

    pub fn from_index(m: usize) -> Self {
        if m == 0 {
            ModalityName::M1
        } else {
            ModalityName::M2
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityName::M1 => "m1",
            ModalityName::M2 => "m2",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Both modalities, features added before the head.
    #[default]
    Fusion,
    M1,
    M2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Fusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub kd: KdConfig,
    pub students: Vec<ModalityName>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            kd: KdConfig::default(),
            students: ModalityName::BOTH.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Also train plain cross-entropy single-modal students and report the
    /// difference to them.
    pub baseline_student: bool,
}

/// A complete, declarative description of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossSection,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub optimizer: OptimizerConfig,
    pub split: SplitSpec,
    pub augment: AugmentSpec,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossSection::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            optimizer: OptimizerConfig::default(),
            split: SplitSpec::default(),
            augment: AugmentSpec::default(),
            eval: EvalConfig::default(),
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// The small synthetic setup: mlp backbones, 30 epochs, batch 64, squared
    /// orthogonality and a damped, faster adversarial head.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.m1.kind = BackboneKind::Mlp;
        cfg.model.m2.kind = BackboneKind::Mlp;
        cfg.loss.orth_mode = OrthMode::Squared;
        cfg.optimizer.epochs = 30;
        cfg.optimizer.batch_size = 64;
        cfg.optimizer.adversary_lr_scale = 10.0;
        cfg.optimizer.adversary_weight_decay = 10.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        o.adam().validate()?;
        if !(o.adversary_lr_scale > 0.0 && o.adversary_lr_scale.is_finite()) {
            return Err(Error::Config(format!(
                "optimizer.adversary_lr_scale must be positive, got {}",
                o.adversary_lr_scale
            )));
        }
        if !(o.adversary_weight_decay >= 0.0 && o.adversary_weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "optimizer.adversary_weight_decay must be non-negative, got {}",
                o.adversary_weight_decay
            )));
        }
        if o.epochs == 0 {
            return Err(Error::Config("optimizer.epochs must be at least 1".into()));
        }
        if o.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one run seed is required".into()));
        }
        if self.model.embed_width == 0 {
            return Err(Error::Config("model.embed_width must be positive".into()));
        }
        self.loss.loss_config().validate()?;
        self.loss.grl().validate()?;
        self.distill.kd.validate()?;
        self.split.validate()?;
        if !(0.0..=1.0).contains(&self.augment.probability) {
            return Err(Error::Config(format!(
                "augment.probability must lie in [0, 1], got {}",
                self.augment.probability
            )));
        }
        match self.data.kind {
            DataKind::Synth => self.data.synth.validate()?,
            DataKind::Manifest if self.data.manifest.is_none() => {
                return Err(Error::Config("data.kind is manifest but data.manifest is unset".into()));
            }
            DataKind::Manifest => {}
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves built-in defaults, then the optional file, then `key=value`
    /// overrides (dotted keys, JSON values; bare words are strings).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !layer.is_object() {
                return Err(Error::Config(format!("{}: top level must be an object", path.display())));
            }
            merge(&mut value, layer);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

/// Applies one `a.b.c=value` override.
pub fn apply_override(value: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let parsed = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut slot = value;
    for part in key.split('.') {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-object")))?;
        slot = obj.entry(part.to_string()).or_insert(Value::Object(Default::default()));
    }
    *slot = parsed;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss.orth_mode = OrthMode::Squared;
        cfg.loss.enable.aux = false;
        cfg.seeds = vec![3, 9];
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"optimiser": {}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"optimizer": {"learning_rate": 1}}"#).is_err());
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        apply_override(&mut v, "loss.enable.bogus=true").unwrap();
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn override_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"optimizer": {"lr": 0.01, "epochs": 7}}"#).unwrap();
        let cfg = ExperimentConfig::resolve(Some(&path), &["optimizer.lr=0.5".into()]).unwrap();
        assert_eq!(cfg.optimizer.lr, 0.5);
        assert_eq!(cfg.optimizer.epochs, 7);
        assert_eq!(cfg.optimizer.batch_size, 128);
        let cfg = ExperimentConfig::resolve(None, &["loss.orth_mode=squared".into(), "seeds=[4]".into()]).unwrap();
        assert_eq!(cfg.loss.orth_mode, OrthMode::Squared);
        assert_eq!(cfg.seeds, vec![4]);
    }

    #[test]
    fn invalid_values_fail_validation() {
        for o in ["optimizer.lr=0", "optimizer.epochs=0", "seeds=[]", "distill.kd.temperature=-1"] {
            assert!(ExperimentConfig::resolve(None, &[o.into()]).is_err(), "{o}");
        }
        assert!(ExperimentConfig::resolve(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn desk_preset_is_valid_and_round_trips() {
        let desk = ExperimentConfig::desk();
        desk.validate().unwrap();
        assert_eq!((desk.optimizer.epochs, desk.optimizer.batch_size), (30, 64));
        assert_eq!(ExperimentConfig::from_json(&desk.to_json().unwrap()).unwrap(), desk);
    }

    #[test]
    fn adversary_settings_are_checked() {
        let mut cfg = ExperimentConfig::desk();
        cfg.optimizer.adversary_lr_scale = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk();
        cfg.optimizer.adversary_weight_decay = -0.1;
        assert!(cfg.validate().is_err());
    }
}
