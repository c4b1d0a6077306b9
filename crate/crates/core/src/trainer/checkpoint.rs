//! Single-file checkpoints: `DKCK`, a u32 header length, a JSON header
//! (version, config, architecture, epoch, best validation F1, tensor names)
//! and then one length-prefixed double-precision tensor record per name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::data_io::tensor_file::{decode, encode};
use crate::data_io::Precision;
use crate::error::{Error, Result};
use crate::model::{DiscomArch, Model, ModelArch, ModelBundle};
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: &str = "dkck-1";
const MAGIC: &[u8; 4] = b"DKCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointArch {
    Model(ModelArch),
    Bundle(DiscomArch),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: String,
    pub config: ExperimentConfig,
    pub arch: CheckpointArch,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    config: ExperimentConfig,
    arch: CheckpointArch,
    epoch: usize,
    best_val: Option<f64>,
    tensors: Vec<String>,
}

impl Checkpoint {
    pub fn of_model(model: &Model, config: &ExperimentConfig, epoch: usize, best_val: Option<f64>) -> Self {
        Self {
            version: CHECKPOINT_VERSION.into(),
            config: config.clone(),
            arch: CheckpointArch::Model(model.arch.clone()),
            epoch,
            best_val,
            params: model.params.clone(),
        }
    }

    pub fn of_bundle(bundle: &ModelBundle, config: &ExperimentConfig, epoch: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION.into(),
            config: config.clone(),
            arch: CheckpointArch::Bundle(bundle.arch.clone()),
            epoch,
            best_val: None,
            params: bundle.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        match self.arch {
            CheckpointArch::Model(arch) => Ok(Model {
                arch,
                params: self.params,
            }),
            CheckpointArch::Bundle(_) => Err(Error::Checkpoint(
                "checkpoint holds a full joint network, not a deployable model".into(),
            )),
        }
    }

    pub fn into_bundle(self) -> Result<ModelBundle> {
        match self.arch {
            CheckpointArch::Bundle(arch) => Ok(ModelBundle {
                arch,
                params: self.params,
            }),
            CheckpointArch::Model(_) => Err(Error::Checkpoint("checkpoint holds a deployable model".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: self.version.clone(),
            config: self.config.clone(),
            arch: self.arch.clone(),
            epoch: self.epoch,
            best_val: self.best_val,
            tensors: self.params.names().cloned().collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32::try_from(json.len()).expect("header fits u32").to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            let blob = encode(t, Precision::F64)?;
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let len = u32::from_le_bytes(r.take(4, "header length")?.try_into().expect("4 bytes")) as usize;
        let raw: serde_json::Value = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        let found = raw.get("version").and_then(|v| v.as_str()).unwrap_or("<none>");
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: found.into(),
                expected: CHECKPOINT_VERSION.into(),
            });
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
        let mut params = ParamStore::new();
        for name in &header.tensors {
            let n = u64::from_le_bytes(r.take(8, name)?.try_into().expect("8 bytes")) as usize;
            let (t, _) = decode(r.take(n, name)?)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            params.insert(name.clone(), t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            version: header.version,
            config: header.config,
            arch: header.arch,
            epoch: header.epoch,
            best_val: header.best_val,
            params,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, PlainArch};
    use crate::tensor::Tensor;

    fn model() -> Model {
        let arch = PlainArch::single(0, &BackboneConfig::default(), &[5], 6, 3).unwrap();
        Model::init(ModelArch::Plain(arch), 17)
    }

    fn probe() -> Tensor {
        Tensor::new(vec![8, 5], (0..40).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap()
    }

    #[test]
    fn round_trip_restores_identical_logits_and_config() {
        let m = model();
        let mut cfg = ExperimentConfig::default();
        cfg.optimizer.lr = 0.0123;
        let ck = Checkpoint::of_model(&m, &cfg, 12, Some(0.5));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config, cfg);
        let restored = back.into_model().unwrap();
        assert_eq!(restored.logits_on(&probe()).unwrap(), m.logits_on(&probe()).unwrap());
    }

    #[test]
    fn truncation_is_an_error_at_every_length() {
        let bytes = Checkpoint::of_model(&model(), &ExperimentConfig::default(), 1, None)
            .to_bytes()
            .unwrap();
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch_names_both_tags() {
        let mut ck = Checkpoint::of_model(&model(), &ExperimentConfig::default(), 1, None);
        ck.version = "dkck-0".into();
        let err = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Version { .. }));
        assert!(msg.contains("dkck-0") && msg.contains(CHECKPOINT_VERSION));
    }
}
