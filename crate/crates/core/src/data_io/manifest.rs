//! CSV manifests pointing at per-sample tensor files.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor_file::{read_tensor_file, write_tensor_file};
use crate::error::{Error, Result};
use crate::synth::{DatasetSource, PairedDataset, PairedSample};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub path_m1: PathBuf,
    pub path_m2: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub n_classes: usize,
    /// Relative paths resolve against this directory.
    pub root: PathBuf,
}

impl Manifest {
    /// Parses and validates a manifest. When `n_classes` is `None` it is
    /// inferred as one past the largest label.
    pub fn read(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let header = reader.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["sample_id", "path_m1", "path_m2", "label"] {
            return Err(Error::Data(format!(
                "{}: header must be `sample_id,path_m1,path_m2,label`",
                path.display()
            )));
        }
        let rows: Vec<ManifestRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
        let n_classes = match n_classes {
            Some(c) => c,
            None => rows.iter().map(|r| r.label + 1).max().unwrap_or(0),
        };
        let manifest = Self {
            rows,
            n_classes,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(&row.sample_id) {
                return Err(Error::Data(format!("duplicate sample_id `{}`", row.sample_id)));
            }
            if row.label >= self.n_classes {
                return Err(Error::Data(format!(
                    "sample `{}` has label {} outside [0, {})",
                    row.sample_id, row.label, self.n_classes
                )));
            }
            for p in [&row.path_m1, &row.path_m2] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Data(format!(
                        "sample `{}` references missing file {}",
                        row.sample_id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads every referenced tensor; observation shapes must agree per modality.
    pub fn load(&self, manifest_path: &Path) -> Result<PairedDataset> {
        let mut samples = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let x_m1 = read_tensor_file(self.resolve(&row.path_m1))?;
            let x_m2 = read_tensor_file(self.resolve(&row.path_m2))?;
            if let Some(first) = samples.first() {
                let first: &PairedSample = first;
                if first.x_m1.shape() != x_m1.shape() || first.x_m2.shape() != x_m2.shape() {
                    return Err(Error::Data(format!(
                        "sample `{}` has shapes {:?}/{:?}, expected {:?}/{:?}",
                        row.sample_id,
                        x_m1.shape(),
                        x_m2.shape(),
                        first.x_m1.shape(),
                        first.x_m2.shape()
                    )));
                }
            }
            samples.push(PairedSample {
                x_m1,
                x_m2,
                y: row.label,
                latents: None,
            });
        }
        Ok(PairedDataset {
            samples,
            n_classes: self.n_classes,
            source: DatasetSource::Manifest(manifest_path.to_path_buf()),
        })
    }
}

pub fn load_manifest_dataset(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<PairedDataset> {
    let path = path.as_ref();
    Manifest::read(path, n_classes)?.load(path)
}

/// Writes `m1/<id>.dkt`, `m2/<id>.dkt` and `manifest.csv` under `dir`;
/// returns the manifest path.
pub fn export_dataset(dataset: &PairedDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["m1", "m2"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_path(&manifest_path)?;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let id = format!("s{i:06}");
        let row = ManifestRow {
            path_m1: PathBuf::from("m1").join(format!("{id}.dkt")),
            path_m2: PathBuf::from("m2").join(format!("{id}.dkt")),
            label: sample.y,
            sample_id: id,
        };
        write_tensor_file(dir.join(&row.path_m1), &sample.x_m1)?;
        write_tensor_file(dir.join(&row.path_m2), &sample.x_m2)?;
        writer.serialize(&row)?;
    }
    writer.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn synthetic_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&SynthConfig {
            n_samples: 30,
            ..SynthConfig::default()
        })
        .unwrap();
        let path = export_dataset(&data, dir.path()).unwrap();
        let back = load_manifest_dataset(&path, Some(4)).unwrap();
        assert_eq!(back.len(), 30);
        for (a, b) in data.samples.iter().zip(&back.samples) {
            assert_eq!(a.x_m1, b.x_m1);
            assert_eq!(a.x_m2, b.x_m2);
            assert_eq!(a.y, b.y);
        }
    }

    #[test]
    fn validation_catches_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&SynthConfig {
            n_samples: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        let path = export_dataset(&data, dir.path()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        let dup = text.replace("s000001,", "s000000,");
        std::fs::write(&path, dup).unwrap();
        assert!(matches!(Manifest::read(&path, Some(4)), Err(Error::Data(_))));

        let missing = text.replace("m1/s000003.dkt", "m1/nope.dkt");
        std::fs::write(&path, missing).unwrap();
        assert!(matches!(Manifest::read(&path, Some(4)), Err(Error::Data(_))));

        std::fs::write(&path, &text).unwrap();
        let max_label = data.labels().into_iter().max().unwrap();
        assert!(matches!(Manifest::read(&path, Some(max_label)), Err(Error::Data(_))));
        assert_eq!(Manifest::read(&path, None).unwrap().n_classes, max_label + 1);

        std::fs::write(&path, "id,a,b,y\n").unwrap();
        assert!(matches!(Manifest::read(&path, None), Err(Error::Data(_))));
    }
}
