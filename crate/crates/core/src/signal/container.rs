use std::path::Path;

use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};

use super::blob::{read_blob, write_blob, DType};
use super::{DatasetManifest, MultichannelTimeSeries, PairedDataset, PairedSample, Provenance};
use crate::error::{Error, Result};

pub const CONTAINER_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    condition_label: String,
    subject_id: String,
    group_id: String,
    trial: u32,
    provenance: Provenance,
    source_start_time_s: f64,
    target_start_time_s: f64,
    source_blob: String,
    target_blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerFile {
    schema_version: u32,
    dataset: DatasetManifest,
    n_samples: usize,
    samples: Vec<SampleEntry>,
}

#[derive(Deserialize)]
struct VersionPeek {
    schema_version: u32,
}

/// Read `manifest.json`'s `schema_version` and refuse anything newer than
/// `supported` before touching the rest of the directory.
pub fn check_version(manifest_bytes: &[u8], supported: u32) -> Result<()> {
    let peek: VersionPeek = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::Schema(format!("manifest has no readable schema_version: {e}")))?;
    if peek.schema_version != supported {
        return Err(Error::Version {
            found: peek.schema_version,
            supported,
        });
    }
    Ok(())
}

pub fn save_container(dataset: &PairedDataset, path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let source_blob = format!("s{i:05}_source.bin");
        let target_blob = format!("s{i:05}_target.bin");
        write_blob(
            &path.join(&source_blob),
            &s.source_epoch.data.clone().into_dyn(),
            DType::F64,
        )?;
        write_blob(
            &path.join(&target_blob),
            &s.target_epoch.data.clone().into_dyn(),
            DType::F64,
        )?;
        entries.push(SampleEntry {
            condition_label: s.condition_label.clone(),
            subject_id: s.subject_id.clone(),
            group_id: s.group_id.clone(),
            trial: s.trial,
            provenance: s.provenance.clone(),
            source_start_time_s: s.source_epoch.start_time_s,
            target_start_time_s: s.target_epoch.start_time_s,
            source_blob,
            target_blob,
        });
    }
    let file = ContainerFile {
        schema_version: CONTAINER_SCHEMA_VERSION,
        dataset: dataset.manifest.clone(),
        n_samples: entries.len(),
        samples: entries,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    let mpath = path.join(MANIFEST_FILE);
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

pub(crate) fn load_matrix(dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let (arr, _) = read_blob(&dir.join(name))?;
    if arr.shape() != [rows, cols] {
        return Err(Error::Schema(format!(
            "blob {name} has shape {:?}, manifest expects [{rows}, {cols}]",
            arr.shape()
        )));
    }
    arr.into_dimensionality::<Ix2>()
        .map_err(|e| Error::Schema(format!("blob {name}: {e}")))
}

pub fn load_container(path: &Path) -> Result<PairedDataset> {
    let mpath = path.join(MANIFEST_FILE);
    let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    check_version(&bytes, CONTAINER_SCHEMA_VERSION)?;
    let file: ContainerFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Schema(format!("{}: {e}", mpath.display())))?;
    if file.n_samples != file.samples.len() {
        return Err(Error::Schema(format!(
            "manifest declares {} samples but indexes {}",
            file.n_samples,
            file.samples.len()
        )));
    }
    let m = &file.dataset;
    let mut samples = Vec::with_capacity(file.samples.len());
    for e in &file.samples {
        let src = load_matrix(path, &e.source_blob, m.source.n_channels(), m.source.n_samples)?;
        let tgt = load_matrix(path, &e.target_blob, m.target.n_channels(), m.target.n_samples)?;
        samples.push(PairedSample {
            source_epoch: MultichannelTimeSeries::new(
                m.source.channel_ids.clone(),
                m.source.sample_rate_hz,
                e.source_start_time_s,
                src,
            )?,
            target_epoch: MultichannelTimeSeries::new(
                m.target.channel_ids.clone(),
                m.target.sample_rate_hz,
                e.target_start_time_s,
                tgt,
            )?,
            condition_label: e.condition_label.clone(),
            subject_id: e.subject_id.clone(),
            group_id: e.group_id.clone(),
            trial: e.trial,
            provenance: e.provenance.clone(),
        });
    }
    PairedDataset::new(file.dataset, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{ModalitySchema, SensorGeometry};

    fn schema(name: &str, nc: usize, rate: f64, ns: usize) -> ModalitySchema {
        ModalitySchema {
            modality: name.into(),
            channel_ids: (0..nc).map(|i| format!("{name}{i}")).collect(),
            sample_rate_hz: rate,
            n_samples: ns,
            units: "au".into(),
            geometry: SensorGeometry::new(
                (0..nc).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect(),
                "test",
            )
            .unwrap(),
        }
    }

    fn dataset() -> PairedDataset {
        let src = schema("eeg", 3, 10.0, 20);
        let tgt = schema("bold", 2, 1.0, 2);
        let manifest = DatasetManifest {
            schema_version: CONTAINER_SCHEMA_VERSION,
            name: "t".into(),
            source: src.clone(),
            target: tgt.clone(),
            seed: 7,
            lag_s: 6.0,
            parcellation: None,
            history: vec!["made".into()],
        };
        let samples = (0..3)
            .map(|i| PairedSample {
                source_epoch: MultichannelTimeSeries::new(
                    src.channel_ids.clone(),
                    10.0,
                    i as f64 * 2.0,
                    Array2::from_shape_fn((3, 20), |(c, k)| {
                        (c as f64 + 0.1).powf(k as f64 * 0.3) / 7.0 + i as f64
                    }),
                )
                .unwrap(),
                target_epoch: MultichannelTimeSeries::new(
                    tgt.channel_ids.clone(),
                    1.0,
                    i as f64 * 2.0 + 6.0,
                    Array2::from_shape_fn((2, 2), |(c, k)| 1.0 / (1.0 + c as f64 + k as f64 * 3.0)),
                )
                .unwrap(),
                condition_label: format!("c{}", i % 2),
                subject_id: "sub-01".into(),
                group_id: "g0".into(),
                trial: i,
                provenance: if i == 2 {
                    Provenance::Synthetic { parent_trial: 0 }
                } else {
                    Provenance::Real
                },
            })
            .collect();
        PairedDataset::new(manifest, samples).unwrap()
    }

    #[test]
    fn roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let d = dataset();
        save_container(&d, dir.path()).unwrap();
        let back = load_container(dir.path()).unwrap();
        assert_eq!(back, d);
        let bits = |p: &PairedDataset| -> Vec<u64> {
            p.samples
                .iter()
                .flat_map(|s| s.source_epoch.data.iter().chain(s.target_epoch.data.iter()))
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&back), bits(&d));
        // saving again produces identical bytes
        let dir2 = tempfile::tempdir().unwrap();
        save_container(&back, dir2.path()).unwrap();
        for name in ["manifest.json", "s00001_source.bin", "s00002_target.bin"] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn truncated_blob_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        save_container(&dataset(), dir.path()).unwrap();
        let p = dir.path().join("s00001_source.bin");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_container(dir.path()).unwrap_err();
        match &err {
            Error::Integrity {
                path,
                expected,
                actual,
            } => {
                assert_eq!(path, "s00001_source.bin");
                assert_eq!(*expected, bytes.len() as u64);
                assert_eq!(*actual, bytes.len() as u64 - 8);
            }
            e => panic!("unexpected {e:?}"),
        }
        let msg = err.to_string();
        assert!(msg.contains(&bytes.len().to_string()), "{msg}");
    }

    #[test]
    fn future_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        save_container(&dataset(), dir.path()).unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&mp).unwrap()).unwrap();
        v["schema_version"] = serde_json::json!(CONTAINER_SCHEMA_VERSION + 1);
        std::fs::write(&mp, serde_json::to_vec(&v).unwrap()).unwrap();
        // remove a blob too: the version check must fire before any blob is read
        std::fs::remove_file(dir.path().join("s00000_source.bin")).unwrap();
        match load_container(dir.path()).unwrap_err() {
            Error::Version { found, supported } => {
                assert_eq!(found, CONTAINER_SCHEMA_VERSION + 1);
                assert_eq!(supported, CONTAINER_SCHEMA_VERSION);
            }
            e => panic!("unexpected {e:?}"),
        }
    }
}
