use std::path::Path;

use serde::{Deserialize, Serialize};

use super::diffuser::Diffuser;
use super::model::{expected_shapes, ModelConfig, ParamStore, Tensor, TokenShapes};
use super::pipeline::TrainedModel;
use super::schedule::NoiseSchedule;
use super::train::{LossCurve, TrainConfig};
use crate::error::{Error, Result};
use crate::hyperalign::AlignmentConfig;
use crate::signal::blob::{write_blob, DType};
use crate::signal::container::{check_version, load_matrix, MANIFEST_FILE};
use crate::signal::{ChannelStats, ModalitySchema, CONTAINER_SCHEMA_VERSION};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    trainable: bool,
    blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    schema_version: u32,
    container_schema_version: u32,
    model: ModelConfig,
    shapes: TokenShapes,
    schedule: NoiseSchedule,
    alignment: AlignmentConfig,
    source_schema: ModalitySchema,
    target_schema: ModalitySchema,
    target_offset_s: f64,
    source_stats: ChannelStats,
    target_stats: ChannelStats,
    train_config: TrainConfig,
    training_seed: u64,
    loss_curve: LossCurve,
    train_subjects: Vec<String>,
    val_subjects: Vec<String>,
    parameter_count: usize,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &TrainedModel, dir: &Path) -> Result<()> {
    let d = &model.diffuser;
    if let Err(name) = d.params.is_finite() {
        return Err(Error::NumericalFailure {
            tensor: name,
            detail: "refusing to save non-finite parameters".into(),
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(d.params.tensors.len());
    for (i, t) in d.params.tensors.iter().enumerate() {
        let blob = format!("t{i:03}.bin");
        write_blob(&dir.join(&blob), &t.value.clone().into_dyn(), DType::F64)?;
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: [t.value.nrows(), t.value.ncols()],
            trainable: t.trainable,
            blob,
        });
    }
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_VERSION,
        container_schema_version: CONTAINER_SCHEMA_VERSION,
        model: d.config.clone(),
        shapes: d.shapes,
        schedule: d.schedule.clone(),
        alignment: model.alignment.clone(),
        source_schema: model.source_schema.clone(),
        target_schema: model.target_schema.clone(),
        target_offset_s: model.target_offset_s,
        source_stats: model.source_stats.clone(),
        target_stats: model.target_stats.clone(),
        train_config: model.train_config.clone(),
        training_seed: model.train_config.seed,
        loss_curve: model.loss_curve.clone(),
        train_subjects: model.train_subjects.clone(),
        val_subjects: model.val_subjects.clone(),
        parameter_count: d.params.parameter_count(),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let p = dir.join(MANIFEST_FILE);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("loss_curve.csv");
    std::fs::write(&p, model.loss_curve.to_csv()).map_err(|e| Error::io(&p, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainedModel> {
    let mpath = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    check_version(&bytes, CHECKPOINT_VERSION)?;
    let m: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("{}: {e}", mpath.display())))?;

    // every declared shape is checked against the architecture before any blob is read
    let expected = expected_shapes(&m.model, &m.shapes)?;
    if expected.len() != m.tensors.len() {
        return Err(Error::Schema(format!(
            "checkpoint lists {} tensors, architecture has {}",
            m.tensors.len(),
            expected.len()
        )));
    }
    for t in &m.tensors {
        match expected.get(&t.name) {
            Some(&(r, c)) if [r, c] == t.shape => {}
            Some(&(r, c)) => {
                return Err(Error::Schema(format!(
                    "tensor `{}` declared {:?}, architecture needs [{r}, {c}]",
                    t.name, t.shape
                )))
            }
            None => return Err(Error::Schema(format!("unexpected tensor `{}`", t.name))),
        }
    }
    let schedule = NoiseSchedule::from_config(&m.model.schedule)?;
    if schedule != m.schedule {
        return Err(Error::Schema("stored schedule does not match its configuration".into()));
    }
    let mut tensors = Vec::with_capacity(m.tensors.len());
    for t in &m.tensors {
        let value = load_matrix(dir, &t.blob, t.shape[0], t.shape[1])?;
        tensors.push(Tensor {
            name: t.name.clone(),
            value,
            trainable: t.trainable,
        });
    }
    let params = ParamStore::new(tensors)?;
    if params.parameter_count() != m.parameter_count {
        return Err(Error::Schema("parameter count does not match manifest".into()));
    }
    if let Err(name) = params.is_finite() {
        return Err(Error::NumericalFailure {
            tensor: name,
            detail: "checkpoint holds non-finite values".into(),
        });
    }
    Ok(TrainedModel {
        diffuser: Diffuser::from_parts(m.model, m.shapes, params)?,
        alignment: m.alignment,
        source_schema: m.source_schema,
        target_schema: m.target_schema,
        target_offset_s: m.target_offset_s,
        source_stats: m.source_stats,
        target_stats: m.target_stats,
        train_config: m.train_config,
        loss_curve: m.loss_curve,
        train_subjects: m.train_subjects,
        val_subjects: m.val_subjects,
    })
}
