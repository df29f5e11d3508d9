//! Signal carriers, preprocessing and the on-disk dataset container.

pub mod bands;
pub mod blob;
pub mod container;
pub mod filter;
pub mod preprocess;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{load_container, save_container, CONTAINER_SCHEMA_VERSION};
pub use bands::Band;
pub use filter::{FilterBand, Sos};
pub use preprocess::{
    apply_sos,
    bandpass_filter, hemodynamic_lag_align, reassemble_epochs, segment_epochs, zscore_normalize,
    ChannelStats,
};

pub type Position = [f64; 3];

/// Uniformly sampled multichannel signal, `data` is `[n_channels x n_samples]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelTimeSeries {
    pub channel_ids: Vec<String>,
    pub sample_rate_hz: f64,
    pub start_time_s: f64,
    pub data: Array2<f64>,
}

impl MultichannelTimeSeries {
    pub fn new(
        channel_ids: Vec<String>,
        sample_rate_hz: f64,
        start_time_s: f64,
        data: Array2<f64>,
    ) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::invalid(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if !start_time_s.is_finite() {
            return Err(Error::invalid("start time must be finite"));
        }
        let (nc, ns) = data.dim();
        if nc == 0 || ns == 0 {
            return Err(Error::invalid(format!(
                "series must have at least one channel and sample, got {nc}x{ns}"
            )));
        }
        if channel_ids.len() != nc {
            return Err(Error::invalid(format!(
                "{} channel ids for {nc} data rows",
                channel_ids.len()
            )));
        }
        Ok(Self {
            channel_ids,
            sample_rate_hz,
            start_time_s,
            data,
        })
    }

    /// Same metadata, new data of the same channel count.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        Self::new(
            self.channel_ids.clone(),
            self.sample_rate_hz,
            self.start_time_s,
            data,
        )
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    pub fn time_of(&self, k: usize) -> f64 {
        self.start_time_s + k as f64 / self.sample_rate_hz
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples()).map(|k| self.time_of(k)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.row(c).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorGeometry {
    pub positions: Vec<Position>,
    pub frame_label: String,
}

impl SensorGeometry {
    pub fn new(positions: Vec<Position>, frame_label: impl Into<String>) -> Result<Self> {
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sensor coordinates must be finite"));
        }
        Ok(Self {
            positions,
            frame_label: frame_label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn check_matches(&self, series: &MultichannelTimeSeries) -> Result<()> {
        if self.len() != series.n_channels() {
            return Err(Error::invalid(format!(
                "geometry has {} positions for {} channels",
                self.len(),
                series.n_channels()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionParcellation {
    pub region_ids: Vec<String>,
    pub centroids: Vec<Position>,
    pub names: Vec<String>,
    pub frame_label: String,
}

impl RegionParcellation {
    pub fn new(
        region_ids: Vec<String>,
        centroids: Vec<Position>,
        names: Vec<String>,
        frame_label: impl Into<String>,
    ) -> Result<Self> {
        if centroids.len() != region_ids.len() || names.len() != region_ids.len() {
            return Err(Error::invalid(format!(
                "parcellation has {} ids, {} centroids, {} names",
                region_ids.len(),
                centroids.len(),
                names.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &region_ids {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("duplicate region id {id}")));
            }
        }
        Ok(Self {
            region_ids,
            centroids,
            names,
            frame_label: frame_label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.region_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region_ids.is_empty()
    }

    pub fn as_geometry(&self) -> SensorGeometry {
        SensorGeometry {
            positions: self.centroids.clone(),
            frame_label: self.frame_label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Real,
    /// Generated by the model, conditioned on the real sample with trial
    /// number `parent_trial` from the same subject and condition.
    Synthetic { parent_trial: u32 },
}

impl Provenance {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, Provenance::Synthetic { .. })
    }
}

/// Identity of a sample inside a dataset, used for canonical ordering.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleKey {
    pub subject_id: String,
    pub condition_label: String,
    pub trial: u32,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub source_epoch: MultichannelTimeSeries,
    pub target_epoch: MultichannelTimeSeries,
    pub condition_label: String,
    pub subject_id: String,
    pub group_id: String,
    pub trial: u32,
    pub provenance: Provenance,
}

impl PairedSample {
    pub fn key(&self) -> SampleKey {
        SampleKey {
            subject_id: self.subject_id.clone(),
            condition_label: self.condition_label.clone(),
            trial: self.trial,
            provenance: self.provenance.clone(),
        }
    }
}

/// Channel layout and sampling of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySchema {
    pub modality: String,
    pub channel_ids: Vec<String>,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub units: String,
    pub geometry: SensorGeometry,
}

impl ModalitySchema {
    pub fn n_channels(&self) -> usize {
        self.channel_ids.len()
    }

    pub fn check(&self, series: &MultichannelTimeSeries, role: &str) -> Result<()> {
        if series.channel_ids != self.channel_ids {
            return Err(Error::Schema(format!(
                "{role} channels do not match the {} schema",
                self.modality
            )));
        }
        if series.n_samples() != self.n_samples {
            return Err(Error::Schema(format!(
                "{role} has {} samples, {} schema expects {}",
                series.n_samples(),
                self.modality,
                self.n_samples
            )));
        }
        if series.sample_rate_hz != self.sample_rate_hz {
            return Err(Error::Schema(format!(
                "{role} sampled at {} Hz, {} schema expects {} Hz",
                series.sample_rate_hz, self.modality, self.sample_rate_hz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    pub source: ModalitySchema,
    pub target: ModalitySchema,
    pub seed: u64,
    /// Delay applied between source and target epochs, seconds.
    pub lag_s: f64,
    pub parcellation: Option<RegionParcellation>,
    /// Free-form processing history, one entry per stage.
    pub history: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
    pub manifest: DatasetManifest,
}

impl PairedDataset {
    pub fn new(manifest: DatasetManifest, samples: Vec<PairedSample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            manifest
                .source
                .check(&s.source_epoch, &format!("sample {i} source"))?;
            manifest
                .target
                .check(&s.target_epoch, &format!("sample {i} target"))?;
        }
        Ok(Self { samples, manifest })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples sorted by subject, condition, trial and provenance.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.sort_by_key(|&i| self.samples[i].key());
        idx
    }

    pub fn subjects(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<String> =
            self.samples.iter().map(|s| s.subject_id.clone()).collect();
        set.into_iter().collect()
    }

    pub fn conditions(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<String> = self
            .samples
            .iter()
            .map(|s| s.condition_label.clone())
            .collect();
        set.into_iter().collect()
    }

    /// Keep the samples for which `keep` returns true.
    pub fn filtered(&self, mut keep: impl FnMut(&PairedSample) -> bool) -> PairedDataset {
        PairedDataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            manifest: self.manifest.clone(),
        }
    }
}
