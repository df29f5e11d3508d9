//! Ground-truth neurovascular simulator producing paired EEG-like and
//! hemodynamic datasets with known lag, band dependence and spatial layout.

pub mod hrf;
pub mod physics;
pub mod sources;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Ix2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};
use crate::signal::blob::{read_blob, write_blob, DType};
use crate::signal::{
    hemodynamic_lag_align, Band, DatasetManifest, ModalitySchema, MultichannelTimeSeries,
    PairedDataset, PairedSample, Position, Provenance, RegionParcellation, SensorGeometry,
    CONTAINER_SCHEMA_VERSION,
};

pub use hrf::{canonical_hrf, causal_convolve, HrfKernel};
pub use physics::{
    convolve_envelope, drive_envelope, gain_matrix, grid_columns, grid_parcellation, grid_sensors,
    neurovascular_convolve, project_to_sensors,
};
pub use sources::{pink_noise, synth_sources, SourceDraw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetModality {
    /// One hemodynamic channel per region.
    Bold,
    /// Oxy/deoxy twin channels per region.
    Fnirs,
}

/// Per-region gain multiplier applied to subjects of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupEffect {
    pub group: usize,
    pub region: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_regions: usize,
    pub n_eeg_channels: usize,
    pub sample_rate_eeg_hz: f64,
    pub sample_rate_hemo_hz: f64,
    /// Band to per-condition amplitude; a single value applies to every condition.
    pub band_amplitudes: BTreeMap<Band, Vec<f64>>,
    pub hrf_peak_s: f64,
    pub hrf_undershoot_s: f64,
    pub hrf_length_s: f64,
    pub hrf_dt_s: f64,
    /// Lower edge of the component whose envelope drives hemodynamics.
    pub drive_low_hz: f64,
    /// Pink source noise std.
    pub noise_std: f64,
    /// Sensor noise std, in units of the median forward gain.
    pub sensor_noise_std: f64,
    pub hemo_noise_std: f64,
    pub n_subjects: usize,
    pub trials_per_condition: usize,
    pub subject_variability: f64,
    pub conditions: Vec<String>,
    pub seed: u64,
    pub epoch_s: f64,
    pub warmup_s: f64,
    pub region_spacing_m: f64,
    pub gain_epsilon: f64,
    pub n_groups: usize,
    pub group_effects: Vec<GroupEffect>,
    /// Probability that an in-mask region is driven in a trial.
    pub active_prob: f64,
    /// Probability that an out-of-mask region is driven in a trial.
    pub inactive_prob: f64,
    /// Explicit per-condition active regions; derived from the grid when absent.
    pub active_regions: Option<Vec<Vec<usize>>>,
    pub modulation_rate_hz: f64,
    pub modulation_depth: f64,
    pub network_coupling: f64,
    pub trial_amplitude_jitter: f64,
    pub target_modality: TargetModality,
}

impl Default for SimConfig {
    fn default() -> Self {
        let mut band_amplitudes = BTreeMap::new();
        for b in [Band::Delta, Band::Theta, Band::Alpha, Band::Beta] {
            band_amplitudes.insert(b, vec![0.2]);
        }
        band_amplitudes.insert(Band::Gamma, vec![2.0]);
        SimConfig {
            n_regions: 16,
            n_eeg_channels: 16,
            sample_rate_eeg_hz: 200.0,
            sample_rate_hemo_hz: 1.0,
            band_amplitudes,
            hrf_peak_s: 6.0,
            hrf_undershoot_s: 16.0,
            hrf_length_s: 32.0,
            hrf_dt_s: 0.1,
            drive_low_hz: 13.0,
            noise_std: 0.3,
            sensor_noise_std: 0.05,
            hemo_noise_std: 0.05,
            n_subjects: 4,
            trials_per_condition: 8,
            subject_variability: 0.1,
            conditions: ["task-a", "task-b", "task-c", "task-d"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            seed: 0,
            epoch_s: 32.0,
            warmup_s: 32.0,
            region_spacing_m: 0.02,
            gain_epsilon: 1e-6,
            n_groups: 2,
            group_effects: Vec::new(),
            active_prob: 1.0,
            inactive_prob: 0.0,
            active_regions: None,
            modulation_rate_hz: 0.25,
            modulation_depth: 0.5,
            network_coupling: 0.7,
            trial_amplitude_jitter: 0.1,
            target_modality: TargetModality::Bold,
        }
    }
}

fn is_whole(x: f64) -> bool {
    (x - x.round()).abs() < 1e-9 && x.round() >= 1.0
}

/// Subject-specific physics: group membership, drive gains and the
/// jittered forward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub id: String,
    pub index: usize,
    pub group_index: usize,
    pub group_id: String,
    /// Multiplier on each region's oscillatory drive.
    pub region_gain: Vec<f64>,
    /// Multiplier on each region's contribution to the sensors.
    pub forward_gain: Vec<f64>,
    pub forward_centroids: Vec<Position>,
}

impl SimConfig {
    pub fn lag_s(&self) -> f64 {
        self.hrf_peak_s
    }

    pub fn n_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_regions == 0 || self.n_eeg_channels == 0 {
            return bad("need at least one region and one EEG channel".into());
        }
        if !(self.sample_rate_eeg_hz > 0.0 && self.sample_rate_hemo_hz > 0.0) {
            return bad("sample rates must be > 0".into());
        }
        if !(self.hrf_peak_s > 0.0) {
            return bad("hrf_peak_s must be > 0".into());
        }
        canonical_hrf(self.hrf_dt_s, self.hrf_peak_s, self.hrf_undershoot_s, self.hrf_length_s)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !is_whole(self.sample_rate_eeg_hz * self.hrf_dt_s)
            || !is_whole(1.0 / (self.hrf_dt_s * self.sample_rate_hemo_hz))
        {
            return bad(format!(
                "hrf_dt_s {} must divide the EEG period grid and the hemodynamic period",
                self.hrf_dt_s
            ));
        }
        for (what, v) in [
            ("epoch_s", self.epoch_s),
            ("lag", self.lag_s()),
        ] {
            if !is_whole(v * self.sample_rate_hemo_hz) {
                return bad(format!("{what} must be a whole number of hemodynamic samples"));
            }
        }
        if !(self.warmup_s >= 0.0) || !is_whole((self.warmup_s + 1.0) * self.sample_rate_hemo_hz) {
            return bad("warmup_s must be >= 0 and on the hemodynamic grid".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition required".into());
        }
        let uniq: std::collections::BTreeSet<_> = self.conditions.iter().collect();
        if uniq.len() != self.conditions.len() {
            return bad("condition labels must be unique".into());
        }
        if self.n_subjects == 0 || self.trials_per_condition == 0 || self.n_groups == 0 {
            return bad("n_subjects, trials_per_condition and n_groups must be >= 1".into());
        }
        for band in Band::ALL {
            let v = self
                .band_amplitudes
                .get(&band)
                .ok_or_else(|| Error::Config(format!("missing amplitude for band {band}")))?;
            if !(v.len() == 1 || v.len() == self.n_conditions()) {
                return bad(format!(
                    "band {band} has {} amplitudes for {} conditions",
                    v.len(),
                    self.n_conditions()
                ));
            }
            if v.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                return bad(format!("band {band} amplitudes must be finite and >= 0"));
            }
        }
        for p in [self.active_prob, self.inactive_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("activation probabilities must be in [0, 1]".into());
            }
        }
        if !(0.0..=1.0).contains(&self.network_coupling) {
            return bad("network_coupling must be in [0, 1]".into());
        }
        for x in [
            self.noise_std,
            self.sensor_noise_std,
            self.hemo_noise_std,
            self.subject_variability,
            self.modulation_depth,
            self.trial_amplitude_jitter,
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return bad("noise and variability parameters must be finite and >= 0".into());
            }
        }
        if !(self.modulation_rate_hz > 0.0 && self.gain_epsilon > 0.0 && self.region_spacing_m > 0.0)
        {
            return bad("modulation rate, gain epsilon and spacing must be > 0".into());
        }
        if !(self.drive_low_hz > 0.0 && self.drive_low_hz < self.sample_rate_eeg_hz / 2.0) {
            return bad("drive_low_hz must lie below the EEG Nyquist rate".into());
        }
        for e in &self.group_effects {
            if e.group >= self.n_groups || e.region >= self.n_regions || !(e.gain >= 0.0) {
                return bad(format!("invalid group effect {e:?}"));
            }
        }
        if let Some(ar) = &self.active_regions {
            if ar.len() != self.n_conditions() || ar.iter().flatten().any(|r| *r >= self.n_regions)
            {
                return bad("active_regions needs one in-range list per condition".into());
            }
        }
        Ok(())
    }

    pub fn band_amplitude(&self, band: Band, condition: usize) -> f64 {
        match self.band_amplitudes.get(&band) {
            Some(v) if v.len() == 1 => v[0],
            Some(v) => v[condition],
            None => 0.0,
        }
    }

    /// In-mask regions per condition. By default each condition owns the
    /// regions within 1.5 grid steps of a centre chosen by farthest-point
    /// sampling on the region grid.
    pub fn condition_masks(&self) -> Result<Vec<Vec<bool>>> {
        let nr = self.n_regions;
        if let Some(ar) = &self.active_regions {
            return Ok(ar
                .iter()
                .map(|list| (0..nr).map(|r| list.contains(&r)).collect())
                .collect());
        }
        let cols = grid_columns(nr);
        let xy = |i: usize| ((i % cols) as f64, (i / cols) as f64);
        let d = |a: usize, b: usize| {
            let (p, q) = (xy(a), xy(b));
            ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
        };
        let mut centres = vec![0usize];
        while centres.len() < self.n_conditions() {
            let next = (0..nr)
                .map(|r| (r, centres.iter().map(|&c| d(r, c)).fold(f64::MAX, f64::min)))
                .fold((0usize, -1.0f64), |best, (r, m)| if m > best.1 { (r, m) } else { best })
                .0;
            centres.push(next);
        }
        Ok(centres
            .iter()
            .map(|&c| (0..nr).map(|r| d(r, c) <= 1.5).collect())
            .collect())
    }

    pub fn parcellation(&self) -> Result<RegionParcellation> {
        grid_parcellation(self.n_regions, self.region_spacing_m)
    }

    pub fn eeg_geometry(&self) -> Result<SensorGeometry> {
        grid_sensors(self.n_eeg_channels, self.n_regions, self.region_spacing_m)
    }

    pub fn subject_profile(&self, index: usize) -> Result<SubjectProfile> {
        let parc = self.parcellation()?;
        let mut rng = derive_rng(self.seed, &[tag("subject"), index as u64]);
        let v = self.subject_variability;
        let group_index = index % self.n_groups;
        let mut region_gain = vec![1.0; self.n_regions];
        for e in self.group_effects.iter().filter(|e| e.group == group_index) {
            region_gain[e.region] *= e.gain;
        }
        let forward_gain = (0..self.n_regions)
            .map(|_| (v * rng.sample::<f64, _>(StandardNormal) - 0.5 * v * v).exp())
            .collect();
        let sd = 0.25 * v * self.region_spacing_m;
        let forward_centroids = parc
            .centroids
            .iter()
            .map(|c| {
                let mut p = *c;
                for x in p.iter_mut().take(2) {
                    *x += sd * rng.sample::<f64, _>(StandardNormal);
                }
                p
            })
            .collect();
        Ok(SubjectProfile {
            id: format!("sub-{index:02}"),
            index,
            group_index,
            group_id: format!("group-{group_index}"),
            region_gain,
            forward_gain,
            forward_centroids,
        })
    }

    fn trial_spacing_s(&self) -> f64 {
        // whole seconds keep every trial start on both sample grids
        (self.warmup_s + self.epoch_s + self.lag_s() + 8.0).ceil()
    }

    pub fn target_schema(&self) -> Result<ModalitySchema> {
        let parc = self.parcellation()?;
        let n = (self.epoch_s * self.sample_rate_hemo_hz).round() as usize;
        let (ids, positions, modality, units) = match self.target_modality {
            TargetModality::Bold => (
                parc.region_ids.clone(),
                parc.centroids.clone(),
                "bold",
                "a.u.",
            ),
            TargetModality::Fnirs => {
                let mut ids = Vec::new();
                let mut pos = Vec::new();
                for (id, c) in parc.region_ids.iter().zip(&parc.centroids) {
                    ids.push(format!("{id}-HbO"));
                    pos.push(*c);
                }
                for (id, c) in parc.region_ids.iter().zip(&parc.centroids) {
                    ids.push(format!("{id}-HbR"));
                    pos.push(*c);
                }
                (ids, pos, "fnirs", "umol/L")
            }
        };
        Ok(ModalitySchema {
            modality: modality.into(),
            channel_ids: ids,
            sample_rate_hz: self.sample_rate_hemo_hz,
            n_samples: n,
            units: units.into(),
            geometry: SensorGeometry::new(positions, parc.frame_label.clone())?,
        })
    }

    pub fn source_schema(&self) -> Result<ModalitySchema> {
        Ok(ModalitySchema {
            modality: "eeg".into(),
            channel_ids: (0..self.n_eeg_channels).map(|i| format!("E{i:02}")).collect(),
            sample_rate_hz: self.sample_rate_eeg_hz,
            n_samples: (self.epoch_s * self.sample_rate_eeg_hz).round() as usize,
            units: "uV".into(),
            geometry: self.eeg_geometry()?,
        })
    }
}

/// What the simulator knows about one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTruth {
    pub subject_id: String,
    pub condition_label: String,
    pub trial: u32,
    pub active: Vec<bool>,
    /// Noise-free region hemodynamics over the target epoch.
    pub clean_target: Array2<f64>,
    /// Region drive envelope at the hemodynamic rate over the source epoch.
    pub drive: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub lag_s: f64,
    pub conditions: Vec<String>,
    pub condition_masks: Vec<Vec<bool>>,
    pub band_amplitudes: BTreeMap<Band, Vec<f64>>,
    pub hrf: HrfKernel,
    pub subjects: Vec<SubjectProfile>,
    /// Region activity of the first sample over its source epoch.
    pub region_source_activity: MultichannelTimeSeries,
    pub samples: Vec<SampleTruth>,
}

fn crop(series: &MultichannelTimeSeries, start_s: f64, duration_s: f64) -> Result<MultichannelTimeSeries> {
    let fs = series.sample_rate_hz;
    let i0 = ((start_s - series.start_time_s) * fs).round();
    let n = (duration_s * fs).round() as usize;
    if i0 < 0.0 || i0 as usize + n > series.n_samples() {
        return Err(Error::invalid(format!(
            "crop [{start_s}, {}) outside series [{}, {})",
            start_s + duration_s,
            series.start_time_s,
            series.start_time_s + series.duration_s()
        )));
    }
    let i0 = i0 as usize;
    MultichannelTimeSeries::new(
        series.channel_ids.clone(),
        fs,
        series.time_of(i0),
        series.data.slice(ndarray::s![.., i0..i0 + n]).to_owned(),
    )
}

/// Simulate the full paired dataset described by `config`.
pub fn make_paired_dataset(config: &SimConfig) -> Result<(PairedDataset, GroundTruth)> {
    config.validate()?;
    let parc = config.parcellation()?;
    let eeg_geo = config.eeg_geometry()?;
    let src_schema = config.source_schema()?;
    let tgt_schema = config.target_schema()?;
    let hrf = canonical_hrf(
        config.hrf_dt_s,
        config.hrf_peak_s,
        config.hrf_undershoot_s,
        config.hrf_length_s,
    )?;
    let lag = config.lag_s();
    let fs = config.sample_rate_eeg_hz;
    let span_s = config.warmup_s + config.epoch_s + lag;
    let n_span = (span_s * fs).round() as usize;
    let spacing = config.trial_spacing_s();

    let subjects: Vec<SubjectProfile> = (0..config.n_subjects)
        .map(|s| config.subject_profile(s))
        .collect::<Result<_>>()?;

    let mut samples = Vec::new();
    let mut truths = Vec::new();
    let mut example = None;
    for subj in &subjects {
        let fwd_parc = RegionParcellation {
            centroids: subj.forward_centroids.clone(),
            ..parc.clone()
        };
        let gains = gain_matrix(&eeg_geo.positions, &fwd_parc.centroids, config.gain_epsilon);
        let mut sorted: Vec<f64> = gains.iter().cloned().collect();
        sorted.sort_by(f64::total_cmp);
        let median_gain = sorted[sorted.len() / 2];

        for (ci, cond) in config.conditions.iter().enumerate() {
            for k in 0..config.trials_per_condition {
                let mut rng = derive_rng(
                    config.seed,
                    &[tag("trial"), subj.index as u64, ci as u64, k as u64],
                );
                let t0 = config.warmup_s + (ci * config.trials_per_condition + k) as f64 * spacing;
                let draw = synth_sources(config, cond, subj, t0 - config.warmup_s, n_span, &mut rng)?;

                let hemo_clean = neurovascular_convolve(
                    &draw.activity,
                    &hrf,
                    config.sample_rate_hemo_hz,
                    config.drive_low_hz,
                )?;
                let mut fwd_activity = draw.activity.clone();
                for (r, mut row) in fwd_activity.data.outer_iter_mut().enumerate() {
                    row *= subj.forward_gain[r];
                }
                let eeg = project_to_sensors(
                    &fwd_activity,
                    &fwd_parc,
                    &eeg_geo,
                    src_schema.channel_ids.clone(),
                    config.gain_epsilon,
                    config.sensor_noise_std * median_gain,
                    &mut rng,
                )?;
                let target = hemo_target(config, &hemo_clean, &tgt_schema, &mut rng)?;

                let (eeg_al, tgt_al) = hemodynamic_lag_align(&eeg, &target, lag)?;
                let source_epoch = crop(&eeg_al, t0, config.epoch_s)?;
                let target_epoch = crop(&tgt_al, t0 + lag, config.epoch_s)?;

                let clean = crop(&hemo_clean, t0 + lag, config.epoch_s)?;
                let env = drive_envelope(
                    &draw.activity,
                    Some(config.drive_low_hz),
                    1.0 / config.sample_rate_hemo_hz,
                )?;
                let drive = crop(&env, t0, config.epoch_s)?;
                if example.is_none() {
                    example = Some(crop(&draw.activity, t0, config.epoch_s)?);
                }
                truths.push(SampleTruth {
                    subject_id: subj.id.clone(),
                    condition_label: cond.clone(),
                    trial: k as u32,
                    active: draw.active.clone(),
                    clean_target: clean.data,
                    drive: drive.data,
                });
                samples.push(PairedSample {
                    source_epoch,
                    target_epoch,
                    condition_label: cond.clone(),
                    subject_id: subj.id.clone(),
                    group_id: subj.group_id.clone(),
                    trial: k as u32,
                    provenance: Provenance::Real,
                });
            }
        }
    }

    let manifest = DatasetManifest {
        schema_version: CONTAINER_SCHEMA_VERSION,
        name: "simdata".into(),
        source: src_schema,
        target: tgt_schema,
        seed: config.seed,
        lag_s: lag,
        parcellation: Some(parc),
        history: vec![format!(
            "simulate: {} subjects x {} conditions x {} trials, seed {}",
            config.n_subjects,
            config.n_conditions(),
            config.trials_per_condition,
            config.seed
        )],
    };
    let dataset = PairedDataset::new(manifest, samples)?;
    let truth = GroundTruth {
        lag_s: lag,
        conditions: config.conditions.clone(),
        condition_masks: config.condition_masks()?,
        band_amplitudes: config.band_amplitudes.clone(),
        hrf,
        subjects,
        region_source_activity: example.expect("at least one sample"),
        samples: truths,
    };
    Ok((dataset, truth))
}

fn hemo_target(
    config: &SimConfig,
    clean: &MultichannelTimeSeries,
    schema: &ModalitySchema,
    rng: &mut crate::rng::SimRng,
) -> Result<MultichannelTimeSeries> {
    let sd = config.hemo_noise_std;
    let mut noisy = |x: f64| x + sd * rng.sample::<f64, _>(StandardNormal);
    let data = match config.target_modality {
        TargetModality::Bold => clean.data.mapv(&mut noisy),
        TargetModality::Fnirs => {
            let hbo = clean.data.mapv(&mut noisy);
            let hbr = clean.data.mapv(|x| noisy(-0.4 * x));
            ndarray::concatenate![ndarray::Axis(0), hbo, hbr]
        }
    };
    MultichannelTimeSeries::new(
        schema.channel_ids.clone(),
        clean.sample_rate_hz,
        clean.start_time_s,
        data,
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthIndexEntry {
    subject_id: String,
    condition_label: String,
    trial: u32,
    active: Vec<bool>,
    clean_target_blob: String,
    drive_blob: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthFile {
    schema_version: u32,
    lag_s: f64,
    conditions: Vec<String>,
    condition_masks: Vec<Vec<bool>>,
    band_amplitudes: BTreeMap<Band, Vec<f64>>,
    hrf: HrfKernel,
    subjects: Vec<SubjectProfile>,
    example_channel_ids: Vec<String>,
    example_sample_rate_hz: f64,
    example_start_time_s: f64,
    example_blob: String,
    samples: Vec<TruthIndexEntry>,
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
const GROUND_TRUTH_DIR: &str = "ground_truth";

/// Sidecar JSON plus blobs under `dir/ground_truth/`.
pub fn save_ground_truth(truth: &GroundTruth, dir: &Path) -> Result<()> {
    let blob_dir = dir.join(GROUND_TRUTH_DIR);
    std::fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    let mut entries = Vec::new();
    for (i, s) in truth.samples.iter().enumerate() {
        let ct = format!("{GROUND_TRUTH_DIR}/t{i:05}_clean.bin");
        let dr = format!("{GROUND_TRUTH_DIR}/t{i:05}_drive.bin");
        write_blob(&dir.join(&ct), &s.clean_target.clone().into_dyn(), DType::F64)?;
        write_blob(&dir.join(&dr), &s.drive.clone().into_dyn(), DType::F64)?;
        entries.push(TruthIndexEntry {
            subject_id: s.subject_id.clone(),
            condition_label: s.condition_label.clone(),
            trial: s.trial,
            active: s.active.clone(),
            clean_target_blob: ct,
            drive_blob: dr,
        });
    }
    let example_blob = format!("{GROUND_TRUTH_DIR}/example_source.bin");
    let ex = &truth.region_source_activity;
    write_blob(&dir.join(&example_blob), &ex.data.clone().into_dyn(), DType::F64)?;
    let file = TruthFile {
        schema_version: CONTAINER_SCHEMA_VERSION,
        lag_s: truth.lag_s,
        conditions: truth.conditions.clone(),
        condition_masks: truth.condition_masks.clone(),
        band_amplitudes: truth.band_amplitudes.clone(),
        hrf: truth.hrf.clone(),
        subjects: truth.subjects.clone(),
        example_channel_ids: ex.channel_ids.clone(),
        example_sample_rate_hz: ex.sample_rate_hz,
        example_start_time_s: ex.start_time_s,
        example_blob,
        samples: entries,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    let p = dir.join(GROUND_TRUTH_FILE);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let (a, _) = read_blob(path)?;
    a.into_dimensionality::<Ix2>()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let p = dir.join(GROUND_TRUTH_FILE);
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    crate::signal::container::check_version(&bytes, CONTAINER_SCHEMA_VERSION)?;
    let f: TruthFile = serde_json::from_slice(&bytes)?;
    let samples = f
        .samples
        .iter()
        .map(|e| {
            Ok(SampleTruth {
                subject_id: e.subject_id.clone(),
                condition_label: e.condition_label.clone(),
                trial: e.trial,
                active: e.active.clone(),
                clean_target: read_matrix(&dir.join(&e.clean_target_blob))?,
                drive: read_matrix(&dir.join(&e.drive_blob))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth {
        lag_s: f.lag_s,
        conditions: f.conditions,
        condition_masks: f.condition_masks,
        band_amplitudes: f.band_amplitudes,
        hrf: f.hrf,
        subjects: f.subjects,
        region_source_activity: MultichannelTimeSeries::new(
            f.example_channel_ids,
            f.example_sample_rate_hz,
            f.example_start_time_s,
            read_matrix(&dir.join(&f.example_blob))?,
        )?,
        samples,
    })
}
