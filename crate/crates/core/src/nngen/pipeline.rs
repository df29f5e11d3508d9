use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use super::diffuser::Diffuser;
use super::model::{ModelConfig, TokenShapes};
use super::train::{train, LossCurve, Pair, TrainConfig};
use crate::error::{Error, Result};
use crate::hyperalign::{align_pair, conjugate_source, AlignmentConfig};
use crate::metrics::TargetGenerator;
use crate::rng::{derive_rng, rng_from_seed};
use crate::signal::{ChannelStats, ModalitySchema, MultichannelTimeSeries, PairedDataset};

const TAG_SPLIT: u64 = 0x5b1;
const GENERATE_CHUNK: usize = 32;

/// A trained generator together with everything needed to run it on raw
/// source epochs: schemas, alignment settings and normalisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub diffuser: Diffuser,
    pub alignment: AlignmentConfig,
    pub source_schema: ModalitySchema,
    pub target_schema: ModalitySchema,
    /// Target epoch start minus source epoch start.
    pub target_offset_s: f64,
    pub source_stats: ChannelStats,
    pub target_stats: ChannelStats,
    pub train_config: TrainConfig,
    pub loss_curve: LossCurve,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
}

/// Subjects held out for validation, chosen by a seeded shuffle.
pub fn split_subjects(subjects: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut s = subjects.to_vec();
    s.sort();
    if s.len() < 2 || fraction <= 0.0 {
        return (s, Vec::new());
    }
    s.shuffle(&mut derive_rng(seed, &[TAG_SPLIT]));
    let n_val = ((s.len() as f64 * fraction).round() as usize).clamp(1, s.len() - 1);
    let mut val = s.split_off(s.len() - n_val);
    s.sort();
    val.sort();
    (s, val)
}

fn concat_columns(mats: &[&Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = mats.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("same channel counts")
}

/// Conjugate-domain pairs `(conditioning, target)` in canonical sample order,
/// unnormalised, plus the common target offset.
pub fn conjugate_pairs(dataset: &PairedDataset, alignment: &AlignmentConfig) -> Result<(Vec<(usize, Pair)>, f64)> {
    let src_geo = &dataset.manifest.source.geometry;
    let tgt_geo = &dataset.manifest.target.geometry;
    let mut out = Vec::with_capacity(dataset.len());
    let mut offset: Option<f64> = None;
    for i in dataset.canonical_order() {
        let s = &dataset.samples[i];
        let o = s.target_epoch.start_time_s - s.source_epoch.start_time_s;
        match offset {
            None => offset = Some(o),
            Some(prev) if (prev - o).abs() > 1e-6 => {
                return Err(Error::invalid(format!(
                    "samples disagree on target offset: {prev} s vs {o} s"
                )))
            }
            _ => {}
        }
        let pair = align_pair(s, src_geo, tgt_geo, alignment)?;
        out.push((i, (pair.source.data, pair.target.data)));
    }
    Ok((out, offset.unwrap_or(0.0)))
}

/// Align, split by subject, normalise with training-set statistics and train.
pub fn fit(
    dataset: &PairedDataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    alignment: &AlignmentConfig,
) -> Result<TrainedModel> {
    alignment.validate()?;
    train_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let (pairs, offset) = conjugate_pairs(dataset, alignment)?;
    let (train_subj, val_subj) = split_subjects(&dataset.subjects(), train_config.val_fraction, train_config.seed);
    let val_set: BTreeSet<&String> = val_subj.iter().collect();
    let (val_pairs, train_pairs): (Vec<_>, Vec<_>) = pairs
        .into_iter()
        .partition(|(i, _)| val_set.contains(&dataset.samples[*i].subject_id));
    let train_pairs: Vec<Pair> = train_pairs.into_iter().map(|(_, p)| p).collect();
    let val_pairs: Vec<Pair> = val_pairs.into_iter().map(|(_, p)| p).collect();

    let src_cat = concat_columns(&train_pairs.iter().map(|p| &p.0).collect::<Vec<_>>());
    let tgt_cat = concat_columns(&train_pairs.iter().map(|p| &p.1).collect::<Vec<_>>());
    let source_stats = ChannelStats::of_matrix(&src_cat);
    let target_stats = ChannelStats::of_matrix(&tgt_cat);
    let norm = |ps: Vec<Pair>| -> Result<Vec<Pair>> {
        ps.into_iter()
            .map(|(c, t)| Ok((source_stats.normalize(&c)?, target_stats.normalize(&t)?)))
            .collect()
    };
    let train_n = norm(train_pairs)?;
    let val_n = norm(val_pairs)?;

    let (c0, t0) = &train_n[0];
    let shapes = TokenShapes::new(c0.nrows(), t0.nrows(), t0.ncols(), model_config.temporal_patch)?;
    if c0.ncols() != t0.ncols() {
        return Err(Error::invalid("conditioning and target lengths differ after alignment"));
    }
    let init = Diffuser::new(model_config.clone(), shapes)?;
    let (params, loss_curve) = train(&init, &train_n, &val_n, train_config)?;
    let diffuser = Diffuser::from_parts(model_config.clone(), shapes, params)?;
    Ok(TrainedModel {
        diffuser,
        alignment: alignment.clone(),
        source_schema: dataset.manifest.source.clone(),
        target_schema: dataset.manifest.target.clone(),
        target_offset_s: offset,
        source_stats,
        target_stats,
        train_config: train_config.clone(),
        loss_curve,
        train_subjects: train_subj,
        val_subjects: val_subj,
    })
}

impl TrainedModel {
    fn target_times(&self, source: &MultichannelTimeSeries) -> Vec<f64> {
        let start = source.start_time_s + self.target_offset_s;
        let rate = self.target_schema.sample_rate_hz;
        (0..self.target_schema.n_samples).map(|k| start + k as f64 / rate).collect()
    }

    /// Normalised conditioning matrix for a raw source epoch.
    pub fn conditioning(&self, source: &MultichannelTimeSeries) -> Result<Array2<f64>> {
        self.source_schema
            .check(source, "source")
            .map_err(|e| Error::invalid(e.to_string()))?;
        let c = conjugate_source(
            source,
            &self.source_schema.geometry,
            &self.target_schema.geometry,
            &self.target_times(source),
            &self.alignment,
        )?;
        self.source_stats.normalize(&c)
    }

    /// Feature tokens for an epoch of either modality.
    pub fn extract_features(&self, epoch: &MultichannelTimeSeries, modality: &str) -> Result<Array2<f64>> {
        if modality == self.source_schema.modality {
            self.diffuser.source_tokens(&self.conditioning(epoch)?)
        } else if modality == self.target_schema.modality {
            self.target_schema
                .check(epoch, "target")
                .map_err(|e| Error::invalid(e.to_string()))?;
            self.diffuser.target_tokens(&self.target_stats.normalize(&epoch.data)?)
        } else {
            Err(Error::invalid(format!("unknown modality `{modality}`")))
        }
    }

    /// Latent tokens to a target-modality series in physical units.
    pub fn unpatch(&self, x0: &Array2<f64>, modality: &str, start_time_s: f64) -> Result<MultichannelTimeSeries> {
        if modality != self.target_schema.modality {
            return Err(Error::invalid(format!("no unpatcher for modality `{modality}`")));
        }
        let y = self.target_stats.denormalize(&self.diffuser.unpatch_tokens(x0)?)?;
        MultichannelTimeSeries::new(
            self.target_schema.channel_ids.clone(),
            self.target_schema.sample_rate_hz,
            start_time_s,
            y,
        )
    }

    /// Generate one target epoch per source epoch; sample `i` draws all
    /// of its randomness from `seeds[i]`.
    pub fn generate(&self, sources: &[MultichannelTimeSeries], seeds: &[u64]) -> Result<Vec<MultichannelTimeSeries>> {
        if sources.len() != seeds.len() {
            return Err(Error::invalid("one seed per source epoch required"));
        }
        let conds: Vec<Array2<f64>> = sources.iter().map(|s| self.conditioning(s)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(sources.len());
        for (ci, chunk) in conds.chunks(GENERATE_CHUNK).enumerate() {
            let base = ci * GENERATE_CHUNK;
            let refs: Vec<&Array2<f64>> = chunk.iter().collect();
            let mut rngs: Vec<_> = seeds[base..base + chunk.len()].iter().map(|&s| rng_from_seed(s)).collect();
            let latents = self.diffuser.sample_latents(&refs, &mut rngs)?;
            for (k, x0) in latents.iter().enumerate() {
                let src = &sources[base + k];
                let y = self.unpatch(x0, &self.target_schema.modality, src.start_time_s + self.target_offset_s)?;
                if !y.is_finite() {
                    return Err(Error::NumericalFailure {
                        tensor: "generated_target".into(),
                        detail: format!("non-finite output for sample {}", base + k),
                    });
                }
                out.push(y);
            }
        }
        Ok(out)
    }
}

impl TargetGenerator for TrainedModel {
    fn generate(&self, eeg: &[MultichannelTimeSeries], seeds: &[u64]) -> Result<Vec<MultichannelTimeSeries>> {
        TrainedModel::generate(self, eeg, seeds)
    }
}
