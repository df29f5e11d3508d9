//! Generated-versus-reference scoring used by the `eval` stage.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bands::{band_envelope, band_importance, TargetGenerator};
use super::{
    epoch_pearson, fc_similarity, functional_connectivity, lagged_correlation_pooled, mean_std, noise_baseline,
    ssim_map, LagCurve, MetricReport, MetricValue, Provenance,
};
use crate::error::{Error, Result};
use crate::hyperalign::{spatial_align, spatial_weights, AlignmentConfig};
use crate::rng::{derive_rng, SimRng};
use crate::signal::{Band, MultichannelTimeSeries, PairedDataset, PairedSample};

const TAG_NOISE: u64 = 0x40;
const TAG_FC: u64 = 0x41;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Largest lag scanned, in target samples.
    pub max_lag: usize,
    pub lag_band: Band,
    /// Allowed distance of a per-sample peak from the expected lag, in samples.
    pub lag_tolerance: usize,
    /// Channels per row when target channels are laid out as a map.
    pub map_cols: usize,
    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub noise_draws: usize,
    /// Permutations per band for attribution; needs a checkpoint.
    pub permutations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_lag: 10,
            lag_band: Band::Gamma,
            lag_tolerance: 1,
            map_cols: 4,
            ssim_window: 3,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            noise_draws: 100,
            permutations: 2,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.map_cols == 0 || self.ssim_window == 0 {
            return Err(Error::Config("map_cols and ssim_window must be > 0".into()));
        }
        if self.noise_draws < 30 {
            return Err(Error::Config("noise_draws must be >= 30".into()));
        }
        if self.permutations == 0 {
            return Err(Error::Config("permutations must be > 0".into()));
        }
        Ok(())
    }
}

/// Time-mean of every channel.
pub fn activation_map(epoch: &Array2<f64>) -> Vec<f64> {
    epoch.mean_axis(Axis(1)).expect("nonempty epoch").to_vec()
}

/// Gaussian noise matched per channel in mean and variance.
pub fn matched_noise(target: &Array2<f64>, rng: &mut SimRng) -> Array2<f64> {
    let mut out = target.clone();
    for mut row in out.outer_iter_mut() {
        let (m, s) = mean_std(&row.to_vec());
        row.iter_mut().for_each(|v| {
            let z: f64 = StandardNormal.sample(rng);
            *v = m + s * z;
        });
    }
    out
}

fn concat(epochs: &[&Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = epochs.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("same channel counts")
}

/// Connectivity similarity of two sets of epochs concatenated along time.
pub fn pooled_fc_similarity(a: &[&Array2<f64>], b: &[&Array2<f64>]) -> Result<f64> {
    fc_similarity(&functional_connectivity(&concat(a))?, &functional_connectivity(&concat(b))?)
}

/// Lag scan between the band envelope of the source projected onto the
/// target channels and a target-rate series over the same sample.
pub struct LagProbe {
    weights: crate::hyperalign::SpatialWeightMatrix,
    band: Band,
    target_rate_hz: f64,
    max_lag: usize,
}

impl LagProbe {
    pub fn new(dataset: &PairedDataset, alignment: &AlignmentConfig, band: Band, max_lag: usize) -> Result<Self> {
        let m = &dataset.manifest;
        Ok(LagProbe {
            weights: spatial_weights(&m.target.geometry.positions, &m.source.geometry.positions, alignment)?,
            band,
            target_rate_hz: m.target.sample_rate_hz,
            max_lag,
        })
    }

    pub fn curve(&self, source: &MultichannelTimeSeries, target: &MultichannelTimeSeries) -> Result<LagCurve> {
        let x = spatial_align(&source.data, &self.weights)?;
        let ids = (0..x.nrows()).map(|i| format!("r{i}")).collect();
        let projected = MultichannelTimeSeries::new(ids, source.sample_rate_hz, source.start_time_s, x)?;
        let env = band_envelope(&projected, self.band, self.target_rate_hz)?;
        let offset = ((target.start_time_s - env.start_time_s) * self.target_rate_hz).round() as i64;
        lagged_correlation_pooled(&env.data, &target.data, offset, self.max_lag)
    }
}

/// Reference samples matched to `generated` by subject, condition and trial.
pub fn match_reference<'a>(generated: &PairedDataset, reference: &'a PairedDataset) -> Result<Vec<&'a PairedSample>> {
    let key = |s: &PairedSample| (s.subject_id.clone(), s.condition_label.clone(), s.trial);
    let by_key: BTreeMap<_, &PairedSample> = reference
        .samples
        .iter()
        .filter(|s| !s.provenance.is_synthetic())
        .map(|s| (key(s), s))
        .collect();
    generated
        .samples
        .iter()
        .map(|g| {
            by_key.get(&key(g)).copied().ok_or_else(|| {
                Error::Schema(format!(
                    "no reference sample for {} / {} / trial {}",
                    g.subject_id, g.condition_label, g.trial
                ))
            })
        })
        .collect()
}

/// Score generated targets against their references.
///
/// `attribution` adds band permutation importance for the generator that
/// produced `generated`.
pub fn evaluate(
    generated: &PairedDataset,
    reference: &PairedDataset,
    cfg: &EvalConfig,
    alignment: &AlignmentConfig,
    provenance: Provenance,
    attribution: Option<&dyn TargetGenerator>,
) -> Result<MetricReport> {
    cfg.validate()?;
    if generated.is_empty() {
        return Err(Error::invalid("no generated samples to evaluate"));
    }
    if generated.manifest.target.channel_ids != reference.manifest.target.channel_ids {
        return Err(Error::Schema("generated and reference targets differ in channels".into()));
    }
    let refs = match_reference(generated, reference)?;
    let seed = provenance.seed;
    let mut report = MetricReport::new(provenance);
    let gen: Vec<&Array2<f64>> = generated.samples.iter().map(|s| &s.target_epoch.data).collect();
    let truth: Vec<&Array2<f64>> = refs.iter().map(|s| &s.target_epoch.data).collect();

    let pcc: Vec<f64> = gen.iter().zip(&truth).map(|(g, t)| epoch_pearson(g, t)).collect::<Result<_>>()?;
    report.metrics.insert("pcc".into(), MetricValue::of(&pcc));
    let flat: Vec<Vec<f64>> = truth.iter().map(|t| t.iter().copied().collect()).collect();
    let nb = noise_baseline(&flat, &mut derive_rng(seed, &[TAG_NOISE]), cfg.noise_draws)?;
    report.metrics.insert(
        "pcc_noise".into(),
        MetricValue {
            mean: nb.mean,
            std: nb.std,
            n: nb.draws.len(),
        },
    );

    let ssim: Vec<f64> = gen
        .iter()
        .zip(&truth)
        .map(|(g, t)| {
            ssim_map(
                &activation_map(g),
                &activation_map(t),
                cfg.map_cols,
                cfg.ssim_window,
                cfg.ssim_k1,
                cfg.ssim_k2,
            )
        })
        .collect::<Result<_>>()?;
    report.metrics.insert("ssim".into(), MetricValue::of(&ssim));

    let mut fc_gen = Vec::new();
    let mut fc_noise = Vec::new();
    let mut rng = derive_rng(seed, &[TAG_FC]);
    for c in generated.conditions() {
        let idx: Vec<usize> = (0..gen.len()).filter(|&i| generated.samples[i].condition_label == c).collect();
        let g: Vec<_> = idx.iter().map(|&i| gen[i]).collect();
        let t: Vec<_> = idx.iter().map(|&i| truth[i]).collect();
        // moments of the pooled series, so trial-to-trial mean shifts are not copied
        let noise = matched_noise(&concat(&t), &mut rng);
        let sim = pooled_fc_similarity(&g, &t)?;
        let nsim = pooled_fc_similarity(&[&noise], &t)?;
        report.metrics.insert(format!("fc_similarity.{c}"), MetricValue::scalar(sim));
        report.metrics.insert(format!("fc_noise.{c}"), MetricValue::scalar(nsim));
        fc_gen.push(sim);
        fc_noise.push(nsim);
    }
    report.metrics.insert("fc_similarity".into(), MetricValue::of(&fc_gen));
    report.metrics.insert("fc_noise".into(), MetricValue::of(&fc_noise));

    let probe = LagProbe::new(generated, alignment, cfg.lag_band, cfg.max_lag)?;
    let expected = -(generated.manifest.lag_s * generated.manifest.target.sample_rate_hz).round() as i64;
    let mut curves = Vec::with_capacity(gen.len());
    let mut hits = 0usize;
    for s in &generated.samples {
        let c = probe.curve(&s.source_epoch, &s.target_epoch)?;
        if (c.peak_lag - expected).unsigned_abs() as usize <= cfg.lag_tolerance {
            hits += 1;
        }
        curves.push(c);
    }
    let mean_curve = LagCurve::average(&curves)?;
    report.metrics.insert("lag_peak".into(), MetricValue::scalar(mean_curve.peak_lag as f64));
    report
        .metrics
        .insert("lag_hit_rate".into(), MetricValue::scalar(hits as f64 / gen.len() as f64));
    report.curves.insert("lag_correlation".into(), mean_curve.values.clone());
    report.notes.push(format!(
        "lag curve index i is lag {} + i target samples; expected peak {expected}",
        -(cfg.max_lag as i64)
    ));

    if let Some(model) = attribution {
        let eeg: Vec<_> = generated.samples.iter().map(|s| s.source_epoch.clone()).collect();
        let tgt: Vec<_> = refs.iter().map(|s| s.target_epoch.clone()).collect();
        let bi = band_importance(model, &eeg, &tgt, cfg.permutations, seed)?;
        for (b, s) in &bi.bands {
            report.metrics.insert(
                format!("band_importance.{}", b.name()),
                MetricValue {
                    mean: s.importance,
                    std: s.dispersion,
                    n: s.drops.len(),
                },
            );
        }
        report.notes.push(format!(
            "band ranking: {}",
            bi.ranking().iter().map(|b| b.name()).collect::<Vec<_>>().join(" > ")
        ));
        if bi.gamma_truncated {
            report.notes.push("gamma band truncated below the source Nyquist rate".into());
        }
    }
    Ok(report)
}
