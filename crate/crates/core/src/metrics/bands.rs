use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{epoch_pearson, mean_std};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::signal::{apply_sos, Band, MultichannelTimeSeries, Sos};

const BAND_ORDER: usize = 4;

/// The input split into canonical bands by zero-phase filtering.
#[derive(Debug, Clone)]
pub struct BandDecomposition {
    pub bands: BTreeMap<Band, MultichannelTimeSeries>,
    /// Set when gamma had to be realised as a highpass.
    pub gamma_truncated: bool,
}

impl BandDecomposition {
    /// Sum of all bands.
    pub fn resum(&self) -> Array2<f64> {
        let mut it = self.bands.values();
        let mut acc = it.next().expect("at least one band").data.clone();
        for b in it {
            acc += &b.data;
        }
        acc
    }
}

pub fn band_decompose(eeg: &MultichannelTimeSeries) -> Result<BandDecomposition> {
    let fs = eeg.sample_rate_hz;
    let mut bands = BTreeMap::new();
    let mut gamma_truncated = false;
    for band in Band::ALL {
        let (fb, truncated) = band.filter_band(fs);
        if band == Band::Gamma {
            gamma_truncated = truncated;
        }
        let sos = Sos::butterworth(fb, BAND_ORDER, fs)?;
        bands.insert(band, apply_sos(eeg, &sos, true)?);
    }
    Ok(BandDecomposition {
        bands,
        gamma_truncated,
    })
}

/// Rectified band amplitude, block-averaged down to `out_rate_hz`.
pub fn band_envelope(eeg: &MultichannelTimeSeries, band: Band, out_rate_hz: f64) -> Result<MultichannelTimeSeries> {
    let fs = eeg.sample_rate_hz;
    let ratio = fs / out_rate_hz;
    let block = ratio.round() as usize;
    if block == 0 || (ratio - block as f64).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "envelope rate {out_rate_hz} Hz does not divide {fs} Hz"
        )));
    }
    let sos = Sos::butterworth(band.filter_band(fs).0, BAND_ORDER, fs)?;
    let filtered = apply_sos(eeg, &sos, true)?;
    let n_out = eeg.n_samples() / block;
    if n_out == 0 {
        return Err(Error::invalid("series shorter than one envelope bin"));
    }
    let mut out = Array2::zeros((eeg.n_channels(), n_out));
    for (c, row) in filtered.data.outer_iter().enumerate() {
        for b in 0..n_out {
            let s: f64 = row.slice(ndarray::s![b * block..(b + 1) * block]).iter().map(|v| v.abs()).sum();
            out[[c, b]] = s / block as f64;
        }
    }
    MultichannelTimeSeries::new(eeg.channel_ids.clone(), out_rate_hz, eeg.start_time_s, out)
}

/// Something that maps source epochs to target epochs. One seed per
/// sample drives its stochasticity, so repeated calls with the same seeds
/// share their randomness.
pub trait TargetGenerator {
    fn generate(&self, eeg: &[MultichannelTimeSeries], seeds: &[u64]) -> Result<Vec<MultichannelTimeSeries>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandScore {
    /// Mean drop in score, each permutation clipped at zero.
    pub importance: f64,
    /// Spread of the clipped drops over permutations.
    pub dispersion: f64,
    pub drops: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandImportance {
    pub baseline: f64,
    pub bands: BTreeMap<Band, BandScore>,
    pub gamma_truncated: bool,
}

impl BandImportance {
    pub fn ranking(&self) -> Vec<Band> {
        let mut b: Vec<Band> = self.bands.keys().copied().collect();
        b.sort_by(|x, y| self.bands[y].importance.total_cmp(&self.bands[x].importance));
        b
    }
}

fn score(gen: &dyn TargetGenerator, eeg: &[MultichannelTimeSeries], targets: &[MultichannelTimeSeries], seeds: &[u64]) -> Result<f64> {
    let out = gen.generate(eeg, seeds)?;
    let mut acc = 0.0;
    for (o, t) in out.iter().zip(targets) {
        acc += epoch_pearson(&o.data, &t.data)?;
    }
    Ok(acc / targets.len() as f64)
}

/// Permutation importance of each band: the band is shuffled across
/// samples, every input is re-summed from its bands plus its own
/// out-of-band residual, and the generator is scored again.
pub fn band_importance(
    gen: &dyn TargetGenerator,
    eeg: &[MultichannelTimeSeries],
    targets: &[MultichannelTimeSeries],
    n_permutations: usize,
    seed: u64,
) -> Result<BandImportance> {
    if eeg.len() != targets.len() || eeg.len() < 2 {
        return Err(Error::invalid("need at least 2 matched samples"));
    }
    if n_permutations == 0 {
        return Err(Error::invalid("need at least one permutation"));
    }
    let decomps: Vec<BandDecomposition> = eeg.iter().map(band_decompose).collect::<Result<_>>()?;
    let residuals: Vec<Array2<f64>> = eeg.iter().zip(&decomps).map(|(e, d)| &e.data - &d.resum()).collect();
    let gen_seeds: Vec<u64> = (0..eeg.len() as u64).map(|i| crate::rng::derive_seed(seed, &[0, i])).collect();
    let baseline_inputs: Vec<MultichannelTimeSeries> = eeg
        .iter()
        .zip(&decomps)
        .zip(&residuals)
        .map(|((e, d), r)| e.with_data(d.resum() + r))
        .collect::<Result<_>>()?;
    let baseline = score(gen, &baseline_inputs, targets, &gen_seeds)?;

    let mut bands = BTreeMap::new();
    for (bi, band) in Band::ALL.into_iter().enumerate() {
        let mut drops = Vec::with_capacity(n_permutations);
        for p in 0..n_permutations {
            let mut perm: Vec<usize> = (0..eeg.len()).collect();
            perm.shuffle(&mut derive_rng(seed, &[1, bi as u64, p as u64]));
            let inputs: Vec<MultichannelTimeSeries> = (0..eeg.len())
                .map(|i| {
                    let mut acc = residuals[i].clone();
                    for b in Band::ALL {
                        let src = if b == band { perm[i] } else { i };
                        acc += &decomps[src].bands[&b].data;
                    }
                    eeg[i].with_data(acc)
                })
                .collect::<Result<_>>()?;
            let s = score(gen, &inputs, targets, &gen_seeds)?;
            drops.push((baseline - s).max(0.0));
        }
        let (importance, dispersion) = mean_std(&drops);
        bands.insert(
            band,
            BandScore {
                importance,
                dispersion,
                drops,
            },
        );
    }
    Ok(BandImportance {
        baseline,
        bands,
        gamma_truncated: decomps[0].gamma_truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};

    fn series(data: Array2<f64>, fs: f64) -> MultichannelTimeSeries {
        let ids = (0..data.nrows()).map(|i| format!("c{i}")).collect();
        MultichannelTimeSeries::new(ids, fs, 0.0, data).unwrap()
    }

    fn power(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn alpha_tone_lands_in_alpha() {
        let fs = 200.0;
        let x: Vec<f64> = (0..4000).map(|k| (2.0 * std::f64::consts::PI * 10.0 * k as f64 / fs).sin()).collect();
        let d = band_decompose(&series(Array2::from_shape_vec((1, 4000), x.clone()).unwrap(), fs)).unwrap();
        assert!(d.gamma_truncated);
        let inner = 500..3500;
        let pa = power(&d.bands[&Band::Alpha].data.row(0).to_vec()[inner.clone()]);
        let p0 = power(&x[inner]);
        assert!(pa / p0 >= 0.95, "alpha share {}", pa / p0);
    }

    #[test]
    fn band_powers_do_not_exceed_broadband() {
        let x = normal_vec(&mut rng_from_seed(1), 6000);
        let d = band_decompose(&series(Array2::from_shape_vec((1, 6000), x.clone()).unwrap(), 200.0)).unwrap();
        let total: f64 = d.bands.values().map(|b| power(&b.data.row(0).to_vec())).sum();
        assert!(total <= power(&x) * 1.05);
    }

    #[test]
    fn envelope_tracks_amplitude() {
        let fs = 200.0;
        let x: Vec<f64> = (0..2000)
            .map(|k| {
                let a = if k < 1000 { 1.0 } else { 3.0 };
                a * (2.0 * std::f64::consts::PI * 43.0 * k as f64 / fs).sin()
            })
            .collect();
        let e = band_envelope(&series(Array2::from_shape_vec((1, 2000), x).unwrap(), fs), Band::Gamma, 1.0).unwrap();
        assert_eq!(e.n_samples(), 10);
        let v = e.data.row(0);
        // mean |sin| = 2/pi
        assert!((v[2] - 2.0 / std::f64::consts::PI).abs() < 0.02);
        assert!((v[7] / v[2] - 3.0).abs() < 0.05);
    }

    /// Emits the gamma envelope of channel 0 as the target.
    struct GammaProbe;

    impl TargetGenerator for GammaProbe {
        fn generate(&self, eeg: &[MultichannelTimeSeries], _: &[u64]) -> Result<Vec<MultichannelTimeSeries>> {
            eeg.iter().map(|e| band_envelope(e, Band::Gamma, 10.0)).collect()
        }
    }

    #[test]
    fn importance_singles_out_the_driving_band() {
        let fs = 200.0;
        let mut rng = rng_from_seed(3);
        let eeg: Vec<MultichannelTimeSeries> = (0..8)
            .map(|_| series(Array2::from_shape_vec((2, 2000), normal_vec(&mut rng, 4000)).unwrap(), fs))
            .collect();
        let targets = GammaProbe.generate(&eeg, &[0; 8]).unwrap();
        let imp = band_importance(&GammaProbe, &eeg, &targets, 3, 7).unwrap();
        assert!((imp.baseline - 1.0).abs() < 1e-9);
        assert_eq!(imp.ranking()[0], Band::Gamma);
        assert!(imp.bands[&Band::Gamma].importance > 0.5);
        for b in [Band::Delta, Band::Theta, Band::Alpha] {
            assert!(imp.bands[&b].importance < 0.05, "{b}: {}", imp.bands[&b].importance);
        }
        assert!(imp.bands.values().all(|s| s.drops.iter().all(|d| *d >= 0.0)));
    }
}
