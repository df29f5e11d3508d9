use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{SimConfig, SubjectProfile};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::signal::{Band, MultichannelTimeSeries, Sos};

/// One trial's simulated region activity.
#[derive(Debug, Clone)]
pub struct SourceDraw {
    pub activity: MultichannelTimeSeries,
    /// Regions that carried oscillatory drive in this trial.
    pub active: Vec<bool>,
}

fn normals(rng: &mut SimRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// Unit-variance 1/f noise (Kellet's filter on white noise).
pub fn pink_noise(rng: &mut SimRng, n: usize) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let p = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            p
        })
        .collect();
    standardize(&mut out);
    out
}

/// Smooth unit-scale Gaussian process: iid knots at `rate_hz`, linearly
/// interpolated onto `n` samples at `fs`.
fn slow_process(rng: &mut SimRng, n: usize, fs: f64, rate_hz: f64) -> Vec<f64> {
    let step = fs / rate_hz;
    let n_knots = (n as f64 / step).ceil() as usize + 2;
    let knots = normals(rng, n_knots);
    (0..n)
        .map(|k| {
            let u = k as f64 / step;
            let i = u.floor() as usize;
            let f = u - i as f64;
            knots[i] * (1.0 - f) + knots[i + 1] * f
        })
        .collect()
}

/// Unit-RMS band-limited noise.
fn oscillation(rng: &mut SimRng, sos: &Sos, n: usize) -> Vec<f64> {
    let mut x = normals(rng, n);
    sos.apply_in_place(&mut x);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// Simulate region activity for one trial of `condition`.
///
/// Active regions carry a sum of band-limited oscillations, each scaled by
/// its configured amplitude and a lognormal modulation that mixes a
/// trial-wide network component with a private one. Every region gets pink
/// noise at `noise_std`.
pub fn synth_sources(
    config: &SimConfig,
    condition: &str,
    subject: &SubjectProfile,
    start_time_s: f64,
    n_samples: usize,
    rng: &mut SimRng,
) -> Result<SourceDraw> {
    let ci = config
        .conditions
        .iter()
        .position(|c| c == condition)
        .ok_or_else(|| Error::invalid(format!("unknown condition `{condition}`")))?;
    let fs = config.sample_rate_eeg_hz;
    let nr = config.n_regions;
    let mask = config.condition_masks()?[ci].clone();

    let active: Vec<bool> = mask
        .iter()
        .map(|&m| {
            let p = if m {
                config.active_prob
            } else {
                config.inactive_prob
            };
            rng.gen::<f64>() < p
        })
        .collect();

    let jitter = config.trial_amplitude_jitter;
    let trial_gain = (jitter * rng.sample::<f64, _>(StandardNormal) - 0.5 * jitter * jitter).exp();
    let kappa = config.modulation_depth;
    let a = config.network_coupling;
    let b = (1.0 - a * a).max(0.0).sqrt();

    let mut data = Array2::zeros((nr, n_samples));
    for band in Band::ALL {
        let amp = config.band_amplitude(band, ci);
        if amp == 0.0 {
            continue;
        }
        let shared = slow_process(rng, n_samples, fs, config.modulation_rate_hz);
        let (fb, _) = band.filter_band(fs);
        let sos = Sos::butterworth(fb, 4, fs)?;
        for r in (0..nr).filter(|&r| active[r]) {
            let private = slow_process(rng, n_samples, fs, config.modulation_rate_hz);
            let osc = oscillation(rng, &sos, n_samples);
            let g = amp * trial_gain * subject.region_gain[r];
            for k in 0..n_samples {
                let z = a * shared[k] + b * private[k];
                data[[r, k]] += g * (kappa * z - 0.5 * kappa * kappa).exp() * osc[k];
            }
        }
    }
    if config.noise_std > 0.0 {
        for r in 0..nr {
            let p = pink_noise(rng, n_samples);
            for k in 0..n_samples {
                data[[r, k]] += config.noise_std * p[k];
            }
        }
    }
    let ids = (0..nr).map(|i| format!("R{i:02}")).collect();
    Ok(SourceDraw {
        activity: MultichannelTimeSeries::new(ids, fs, start_time_s, data)?,
        active,
    })
}
