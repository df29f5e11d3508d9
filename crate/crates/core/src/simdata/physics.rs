use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::hrf::{causal_convolve, HrfKernel};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::signal::{
    FilterBand, MultichannelTimeSeries, Position, RegionParcellation, SensorGeometry, Sos,
};

pub const FRAME: &str = "sim-cortex";

fn integer_ratio(num: f64, den: f64, what: &str) -> Result<usize> {
    let r = num / den;
    let k = r.round();
    if k < 1.0 || (r - k).abs() > 1e-9 * k.max(1.0) {
        return Err(Error::invalid(format!(
            "{what}: {num} / {den} = {r} is not a positive integer"
        )));
    }
    Ok(k as usize)
}

fn grid_shape(n: usize) -> usize {
    (n as f64).sqrt().ceil().max(1.0) as usize
}

/// Row-major grid layout: columns per row for `n` items.
pub fn grid_columns(n: usize) -> usize {
    grid_shape(n)
}

/// Regions on a square-ish grid in the z = 0 plane.
pub fn grid_parcellation(n_regions: usize, spacing_m: f64) -> Result<RegionParcellation> {
    if n_regions == 0 {
        return Err(Error::invalid("need at least one region"));
    }
    let cols = grid_shape(n_regions);
    let centroids = (0..n_regions)
        .map(|i| [(i % cols) as f64 * spacing_m, (i / cols) as f64 * spacing_m, 0.0])
        .collect();
    RegionParcellation::new(
        (0..n_regions).map(|i| format!("R{i:02}")).collect(),
        centroids,
        (0..n_regions)
            .map(|i| format!("region-{}-{}", i / cols, i % cols))
            .collect(),
        FRAME,
    )
}

/// Sensors on their own grid covering the region extent, lifted above the
/// cortical plane and slightly offset so no sensor sits on a centroid.
pub fn grid_sensors(n_sensors: usize, n_regions: usize, spacing_m: f64) -> Result<SensorGeometry> {
    if n_sensors == 0 {
        return Err(Error::invalid("need at least one sensor"));
    }
    let rc = grid_shape(n_regions) as f64;
    let sc = grid_shape(n_sensors);
    let span = rc * spacing_m;
    let positions = (0..n_sensors)
        .map(|i| {
            let (ci, ri) = (i % sc, i / sc);
            [
                (ci as f64 + 0.5) / sc as f64 * span - spacing_m / 2.0 + 0.004,
                (ri as f64 + 0.5) / sc as f64 * span - spacing_m / 2.0 + 0.002,
                0.012 + 0.003 * ((ci + ri) % 2) as f64,
            ]
        })
        .collect();
    SensorGeometry::new(positions, FRAME)
}

fn dist2(a: &Position, b: &Position) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// `gain(c, r) = 1 / (|pos_c - centroid_r|^2 + eps)`.
pub fn gain_matrix(sensors: &[Position], centroids: &[Position], eps: f64) -> Array2<f64> {
    Array2::from_shape_fn((sensors.len(), centroids.len()), |(c, r)| {
        1.0 / (dist2(&sensors[c], &centroids[r]) + eps)
    })
}

/// Forward projection of region activity onto sensors plus white noise.
pub fn project_to_sensors(
    region_activity: &MultichannelTimeSeries,
    parcellation: &RegionParcellation,
    geometry: &SensorGeometry,
    channel_ids: Vec<String>,
    gain_eps: f64,
    noise_std: f64,
    rng: &mut SimRng,
) -> Result<MultichannelTimeSeries> {
    if geometry.frame_label != parcellation.frame_label {
        return Err(Error::invalid(format!(
            "sensor frame `{}` does not match parcellation frame `{}`",
            geometry.frame_label, parcellation.frame_label
        )));
    }
    if region_activity.n_channels() != parcellation.len() {
        return Err(Error::invalid(format!(
            "{} activity rows for {} regions",
            region_activity.n_channels(),
            parcellation.len()
        )));
    }
    if channel_ids.len() != geometry.len() {
        return Err(Error::invalid("one channel id per sensor required"));
    }
    let g = gain_matrix(&geometry.positions, &parcellation.centroids, gain_eps);
    let mut data = g.dot(&region_activity.data);
    if noise_std > 0.0 {
        data.iter_mut()
            .for_each(|v| *v += noise_std * rng.sample::<f64, _>(StandardNormal));
    }
    MultichannelTimeSeries::new(
        channel_ids,
        region_activity.sample_rate_hz,
        region_activity.start_time_s,
        data,
    )
}

/// Rectified high-frequency drive, block-averaged to `1 / dt_s`.
///
/// `drive_low_hz` selects the causal highpass applied before rectification;
/// `None` rectifies the broadband signal.
pub fn drive_envelope(
    source: &MultichannelTimeSeries,
    drive_low_hz: Option<f64>,
    dt_s: f64,
) -> Result<MultichannelTimeSeries> {
    let fs = source.sample_rate_hz;
    let block = integer_ratio(fs * dt_s, 1.0, "samples per envelope bin")?;
    let hp = drive_low_hz
        .map(|lo| Sos::butterworth(FilterBand::Highpass(lo), 4, fs))
        .transpose()?;
    let n_out = source.n_samples() / block;
    if n_out == 0 {
        return Err(Error::invalid("series shorter than one envelope bin"));
    }
    let mut out = Array2::zeros((source.n_channels(), n_out));
    for (c, row) in source.data.axis_iter(Axis(0)).enumerate() {
        let mut x = row.to_vec();
        if let Some(f) = &hp {
            f.apply_in_place(&mut x);
        }
        for b in 0..n_out {
            let s: f64 = x[b * block..(b + 1) * block].iter().map(|v| v.abs()).sum();
            out[[c, b]] = s / block as f64;
        }
    }
    MultichannelTimeSeries::new(source.channel_ids.clone(), 1.0 / dt_s, source.start_time_s, out)
}

/// Envelope at the kernel's rate convolved causally with the unit-area
/// normalized kernel, then averaged over each `1 / hemo_rate_hz` window.
/// Output samples are stamped with the start of their window, as the
/// envelope bins are; a trailing partial window is dropped.
pub fn convolve_envelope(
    envelope: &MultichannelTimeSeries,
    hrf: &HrfKernel,
    hemo_rate_hz: f64,
) -> Result<MultichannelTimeSeries> {
    let env_rate = envelope.sample_rate_hz;
    if (env_rate * hrf.dt_s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "envelope rate {env_rate} Hz does not match kernel step {} s",
            hrf.dt_s
        )));
    }
    let step = integer_ratio(env_rate, hemo_rate_hz, "envelope to hemodynamic rate")?;
    let area = hrf.sum();
    if !(area > 0.0) {
        return Err(Error::invalid("hrf kernel must have positive area"));
    }
    let h: Vec<f64> = hrf.values.iter().map(|v| v / area).collect();
    let n_out = envelope.n_samples() / step;
    if n_out == 0 {
        return Err(Error::invalid("envelope shorter than one hemodynamic sample"));
    }
    let mut out = Array2::zeros((envelope.n_channels(), n_out));
    for (c, row) in envelope.data.axis_iter(Axis(0)).enumerate() {
        let y = causal_convolve(&row.to_vec(), &h);
        for (k, w) in y.chunks_exact(step).enumerate() {
            out[[c, k]] = w.iter().sum::<f64>() / step as f64;
        }
    }
    MultichannelTimeSeries::new(
        envelope.channel_ids.clone(),
        hemo_rate_hz,
        envelope.start_time_s,
        out,
    )
}

/// Region activity to region hemodynamics: rectified beta+gamma envelope
/// convolved with the response kernel and sampled at `hemo_rate_hz`.
pub fn neurovascular_convolve(
    source: &MultichannelTimeSeries,
    hrf: &HrfKernel,
    hemo_rate_hz: f64,
    drive_low_hz: f64,
) -> Result<MultichannelTimeSeries> {
    let env = drive_envelope(source, Some(drive_low_hz), hrf.dt_s)?;
    convolve_envelope(&env, hrf, hemo_rate_hz)
}
