use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::filter::{FilterBand, Sos};
use super::MultichannelTimeSeries;
use crate::error::{Error, Result};

const GRID_TOL: f64 = 1e-6;

/// Butterworth bandpass applied per channel.
///
/// With `zero_phase` the filter runs forward then backward, so the net
/// phase is zero and the magnitude response is squared; `order` must then
/// be even.
pub fn bandpass_filter(
    series: &MultichannelTimeSeries,
    low_hz: f64,
    high_hz: f64,
    order: usize,
    zero_phase: bool,
) -> Result<MultichannelTimeSeries> {
    if order == 0 {
        return Err(Error::invalid("filter order must be > 0"));
    }
    if zero_phase && order % 2 != 0 {
        return Err(Error::invalid(format!(
            "zero-phase filtering requires an even order, got {order}"
        )));
    }
    let sos = Sos::butterworth(
        FilterBand::Bandpass(low_hz, high_hz),
        order,
        series.sample_rate_hz,
    )?;
    apply_sos(series, &sos, zero_phase)
}

/// Apply an already designed filter to every channel.
pub fn apply_sos(
    series: &MultichannelTimeSeries,
    sos: &Sos,
    zero_phase: bool,
) -> Result<MultichannelTimeSeries> {
    if sos.sample_rate_hz != series.sample_rate_hz {
        return Err(Error::invalid(format!(
            "filter designed for {} Hz applied to {} Hz series",
            sos.sample_rate_hz, series.sample_rate_hz
        )));
    }
    let mut out = series.data.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let x = row.to_vec();
        let y = if zero_phase {
            sos.apply_zero_phase(&x)
        } else {
            sos.apply(&x)
        };
        row.iter_mut().zip(y).for_each(|(d, v)| *d = v);
    }
    series.with_data(out)
}

fn slice_samples(
    series: &MultichannelTimeSeries,
    start: usize,
    len: usize,
) -> Result<MultichannelTimeSeries> {
    let data = series
        .data
        .slice(ndarray::s![.., start..start + len])
        .to_owned();
    MultichannelTimeSeries::new(
        series.channel_ids.clone(),
        series.sample_rate_hz,
        series.time_of(start),
        data,
    )
}

/// Trim a source/target pair so that the target sample at time `t` lines
/// up with the source sample at `t - lag_s`. Only the overlap is kept; both
/// outputs span the same duration.
pub fn hemodynamic_lag_align(
    source: &MultichannelTimeSeries,
    target: &MultichannelTimeSeries,
    lag_s: f64,
) -> Result<(MultichannelTimeSeries, MultichannelTimeSeries)> {
    if !(lag_s >= 0.0 && lag_s.is_finite()) {
        return Err(Error::invalid(format!("lag must be >= 0, got {lag_s}")));
    }
    let (fs_s, fs_t) = (source.sample_rate_hz, target.sample_rate_hz);
    let (s0, s1) = (source.start_time_s, source.start_time_s + source.duration_s());
    let (t0, t1) = (target.start_time_s, target.start_time_s + target.duration_s());
    let insufficient = || {
        let available = (s1.min(t1) - s0.max(t0)).max(0.0);
        Error::invalid(format!(
            "insufficient overlap for a {lag_s} s lag: requires {:.3} s of common coverage, \
             available {available:.3} s",
            lag_s + 1.0 / fs_t
        ))
    };

    // first target sample whose lagged source time is covered
    let start_t = t0.max(s0 + lag_s);
    let j0 = ((start_t - t0) * fs_t - GRID_TOL).ceil().max(0.0) as usize;
    let a_t = target.time_of(j0);
    let i0f = (a_t - lag_s - s0) * fs_s;
    let i0 = i0f.round();
    if (i0f - i0).abs() > 0.5 + GRID_TOL || i0 < 0.0 {
        return Err(insufficient());
    }
    let i0 = i0 as usize;
    let end = t1.min(s1 + lag_s);
    let avail = end - a_t;
    if avail <= 0.0 {
        return Err(insufficient());
    }
    let n_t = ((avail * fs_t) + GRID_TOL).floor() as usize;
    let n_t = n_t.min(target.n_samples() - j0);
    if n_t == 0 {
        return Err(insufficient());
    }
    let duration = n_t as f64 / fs_t;
    let n_s = ((duration * fs_s) + GRID_TOL).floor() as usize;
    let n_s = n_s.min(source.n_samples().saturating_sub(i0));
    if n_s == 0 {
        return Err(insufficient());
    }
    Ok((slice_samples(source, i0, n_s)?, slice_samples(target, j0, n_t)?))
}

/// Fixed-length windows; the partial tail is discarded.
pub fn segment_epochs(
    series: &MultichannelTimeSeries,
    window_s: f64,
    stride_s: f64,
) -> Result<Vec<MultichannelTimeSeries>> {
    if !(stride_s > 0.0) {
        return Err(Error::invalid(format!("stride must be > 0, got {stride_s}")));
    }
    if !(window_s > 0.0) {
        return Err(Error::invalid(format!("window must be > 0, got {window_s}")));
    }
    let rate = series.sample_rate_hz;
    let w = (window_s * rate).round() as usize;
    let st = ((stride_s * rate).round() as usize).max(1);
    let n = series.n_samples();
    if w == 0 || w > n {
        return Err(Error::invalid(format!(
            "window of {window_s} s ({w} samples) longer than series of {:.3} s ({n} samples)",
            series.duration_s()
        )));
    }
    let count = (n - w) / st + 1;
    (0..count)
        .map(|k| slice_samples(series, k * st, w))
        .collect()
}

/// Concatenate contiguous epochs (stride equal to window) back into one series.
pub fn reassemble_epochs(epochs: &[MultichannelTimeSeries]) -> Result<MultichannelTimeSeries> {
    let first = epochs
        .first()
        .ok_or_else(|| Error::invalid("no epochs to reassemble"))?;
    let mut expected_start = first.start_time_s;
    let period = 1.0 / first.sample_rate_hz;
    for e in epochs {
        if e.channel_ids != first.channel_ids || e.sample_rate_hz != first.sample_rate_hz {
            return Err(Error::invalid("epochs do not share a channel layout and rate"));
        }
        if (e.start_time_s - expected_start).abs() > GRID_TOL * period.max(1.0) {
            return Err(Error::invalid(format!(
                "epoch at {} s is not contiguous (expected {expected_start} s)",
                e.start_time_s
            )));
        }
        expected_start = e.start_time_s + e.duration_s();
    }
    let views: Vec<_> = epochs.iter().map(|e| e.data.view()).collect();
    let data = ndarray::concatenate(Axis(1), &views)
        .map_err(|e| Error::invalid(format!("concatenation failed: {e}")))?;
    first.with_data(data)
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ChannelStats {
    pub fn of_matrix(data: &Array2<f64>) -> Self {
        let (means, stds) = data
            .axis_iter(Axis(0))
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.sum() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .unzip();
        ChannelStats { means, stds }
    }

    /// Channels whose recorded std is zero (passed through centered only).
    pub fn degenerate_channels(&self) -> Vec<usize> {
        self.stds
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn normalize(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_rows(data)?;
        let mut out = data.clone();
        for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.means[c], self.stds[c]);
            if s > 0.0 {
                row.mapv_inplace(|v| (v - m) / s);
            } else {
                row.mapv_inplace(|v| v - m);
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_rows(data)?;
        let mut out = data.clone();
        for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.means[c], self.stds[c]);
            let s = if s > 0.0 { s } else { 1.0 };
            row.mapv_inplace(|v| v * s + m);
        }
        Ok(out)
    }

    fn check_rows(&self, data: &Array2<f64>) -> Result<()> {
        if data.nrows() != self.means.len() {
            return Err(Error::invalid(format!(
                "stats for {} channels applied to {} rows",
                self.means.len(),
                data.nrows()
            )));
        }
        Ok(())
    }
}

/// Per-channel z-scoring with population std. Zero-variance channels are
/// centered only and recorded with std 0.
pub fn zscore_normalize(
    series: &MultichannelTimeSeries,
) -> Result<(MultichannelTimeSeries, ChannelStats)> {
    let stats = ChannelStats::of_matrix(&series.data);
    let data = stats.normalize(&series.data)?;
    Ok((series.with_data(data)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use std::f64::consts::PI;

    fn series(data: Array2<f64>, rate: f64, start: f64) -> MultichannelTimeSeries {
        let ids = (0..data.nrows()).map(|i| format!("c{i}")).collect();
        MultichannelTimeSeries::new(ids, rate, start, data).unwrap()
    }

    fn sine(f: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|k| (2.0 * PI * f * k as f64 / fs + phase).sin())
            .collect()
    }

    /// Least-squares fit of `a sin + b cos` at a known frequency.
    fn fit_sinusoid(y: &[f64], f: f64, fs: f64, range: std::ops::Range<usize>) -> (f64, f64) {
        let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in range {
            let w = 2.0 * PI * f * k as f64 / fs;
            let (s, c) = w.sin_cos();
            ss += s * s;
            cc += c * c;
            sc += s * c;
            ys += y[k] * s;
            yc += y[k] * c;
        }
        let det = ss * cc - sc * sc;
        let a = (ys * cc - yc * sc) / det;
        let b = (yc * ss - ys * sc) / det;
        ((a * a + b * b).sqrt(), b.atan2(a))
    }

    #[test]
    fn dc_is_rejected() {
        let s = series(Array2::from_elem((1, 4000), 3.0), 1.0, 0.0);
        let y = bandpass_filter(&s, 0.01, 0.1, 6, true).unwrap();
        assert!(y.data.iter().all(|v| v.abs() < 1e-6), "max {}", y.data[[0, 0]]);
    }

    #[test]
    fn passband_sinusoid_keeps_amplitude_and_phase() {
        let (fs, lo, hi) = (1.0, 0.01, 0.1);
        let f0 = (lo * hi as f64).sqrt();
        let n = 6000;
        let x = sine(f0, fs, n, 0.3);
        let s = series(Array2::from_shape_vec((1, n), x.clone()).unwrap(), fs, 0.0);
        let y = bandpass_filter(&s, lo, hi, 6, true).unwrap().channel(0);
        let steady = 1500..4500;
        let (ax, px) = fit_sinusoid(&x, f0, fs, steady.clone());
        let (ay, py) = fit_sinusoid(&y, f0, fs, steady);
        assert!((ay / ax - 1.0).abs() < 0.05, "gain {}", ay / ax);
        assert!((py - px).to_degrees().abs() < 1.0, "phase {}", (py - px).to_degrees());
    }

    #[test]
    fn stopband_attenuation_at_ten_times_cutoff() {
        let (fs, lo, hi) = (10.0, 0.01, 0.1);
        let n = 20000;
        let x = sine(10.0 * hi, fs, n, 0.0);
        let s = series(Array2::from_shape_vec((1, n), x).unwrap(), fs, 0.0);
        let y = bandpass_filter(&s, lo, hi, 6, true).unwrap().channel(0);
        let (ay, _) = fit_sinusoid(&y, 10.0 * hi, fs, 5000..15000);
        let db = -20.0 * ay.log10();
        // analytic single-pass |H|^2 = 1/(1+(w/wc)^{2n}) ~ 1e-12 at 10x, squared by the second pass
        assert!(db >= 60.0, "attenuation {db} dB");
    }

    #[test]
    fn filtering_is_linear_and_zero_lag() {
        let fs = 200.0;
        let n = 2000;
        let x: Vec<f64> = sine(12.0, fs, n, 0.2);
        let y: Vec<f64> = (0..n).map(|k| ((k * 7919) % 97) as f64 / 97.0 - 0.5).collect();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.5 * a - 0.7 * b).collect();
        let m = Array2::from_shape_vec((3, n), [x.clone(), y, combo].concat()).unwrap();
        let f = bandpass_filter(&series(m, fs, 0.0), 8.0, 16.0, 4, true).unwrap();
        let scale = f.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for k in 0..n {
            let want = 2.5 * f.data[[0, k]] - 0.7 * f.data[[1, k]];
            assert!((f.data[[2, k]] - want).abs() <= 1e-9 * scale);
        }
        // cross-correlation of input and output peaks at lag 0
        let out = f.channel(0);
        let xc = |lag: i64| -> f64 {
            (200..n - 200)
                .map(|k| x[k] * out[(k as i64 + lag) as usize])
                .sum()
        };
        let best = (-10..=10).max_by(|&a, &b| xc(a).total_cmp(&xc(b))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn filter_argument_errors() {
        let s = series(Array2::zeros((1, 100)), 10.0, 0.0);
        assert!(bandpass_filter(&s, 1.0, 6.0, 2, true).is_err());
        assert!(bandpass_filter(&s, 0.0, 2.0, 2, true).is_err());
        assert!(bandpass_filter(&s, 1.0, 2.0, 0, false).is_err());
        assert!(bandpass_filter(&s, 1.0, 2.0, 3, true).is_err());
        assert!(bandpass_filter(&s, 1.0, 2.0, 3, false).is_ok());
    }

    #[test]
    fn zero_lag_alignment_is_trim() {
        let src = series(Array2::from_shape_fn((2, 50), |(c, k)| (c * 100 + k) as f64), 10.0, 0.0);
        let tgt = series(Array2::from_shape_fn((1, 5), |(_, k)| k as f64), 1.0, 0.0);
        let (a, b) = hemodynamic_lag_align(&src, &tgt, 0.0).unwrap();
        assert_eq!(a, src);
        assert_eq!(b, tgt);
    }

    #[test]
    fn impulses_line_up_after_alignment() {
        let mut s = Array2::zeros((1, 30));
        s[[0, 10]] = 1.0;
        let mut t = Array2::zeros((1, 30));
        t[[0, 16]] = 1.0;
        let (a, b) =
            hemodynamic_lag_align(&series(s, 1.0, 0.0), &series(t, 1.0, 0.0), 6.0).unwrap();
        assert_eq!(a.n_samples(), b.n_samples());
        let ia = a.channel(0).iter().position(|v| *v == 1.0).unwrap();
        let ib = b.channel(0).iter().position(|v| *v == 1.0).unwrap();
        assert_eq!(ia, ib);
        assert_eq!(b.start_time_s - a.start_time_s, 6.0);
    }

    #[test]
    fn alignment_reports_insufficient_overlap() {
        let s = series(Array2::zeros((1, 5)), 1.0, 0.0);
        let t = series(Array2::zeros((1, 5)), 1.0, 0.0);
        let err = hemodynamic_lag_align(&s, &t, 6.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("requires") && msg.contains("available"), "{msg}");
    }

    #[test]
    fn epoch_counts_and_starts() {
        let s = series(Array2::from_shape_fn((1, 10), |(_, k)| k as f64), 1.0, 0.0);
        assert_eq!(segment_epochs(&s, 10.0, 3.0).unwrap().len(), 1);
        let e = segment_epochs(&s, 4.0, 2.0).unwrap();
        assert_eq!(e.len(), 4);
        let starts: Vec<f64> = e.iter().map(|x| x.data[[0, 0]]).collect();
        assert_eq!(starts, vec![0.0, 2.0, 4.0, 6.0]);
        assert!(e.iter().all(|x| x.n_samples() == 4));
        assert!(segment_epochs(&s, 11.0, 1.0).is_err());
    }

    #[test]
    fn epoching_with_stride_equal_window_reassembles() {
        let s = series(Array2::from_shape_fn((2, 23), |(c, k)| (c * 31 + k * k) as f64), 2.0, 1.5);
        let e = segment_epochs(&s, 2.5, 2.5).unwrap();
        let r = reassemble_epochs(&e).unwrap();
        let kept = e.len() * 5;
        assert_eq!(r.data, s.data.slice(ndarray::s![.., ..kept]).to_owned());
        assert_eq!(r.start_time_s, s.start_time_s);
    }

    #[test]
    fn zscore_examples() {
        let s = series(array![[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]], 1.0, 0.0);
        let (z, st) = zscore_normalize(&s).unwrap();
        assert_abs_diff_eq!(z.data[[0, 0]], -1.224744871391589, epsilon = 1e-12);
        assert_abs_diff_eq!(z.data[[0, 1]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z.data[[0, 2]], 1.224744871391589, epsilon = 1e-12);
        assert_abs_diff_eq!(st.means[0], 2.0);
        assert_abs_diff_eq!(st.stds[0], 0.816496580927726, epsilon = 1e-12);
        assert_eq!(z.data.row(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(st.stds[1], 0.0);
        assert_eq!(st.degenerate_channels(), vec![1]);

        let (z2, _) = zscore_normalize(&z).unwrap();
        let again: Array1<f64> = z2.data.row(0).to_owned();
        for (a, b) in again.iter().zip(z.data.row(0)) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn zscore_moments(v in proptest::collection::vec(-1e3f64..1e3, 3..64)) {
                let n = v.len();
                let s = series(Array2::from_shape_vec((1, n), v).unwrap(), 1.0, 0.0);
                let (z, st) = zscore_normalize(&s).unwrap();
                prop_assume!(st.stds[0] > 1e-6);
                let row = z.channel(0);
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-10);
                let back = st.denormalize(&z.data).unwrap();
                for (a, b) in back.iter().zip(s.data.iter()) {
                    prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
                }
            }
        }
    }
}
