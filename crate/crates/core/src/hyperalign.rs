//! Spatial inverse-square alignment of directly detected signals onto the
//! indirectly detected sampling positions, and temporal alignment through a
//! Gaussian lag kernel. Together they map a paired sample onto one shared
//! spatio-temporal grid (the conjugate domain).

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{
    zscore_normalize, ChannelStats, MultichannelTimeSeries, PairedSample, Position, SensorGeometry,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    /// Squared-distance regulariser, m^2.
    pub epsilon: f64,
    /// Physiological delay, s.
    pub tau_s: f64,
    /// Kernel width, s.
    pub sigma_s: f64,
    pub normalize_weights: bool,
    pub normalize_rows: bool,
    /// Rectify the spatially aligned source before temporal alignment, so
    /// the kernel averages an envelope rather than a zero-mean oscillation.
    pub source_envelope: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            epsilon: 1e-6,
            tau_s: 6.0,
            sigma_s: 2.0,
            normalize_weights: true,
            normalize_rows: true,
            source_envelope: true,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.sigma_s > 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::Config(format!("sigma_s must be > 0, got {}", self.sigma_s)));
        }
        if !self.tau_s.is_finite() {
            return Err(Error::Config("tau_s must be finite".into()));
        }
        Ok(())
    }
}

/// `weights[i, j]`: contribution of source `j` to target `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeightMatrix {
    pub weights: Array2<f64>,
}

fn finite_positions(p: &[Position]) -> bool {
    p.iter().flatten().all(|v| v.is_finite())
}

pub fn spatial_weights(
    targets: &[Position],
    sources: &[Position],
    config: &AlignmentConfig,
) -> Result<SpatialWeightMatrix> {
    if sources.is_empty() {
        return Err(Error::invalid("spatial alignment needs at least one source position"));
    }
    if targets.is_empty() {
        return Err(Error::invalid("spatial alignment needs at least one target position"));
    }
    if !finite_positions(targets) || !finite_positions(sources) {
        return Err(Error::invalid("positions must be finite"));
    }
    let mut w = Array2::from_shape_fn((targets.len(), sources.len()), |(i, j)| {
        let d2: f64 = (0..3).map(|k| (targets[i][k] - sources[j][k]).powi(2)).sum();
        1.0 / (d2 + config.epsilon)
    });
    if config.normalize_weights {
        for mut row in w.axis_iter_mut(Axis(0)) {
            // summing in sorted order makes the total independent of source order
            let mut vals = row.to_vec();
            vals.sort_by(f64::total_cmp);
            let s: f64 = vals.iter().sum();
            row.mapv_inplace(|v| v / s);
        }
    }
    Ok(SpatialWeightMatrix { weights: w })
}

/// `out[i, t] = sum_j w[i, j] * values[j, t]`.
pub fn spatial_align(values: &Array2<f64>, weights: &SpatialWeightMatrix) -> Result<Array2<f64>> {
    if weights.weights.ncols() != values.nrows() {
        return Err(Error::invalid(format!(
            "weights expect {} sources, values have {} rows",
            weights.weights.ncols(),
            values.nrows()
        )));
    }
    Ok(weights.weights.dot(values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeAlignmentMatrix {
    /// `t[k, l] = exp(-(dst_k - src_l - tau)^2 / (2 sigma^2))`.
    pub t: Array2<f64>,
    pub src_times_s: Vec<f64>,
    pub dst_times_s: Vec<f64>,
    pub normalize_rows: bool,
}

fn strictly_increasing(t: &[f64]) -> bool {
    t.iter().all(|v| v.is_finite()) && t.windows(2).all(|w| w[1] > w[0])
}

pub fn time_alignment_matrix(
    src_times_s: &[f64],
    dst_times_s: &[f64],
    config: &AlignmentConfig,
) -> Result<TimeAlignmentMatrix> {
    if src_times_s.is_empty() || dst_times_s.is_empty() {
        return Err(Error::invalid("time vectors must be nonempty"));
    }
    if !strictly_increasing(src_times_s) || !strictly_increasing(dst_times_s) {
        return Err(Error::invalid("time vectors must be finite and strictly increasing"));
    }
    if !(config.sigma_s > 0.0) {
        return Err(Error::invalid("sigma must be > 0"));
    }
    let inv = 1.0 / (2.0 * config.sigma_s * config.sigma_s);
    let t = Array2::from_shape_fn((dst_times_s.len(), src_times_s.len()), |(k, l)| {
        let d = dst_times_s[k] - src_times_s[l] - config.tau_s;
        (-d * d * inv).exp()
    });
    Ok(TimeAlignmentMatrix {
        t,
        src_times_s: src_times_s.to_vec(),
        dst_times_s: dst_times_s.to_vec(),
        normalize_rows: config.normalize_rows,
    })
}

/// `out[:, k] = sum_l That[k, l] src[:, l]`, with `That` row-normalised when
/// the matrix was built with `normalize_rows`.
pub fn temporal_align(src: &Array2<f64>, tm: &TimeAlignmentMatrix) -> Result<Array2<f64>> {
    if src.ncols() != tm.t.ncols() {
        return Err(Error::invalid(format!(
            "series has {} samples, kernel expects {}",
            src.ncols(),
            tm.t.ncols()
        )));
    }
    let mut kernel = tm.t.clone();
    for (k, mut row) in kernel.axis_iter_mut(Axis(0)).enumerate() {
        let mass = row.sum();
        if mass < 1e-300 {
            return Err(Error::DegenerateRow { row: k, mass });
        }
        if tm.normalize_rows {
            row.mapv_inplace(|v| v / mass);
        }
    }
    Ok(src.dot(&kernel.t()))
}

/// Source and target on the target's channels and timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugatePair {
    pub source: MultichannelTimeSeries,
    pub target: MultichannelTimeSeries,
}

/// Integrated pair plus the z-score statistics that were removed.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedPair {
    pub pair: ConjugatePair,
    pub source_stats: ChannelStats,
    pub target_stats: ChannelStats,
}

fn already_conjugate(
    sample: &PairedSample,
    source_geometry: &SensorGeometry,
    target_geometry: &SensorGeometry,
    config: &AlignmentConfig,
) -> bool {
    config.tau_s == 0.0
        && source_geometry.positions == target_geometry.positions
        && sample.source_epoch.sample_rate_hz == sample.target_epoch.sample_rate_hz
        && sample.source_epoch.start_time_s == sample.target_epoch.start_time_s
        && sample.source_epoch.n_samples() == sample.target_epoch.n_samples()
}

/// Map the source epoch onto the target grid without normalisation.
///
/// A pair that already lives on one grid (same positions, same timestamps,
/// zero delay) is returned as is.
pub fn align_pair(
    sample: &PairedSample,
    source_geometry: &SensorGeometry,
    target_geometry: &SensorGeometry,
    config: &AlignmentConfig,
) -> Result<ConjugatePair> {
    source_geometry.check_matches(&sample.source_epoch)?;
    target_geometry.check_matches(&sample.target_epoch)?;
    let tgt = &sample.target_epoch;
    if already_conjugate(sample, source_geometry, target_geometry, config) {
        return Ok(ConjugatePair {
            source: tgt.with_data(sample.source_epoch.data.clone())?,
            target: tgt.clone(),
        });
    }
    let y = conjugate_source(&sample.source_epoch, source_geometry, target_geometry, &tgt.times(), config)?;
    Ok(ConjugatePair {
        source: tgt.with_data(y)?,
        target: tgt.clone(),
    })
}

/// Source epoch mapped onto target positions and the given target
/// timestamps: `[n_targets x target_times.len()]`.
pub fn conjugate_source(
    source: &MultichannelTimeSeries,
    source_geometry: &SensorGeometry,
    target_geometry: &SensorGeometry,
    target_times: &[f64],
    config: &AlignmentConfig,
) -> Result<Array2<f64>> {
    source_geometry.check_matches(source)?;
    let w = spatial_weights(&target_geometry.positions, &source_geometry.positions, config)?;
    let mut x = spatial_align(&source.data, &w)?;
    if config.source_envelope {
        x.mapv_inplace(f64::abs);
    }
    let tm = time_alignment_matrix(&source.times(), target_times, config)?;
    temporal_align(&x, &tm)
}

/// Align, then z-score both sides per channel.
pub fn integrate(
    sample: &PairedSample,
    source_geometry: &SensorGeometry,
    target_geometry: &SensorGeometry,
    config: &AlignmentConfig,
) -> Result<IntegratedPair> {
    let pair = align_pair(sample, source_geometry, target_geometry, config)?;
    let (source, source_stats) = zscore_normalize(&pair.source)?;
    let (target, target_stats) = zscore_normalize(&pair.target)?;
    Ok(IntegratedPair {
        pair: ConjugatePair { source, target },
        source_stats,
        target_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};
    use crate::signal::Provenance;
    use approx::assert_abs_diff_eq;

    fn cfg() -> AlignmentConfig {
        AlignmentConfig::default()
    }

    fn random_positions(seed: u64, n: usize) -> Vec<Position> {
        let v = normal_vec(&mut rng_from_seed(seed), 3 * n);
        v.chunks(3).map(|c| [c[0] * 0.05, c[1] * 0.05, c[2] * 0.05]).collect()
    }

    fn random_matrix(seed: u64, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_vec((r, c), normal_vec(&mut rng_from_seed(seed), r * c)).unwrap()
    }

    #[test]
    fn collocated_source_dominates() {
        let raw = AlignmentConfig {
            normalize_weights: false,
            ..cfg()
        };
        let t = [[0.0, 0.0, 0.0]];
        let s = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let w = spatial_weights(&t, &s, &raw).unwrap();
        assert_abs_diff_eq!(w.weights[[0, 0]], 1e6, epsilon = 1e-6);
        let n = spatial_weights(&t, &s, &cfg()).unwrap();
        assert!(n.weights[[0, 0]] > 0.999999);
    }

    #[test]
    fn hand_computed_weights() {
        let tiny = AlignmentConfig {
            epsilon: 1e-300,
            normalize_weights: false,
            ..cfg()
        };
        let t = [[0.0, 0.0, 0.0]];
        let s = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let w = spatial_weights(&t, &s, &tiny).unwrap();
        assert_abs_diff_eq!(w.weights[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.weights[[0, 1]], 0.25, epsilon = 1e-12);
        let n = spatial_weights(&t, &s, &AlignmentConfig { normalize_weights: true, ..tiny }).unwrap();
        assert_abs_diff_eq!(n.weights[[0, 0]], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(n.weights[[0, 1]], 0.2, epsilon = 1e-12);
        let out = spatial_align(&ndarray::array![[1.0], [4.0]], &n).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 1.6, epsilon = 1e-12);
    }

    #[test]
    fn weights_positive_and_rows_sum_to_one() {
        let w = spatial_weights(&random_positions(1, 7), &random_positions(2, 11), &cfg()).unwrap();
        for row in w.weights.axis_iter(Axis(0)) {
            assert!(row.iter().all(|v| *v > 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn source_permutation_permutes_columns() {
        let t = random_positions(3, 5);
        let s = random_positions(4, 6);
        let perm = [3, 0, 5, 1, 4, 2];
        let sp: Vec<Position> = perm.iter().map(|&j| s[j]).collect();
        let a = spatial_weights(&t, &s, &cfg()).unwrap();
        let b = spatial_weights(&t, &sp, &cfg()).unwrap();
        for i in 0..5 {
            for (jj, &j) in perm.iter().enumerate() {
                assert_eq!(b.weights[[i, jj]], a.weights[[i, j]]);
            }
        }
    }

    #[test]
    fn constant_sources_give_constant_targets() {
        let w = spatial_weights(&random_positions(5, 4), &random_positions(6, 9), &cfg()).unwrap();
        let v = Array2::from_elem((9, 3), 2.5);
        let out = spatial_align(&v, &w).unwrap();
        assert!(out.iter().all(|x| (x - 2.5).abs() < 1e-12));
        assert!(spatial_align(&Array2::zeros((8, 3)), &w).is_err());
        assert!(spatial_weights(&random_positions(5, 4), &[], &cfg()).is_err());
    }

    #[test]
    fn spatial_matches_double_loop_and_is_linear() {
        let (nt, ns, n) = (32, 24, 64);
        let w = spatial_weights(&random_positions(7, nt), &random_positions(8, ns), &cfg()).unwrap();
        let x = random_matrix(9, ns, n);
        let y = random_matrix(10, ns, n);
        let out = spatial_align(&x, &w).unwrap();
        for i in 0..nt {
            for t in 0..n {
                let mut acc = 0.0;
                for j in 0..ns {
                    acc += w.weights[[i, j]] * x[[j, t]];
                }
                assert!((out[[i, t]] - acc).abs() <= 1e-12);
            }
        }
        let combo = spatial_align(&(&x * 1.5 - &y * 0.25), &w).unwrap();
        let sep = &out * 1.5 - &spatial_align(&y, &w).unwrap() * 0.25;
        assert!((&combo - &sep).iter().all(|d| d.abs() <= 1e-12));
        // convex combination stays within the per-column source range
        for t in 0..n {
            let col = x.column(t);
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |a, v| (a.0.min(*v), a.1.max(*v)));
            assert!(out.column(t).iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        }
    }

    #[test]
    fn kernel_closed_forms() {
        let m = time_alignment_matrix(&[0.0, 1.0, 2.0], &[6.0, 8.0], &cfg()).unwrap();
        assert_eq!(m.t[[0, 0]], 1.0);
        assert_abs_diff_eq!(m.t[[1, 0]], (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.t[[1, 0]], 0.60653, epsilon = 1e-5);
        let z = time_alignment_matrix(&[3.0], &[3.0], &cfg()).unwrap();
        assert_abs_diff_eq!(z.t[[0, 0]], 0.011109, epsilon = 1e-6);
        assert!(time_alignment_matrix(&[0.0, 0.0], &[1.0], &cfg()).is_err());
        assert!(time_alignment_matrix(&[1.0, 0.0], &[1.0], &cfg()).is_err());
    }

    #[test]
    fn kernel_bounds_and_argmax() {
        let src: Vec<f64> = (0..64).map(|l| l as f64 * 0.5).collect();
        let dst: Vec<f64> = (0..32).map(|k| 3.3 + k as f64 * 0.9).collect();
        let m = time_alignment_matrix(&src, &dst, &cfg()).unwrap();
        for k in 0..32 {
            let row = m.t.row(k);
            assert!(row.iter().all(|v| *v > 0.0 && *v <= 1.0));
            let arg = (0..64).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            let want = (0..64)
                .min_by(|&a, &b| {
                    (src[a] - (dst[k] - 6.0)).abs().total_cmp(&(src[b] - (dst[k] - 6.0)).abs())
                })
                .unwrap();
            assert_eq!(arg, want);
        }
    }

    #[test]
    fn temporal_matches_double_loop() {
        let src: Vec<f64> = (0..64).map(|l| l as f64 * 0.25).collect();
        let dst: Vec<f64> = (0..32).map(|k| 6.0 + k as f64 * 0.3).collect();
        let m = time_alignment_matrix(&src, &dst, &cfg()).unwrap();
        let x = random_matrix(12, 8, 64);
        let out = temporal_align(&x, &m).unwrap();
        for c in 0..8 {
            for k in 0..32 {
                let (mut num, mut den) = (0.0, 0.0);
                for l in 0..64 {
                    let d = dst[k] - src[l] - 6.0;
                    let t = (-d * d / 8.0).exp();
                    num += t * x[[c, l]];
                    den += t;
                }
                assert!((out[[c, k]] - num / den).abs() <= 1e-12);
            }
        }
        let c = temporal_align(&Array2::from_elem((2, 64), -3.0), &m).unwrap();
        assert!(c.iter().all(|v| (v + 3.0).abs() < 1e-12));
    }

    #[test]
    fn narrow_kernel_resamples_at_the_lag() {
        let dt = 0.5;
        let src: Vec<f64> = (0..40).map(|l| l as f64 * dt).collect();
        let dst: Vec<f64> = src.iter().map(|t| t + 6.0).collect();
        let c = AlignmentConfig {
            sigma_s: dt / 100.0,
            ..cfg()
        };
        let m = time_alignment_matrix(&src, &dst, &c).unwrap();
        let x = random_matrix(13, 3, 40);
        let out = temporal_align(&x, &m).unwrap();
        assert!((&out - &x).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn far_destination_is_a_degenerate_row() {
        let c = AlignmentConfig {
            sigma_s: 0.1,
            ..cfg()
        };
        let m = time_alignment_matrix(&[0.0, 1.0], &[7.0, 500.0], &c).unwrap();
        match temporal_align(&Array2::zeros((1, 2)), &m).unwrap_err() {
            Error::DegenerateRow { row, .. } => assert_eq!(row, 1),
            e => panic!("unexpected {e:?}"),
        }
    }

    fn toy_sample() -> (PairedSample, SensorGeometry, SensorGeometry) {
        let sg = SensorGeometry::new(random_positions(20, 5), "f").unwrap();
        let tg = SensorGeometry::new(random_positions(21, 3), "f").unwrap();
        let src = MultichannelTimeSeries::new(
            (0..5).map(|i| format!("s{i}")).collect(),
            10.0,
            0.0,
            random_matrix(22, 5, 200),
        )
        .unwrap();
        let tgt = MultichannelTimeSeries::new(
            (0..3).map(|i| format!("t{i}")).collect(),
            1.0,
            6.0,
            random_matrix(23, 3, 20),
        )
        .unwrap();
        let s = PairedSample {
            source_epoch: src,
            target_epoch: tgt,
            condition_label: "c".into(),
            subject_id: "s".into(),
            group_id: "g".into(),
            trial: 0,
            provenance: Provenance::Real,
        };
        (s, sg, tg)
    }

    #[test]
    fn integrate_shares_grid_and_is_idempotent() {
        let (s, sg, tg) = toy_sample();
        let ip = integrate(&s, &sg, &tg, &cfg()).unwrap();
        assert_eq!(ip.pair.source.channel_ids, ip.pair.target.channel_ids);
        assert_eq!(ip.pair.source.times(), ip.pair.target.times());

        let again = PairedSample {
            source_epoch: ip.pair.source.clone(),
            target_epoch: ip.pair.target.clone(),
            ..s.clone()
        };
        let zero = AlignmentConfig { tau_s: 0.0, ..cfg() };
        let ip2 = integrate(&again, &tg, &tg, &zero).unwrap();
        let d = (&ip2.pair.source.data - &ip.pair.source.data)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(d < 1e-9, "{d}");
        let d = (&ip2.pair.target.data - &ip.pair.target.data)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(d < 1e-9, "{d}");
    }
}
