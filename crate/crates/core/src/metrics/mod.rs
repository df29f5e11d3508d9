//! Evaluation battery: correlation, lag scans, spatial similarity,
//! connectivity, noise baselines, band attribution and group differences.

pub mod bands;
pub mod battery;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::SimRng;

pub use battery::{evaluate, EvalConfig};
pub use bands::{band_decompose, band_envelope, band_importance, BandDecomposition, BandImportance, TargetGenerator};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population mean and std.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(x);
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    (m, v.sqrt())
}

/// Product-moment correlation. Constant input is an error, not zero.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 points, got {}", x.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one input is constant".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean over rows of the row-wise correlation; undefined rows are skipped.
pub fn mean_row_pearson(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let vals: Vec<f64> = a
        .outer_iter()
        .zip(b.outer_iter())
        .filter_map(|(x, y)| pearson(&x.to_vec(), &y.to_vec()).ok())
        .collect();
    if vals.is_empty() {
        return Err(Error::UndefinedCorrelation("every row is constant".into()));
    }
    Ok(mean(&vals))
}

/// Correlation over every channel and sample of two equally shaped epochs.
pub fn epoch_pearson(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let x: Vec<f64> = a.iter().copied().collect();
    let y: Vec<f64> = b.iter().copied().collect();
    pearson(&x, &y)
}

/// Correlation against integer lag. Negative lag means `x` leads `y`:
/// `values[i]` is corr(x[n], y[n - lag]) with `lag = lags[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagCurve {
    pub lags: Vec<i64>,
    /// NaN where the correlation is undefined.
    pub values: Vec<f64>,
    /// `values` divided by the largest absolute defined value.
    pub normalized: Vec<f64>,
    pub peak_lag: i64,
}

impl LagCurve {
    fn from_values(lags: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        let best = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .max_by(|a, b| a.1.total_cmp(b.1))
            .ok_or_else(|| Error::UndefinedCorrelation("correlation undefined at every lag".into()))?;
        let peak_lag = lags[best.0];
        let scale = values
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let normalized = values
            .iter()
            .map(|v| if scale > 0.0 { v / scale } else { *v })
            .collect();
        Ok(LagCurve {
            lags,
            values,
            normalized,
            peak_lag,
        })
    }

    /// Pointwise mean over curves sharing one lag axis, ignoring NaNs.
    pub fn average(curves: &[LagCurve]) -> Result<LagCurve> {
        let first = curves
            .first()
            .ok_or_else(|| Error::invalid("no curves to average"))?;
        if curves.iter().any(|c| c.lags != first.lags) {
            return Err(Error::invalid("curves have different lag axes"));
        }
        let values = (0..first.lags.len())
            .map(|i| {
                let v: Vec<f64> = curves
                    .iter()
                    .map(|c| c.values[i])
                    .filter(|v| v.is_finite())
                    .collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    mean(&v)
                }
            })
            .collect();
        LagCurve::from_values(first.lags.clone(), values)
    }
}

/// Lag scan for two series on one sampling grid where `y[0]` sits
/// `offset` samples after `x[0]`. Only overlapping samples enter each lag.
pub fn lagged_correlation_offset(x: &[f64], y: &[f64], offset: i64, max_lag: usize) -> Result<LagCurve> {
    let m = max_lag as i64;
    let lags: Vec<i64> = (-m..=m).collect();
    let values = lags
        .iter()
        .map(|&lag| {
            // x index i pairs with y index i - lag - offset
            let shift = -lag - offset;
            let lo = 0i64.max(-shift);
            let hi = (x.len() as i64).min(y.len() as i64 - shift);
            if hi - lo < 3 {
                return f64::NAN;
            }
            let xs = &x[lo as usize..hi as usize];
            let ys = &y[(lo + shift) as usize..(hi + shift) as usize];
            pearson(xs, ys).unwrap_or(f64::NAN)
        })
        .collect();
    LagCurve::from_values(lags, values)
}

pub fn lagged_correlation(x: &[f64], y: &[f64], max_lag: usize) -> Result<LagCurve> {
    if x.len() != y.len() {
        return Err(Error::invalid("lag scan needs equal-length series"));
    }
    if x.len() <= 2 * max_lag {
        return Err(Error::invalid(format!(
            "series of {} samples too short for max lag {max_lag}",
            x.len()
        )));
    }
    lagged_correlation_offset(x, y, 0, max_lag)
}

/// Multichannel lag scan: per-channel covariances over the overlap are
/// pooled before normalising, so channels weigh in by their variance.
/// Row `r` of `x` pairs with row `r` of `y`; `offset` is as for
/// [`lagged_correlation_offset`].
pub fn lagged_correlation_pooled(x: &Array2<f64>, y: &Array2<f64>, offset: i64, max_lag: usize) -> Result<LagCurve> {
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(Error::invalid("pooled lag scan needs matching nonempty channel sets"));
    }
    let m = max_lag as i64;
    let lags: Vec<i64> = (-m..=m).collect();
    let values = lags
        .iter()
        .map(|&lag| {
            let shift = -lag - offset;
            let lo = 0i64.max(-shift);
            let hi = (x.ncols() as i64).min(y.ncols() as i64 - shift);
            if hi - lo < 3 {
                return f64::NAN;
            }
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (xr, yr) in x.outer_iter().zip(y.outer_iter()) {
                let xs = xr.slice(ndarray::s![lo as usize..hi as usize]);
                let ys = yr.slice(ndarray::s![(lo + shift) as usize..(hi + shift) as usize]);
                let (mx, my) = (xs.mean().unwrap_or(0.0), ys.mean().unwrap_or(0.0));
                for (a, b) in xs.iter().zip(ys.iter()) {
                    sxy += (a - mx) * (b - my);
                    sxx += (a - mx) * (a - mx);
                    syy += (b - my) * (b - my);
                }
            }
            if sxx == 0.0 || syy == 0.0 {
                f64::NAN
            } else {
                sxy / (sxx * syy).sqrt()
            }
        })
        .collect();
    LagCurve::from_values(lags, values)
}

/// Variance-matched white-noise correlation baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBaseline {
    pub mean: f64,
    pub std: f64,
    pub draws: Vec<f64>,
}

/// Each draw scores fresh Gaussian noise (matched in mean and variance to
/// each reference series) against every reference series and averages.
pub fn noise_baseline(real_targets: &[Vec<f64>], rng: &mut SimRng, n_draws: usize) -> Result<NoiseBaseline> {
    if n_draws < 30 {
        return Err(Error::invalid(format!("need at least 30 draws, got {n_draws}")));
    }
    if real_targets.is_empty() {
        return Err(Error::invalid("no reference series"));
    }
    let stats: Vec<(f64, f64)> = real_targets.iter().map(|t| mean_std(t)).collect();
    let mut draws = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let mut acc = Vec::with_capacity(real_targets.len());
        for (t, &(m, s)) in real_targets.iter().zip(&stats) {
            let s = if s > 0.0 { s } else { 1.0 };
            let noise: Vec<f64> = (0..t.len())
                .map(|_| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if let Ok(r) = pearson(&noise, t) {
                acc.push(r);
            }
        }
        if acc.is_empty() {
            return Err(Error::UndefinedCorrelation("every reference series is constant".into()));
        }
        draws.push(mean(&acc));
    }
    let (mean, std) = mean_std(&draws);
    Ok(NoiseBaseline { mean, std, draws })
}

/// Mean windowed SSIM between two region maps laid out row-major on a grid
/// with `cols` columns. Windows are `window x window` with uniform weights
/// and population moments; the dynamic range is the joint max - min.
pub fn ssim_map(a: &[f64], b: &[f64], cols: usize, window: usize, k1: f64, k2: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("maps must be nonempty and equally sized"));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("window must be odd, got {window}")));
    }
    let cols = cols.max(1);
    let rows = a.len().div_ceil(cols);
    if window > rows || window > cols {
        return Err(Error::invalid(format!(
            "window {window} larger than {rows}x{cols} map"
        )));
    }
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::MAX, f64::MIN), |acc, v| (acc.0.min(*v), acc.1.max(*v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let mut vals = Vec::new();
    for r0 in 0..=rows - window {
        for c0 in 0..=cols - window {
            let idx: Vec<usize> = (r0..r0 + window)
                .flat_map(|r| (c0..c0 + window).map(move |c| r * cols + c))
                .collect();
            if idx.iter().any(|&i| i >= a.len()) {
                continue;
            }
            vals.push(ssim_window(&idx, a, b, c1, c2));
        }
    }
    if vals.is_empty() {
        return Err(Error::invalid("no complete window fits the map"));
    }
    Ok(mean(&vals))
}

fn ssim_window(idx: &[usize], a: &[f64], b: &[f64], c1: f64, c2: f64) -> f64 {
    let n = idx.len() as f64;
    let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for &i in idx {
        let (da, db) = (a[i] - ma, b[i] - mb);
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Pairwise correlation between regions plus the regions that were constant.
#[derive(Debug, Clone, PartialEq)]
pub struct FcMatrix {
    /// Off-diagonal entries of undefined regions are NaN.
    pub matrix: Array2<f64>,
    pub undefined: Vec<usize>,
}

pub fn functional_connectivity(region_series: &Array2<f64>) -> Result<FcMatrix> {
    let (n, t) = region_series.dim();
    if t < 3 {
        return Err(Error::invalid(format!("need at least 3 time points, got {t}")));
    }
    let rows: Vec<Vec<f64>> = region_series.outer_iter().map(|r| r.to_vec()).collect();
    let undefined: Vec<usize> = (0..n)
        .filter(|&i| rows[i].iter().all(|v| *v == rows[i][0]))
        .collect();
    let mut m = Array2::from_elem((n, n), f64::NAN);
    for i in 0..n {
        m[[i, i]] = 1.0;
        for j in i + 1..n {
            let v = pearson(&rows[i], &rows[j]).unwrap_or(f64::NAN);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    Ok(FcMatrix { matrix: m, undefined })
}

/// Correlation of upper-triangle entries, skipping regions undefined in either.
pub fn fc_similarity(a: &FcMatrix, b: &FcMatrix) -> Result<f64> {
    if a.matrix.dim() != b.matrix.dim() {
        return Err(Error::invalid("connectivity matrices differ in shape"));
    }
    let n = a.matrix.nrows();
    let skip: std::collections::BTreeSet<usize> =
        a.undefined.iter().chain(&b.undefined).cloned().collect();
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for i in (0..n).filter(|i| !skip.contains(i)) {
        for j in (i + 1..n).filter(|j| !skip.contains(j)) {
            xa.push(a.matrix[[i, j]]);
            xb.push(b.matrix[[i, j]]);
        }
    }
    pearson(&xa, &xb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupThreshold {
    /// Benjamini-Hochberg false discovery rate; `None` disables the correction.
    pub fdr_q: Option<f64>,
    /// Minimum |t|; `None` disables the cut.
    pub min_abs_t: Option<f64>,
}

impl Default for GroupThreshold {
    fn default() -> Self {
        GroupThreshold {
            fdr_q: Some(0.05),
            min_abs_t: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDifference {
    /// Welch t of mean(a) - mean(b) per region; NaN for excluded regions.
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub significant: Vec<usize>,
    pub excluded: Vec<usize>,
}

/// Benjamini-Hochberg step-up: indices of rejected hypotheses.
pub fn benjamini_hochberg(p: &[(usize, f64)], q: f64) -> Vec<usize> {
    let mut sorted = p.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let m = sorted.len() as f64;
    let k = sorted
        .iter()
        .enumerate()
        .filter(|(i, (_, pv))| *pv <= (*i as f64 + 1.0) / m * q)
        .map(|(i, _)| i + 1)
        .max()
        .unwrap_or(0);
    let mut out: Vec<usize> = sorted[..k].iter().map(|(i, _)| *i).collect();
    out.sort_unstable();
    out
}

/// Per-region two-sample Welch t test between subject maps.
pub fn group_difference_map(
    group_a: &[Vec<f64>],
    group_b: &[Vec<f64>],
    threshold: GroupThreshold,
) -> Result<GroupDifference> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(Error::invalid("need at least 2 subjects per group"));
    }
    let n = group_a[0].len();
    if group_a.iter().chain(group_b).any(|m| m.len() != n) {
        return Err(Error::invalid("all maps must have the same region count"));
    }
    let sample_var = |g: &[Vec<f64>], r: usize| -> (f64, f64) {
        let v: Vec<f64> = g.iter().map(|m| m[r]).collect();
        let m = mean(&v);
        let s = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, s)
    };
    let (na, nb) = (group_a.len() as f64, group_b.len() as f64);
    let mut t = vec![f64::NAN; n];
    let mut p = vec![f64::NAN; n];
    let mut excluded = Vec::new();
    let mut tested = Vec::new();
    for r in 0..n {
        let (ma, va) = sample_var(group_a, r);
        let (mb, vb) = sample_var(group_b, r);
        let se2 = va / na + vb / nb;
        if !(se2 > 0.0) {
            excluded.push(r);
            continue;
        }
        let tr = (ma - mb) / se2.sqrt();
        let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
        t[r] = tr;
        p[r] = 2.0 * dist.cdf(-tr.abs());
        tested.push((r, p[r]));
    }
    let mut significant: Vec<usize> = match threshold.fdr_q {
        Some(q) => benjamini_hochberg(&tested, q),
        None => tested.iter().map(|(r, _)| *r).collect(),
    };
    if let Some(cut) = threshold.min_abs_t {
        significant.retain(|&r| t[r].abs() >= cut);
    }
    Ok(GroupDifference {
        t,
        p,
        significant,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricValue {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MetricValue {
            mean,
            std,
            n: values.len(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        MetricValue { mean: v, std: 0.0, n: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_id: String,
    pub checkpoint_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, MetricValue>,
    pub curves: BTreeMap<String, Vec<f64>>,
    pub provenance: Provenance,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn new(provenance: Provenance) -> Self {
        MetricReport {
            metrics: BTreeMap::new(),
            curves: BTreeMap::new(),
            provenance,
            notes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.provenance.dataset_id.is_empty() || self.provenance.checkpoint_id.is_empty() {
            return Err(Error::invalid("report provenance must be filled in"));
        }
        for (k, v) in &self.metrics {
            if !(v.mean.is_finite() && v.std.is_finite()) {
                return Err(Error::NumericalFailure {
                    tensor: k.clone(),
                    detail: "metric is not finite".into(),
                });
            }
        }
        Ok(())
    }

    /// `report.json` plus one `curve_<name>.csv` per curve.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let p = dir.join("report.json");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        for (name, values) in &self.curves {
            let mut csv = String::from("index,value\n");
            for (i, v) in values.iter().enumerate() {
                csv.push_str(&format!("{i},{v}\n"));
            }
            let p = dir.join(format!("curve_{name}.csv"));
            std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
