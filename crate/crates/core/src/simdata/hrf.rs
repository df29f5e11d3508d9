use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Gamma};

use crate::error::{Error, Result};

/// Sampled impulse response, `values[k]` at `k * dt_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrfKernel {
    pub values: Vec<f64>,
    pub dt_s: f64,
}

impl HrfKernel {
    pub fn peak_index(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Double-gamma response: a gamma density with mode at `peak_s` minus one
/// sixth of a gamma density with mode at `undershoot_s`, scaled to unit peak.
pub fn canonical_hrf(dt_s: f64, peak_s: f64, undershoot_s: f64, length_s: f64) -> Result<HrfKernel> {
    if !(dt_s > 0.0 && dt_s.is_finite()) {
        return Err(Error::invalid(format!("hrf dt must be > 0, got {dt_s}")));
    }
    if !(0.0 < peak_s && peak_s < undershoot_s && undershoot_s < length_s) {
        return Err(Error::invalid(format!(
            "hrf timing must satisfy 0 < peak ({peak_s}) < undershoot ({undershoot_s}) < length ({length_s})"
        )));
    }
    // shape a, unit rate: mode = a - 1
    let g1 = Gamma::new(peak_s + 1.0, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let g2 = Gamma::new(undershoot_s + 1.0, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let n = (length_s / dt_s).round() as usize;
    let mut values: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * dt_s;
            if t == 0.0 {
                0.0
            } else {
                g1.pdf(t) - g2.pdf(t) / 6.0
            }
        })
        .collect();
    let peak = values.iter().cloned().fold(f64::MIN, f64::max);
    values.iter_mut().for_each(|v| *v /= peak);
    Ok(HrfKernel { values, dt_s })
}

/// Causal full-length-preserving convolution: `y[n] = sum_k h[k] x[n-k]`.
pub fn causal_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            let kmax = n.min(h.len().saturating_sub(1));
            (0..=kmax).map(|k| h[k] * x[n - k]).sum()
        })
        .collect()
}
