//! Butterworth IIR design as cascaded second-order sections.
//!
//! Filters are designed from the analog Butterworth prototype, transformed
//! to the requested band in the analog domain, then mapped to z with a
//! prewarped bilinear transform. Poles are grouped into biquads so high
//! orders stay well conditioned even at very low normalized cutoffs
//! (0.01 Hz at 1 Hz sampling, 1 Hz at 200 Hz).

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterBand {
    Lowpass(f64),
    Highpass(f64),
    Bandpass(f64, f64),
}

/// One biquad `(b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        let num = self.b[0] + z_inv * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z_inv * self.a[1] + z2 * self.a[2];
        num / den
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
    pub band: FilterBand,
    pub order: usize,
    pub sample_rate_hz: f64,
}

fn prewarp(f_hz: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f_hz / fs).tan()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    let k = Complex64::new(2.0 * fs, 0.0);
    (k + s) / (k - s)
}

/// Group digital poles into denominators of biquads (conjugate pairs, then
/// real poles two at a time; a lone real pole becomes a first-order section).
fn pole_sections(poles: &[Complex64]) -> Vec<[f64; 3]> {
    let scale = poles.iter().map(|p| p.norm()).fold(1.0, f64::max);
    let tol = 1e-10 * scale;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > tol).collect();
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= tol)
        .map(|p| p.re)
        .collect();
    complex.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    real.sort_by(|a, b| a.total_cmp(b));

    let mut out: Vec<[f64; 3]> = complex
        .iter()
        .map(|p| [1.0, -2.0 * p.re, p.norm_sqr()])
        .collect();
    let mut chunks = real.chunks_exact(2);
    for pair in chunks.by_ref() {
        out.push([1.0, -(pair[0] + pair[1]), pair[0] * pair[1]]);
    }
    if let [r] = chunks.remainder() {
        out.push([1.0, -r, 0.0]);
    }
    out
}

impl Sos {
    /// Design a Butterworth filter of prototype order `order` (for bandpass,
    /// `order` poles per band edge, `2 * order` in total).
    pub fn butterworth(band: FilterBand, order: usize, sample_rate_hz: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("filter order must be > 0"));
        }
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(Error::invalid(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        let nyq = sample_rate_hz / 2.0;
        let check = |f: f64, what: &str| -> Result<()> {
            if !(f > 0.0 && f < nyq) {
                Err(Error::invalid(format!(
                    "{what} cutoff {f} Hz outside (0, {nyq}) Hz"
                )))
            } else {
                Ok(())
            }
        };
        let fs = sample_rate_hz;
        let proto: Vec<Complex64> = (0..order)
            .map(|k| {
                let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
                Complex64::from_polar(1.0, theta)
            })
            .collect();

        let (analog_poles, zero_pattern, ref_freq): (Vec<Complex64>, Zeros, f64) = match band {
            FilterBand::Lowpass(fc) => {
                check(fc, "lowpass")?;
                let wc = prewarp(fc, fs);
                (proto.iter().map(|p| p * wc).collect(), Zeros::AtNyquist, 0.0)
            }
            FilterBand::Highpass(fc) => {
                check(fc, "highpass")?;
                let wc = prewarp(fc, fs);
                (
                    proto.iter().map(|p| wc / p).collect(),
                    Zeros::AtDc,
                    nyq,
                )
            }
            FilterBand::Bandpass(lo, hi) => {
                check(lo, "low")?;
                check(hi, "high")?;
                if lo >= hi {
                    return Err(Error::invalid(format!(
                        "bandpass requires low < high, got {lo} >= {hi}"
                    )));
                }
                let (wl, wh) = (prewarp(lo, fs), prewarp(hi, fs));
                let bw = wh - wl;
                let w0sq = wl * wh;
                let mut poles = Vec::with_capacity(2 * order);
                for p in &proto {
                    let half = p * (bw / 2.0);
                    let disc = (half * half - w0sq).sqrt();
                    poles.push(half + disc);
                    poles.push(half - disc);
                }
                let f0 = fs / PI * (w0sq.sqrt() / (2.0 * fs)).atan();
                (poles, Zeros::Both, f0)
            }
        };

        let digital: Vec<Complex64> = analog_poles.iter().map(|&s| bilinear(s, fs)).collect();
        let dens = pole_sections(&digital);
        let z_ref = Complex64::from_polar(1.0, -2.0 * PI * ref_freq / fs);
        let sections = dens
            .into_iter()
            .map(|a| {
                let first_order = a[2] == 0.0;
                let b = match (zero_pattern, first_order) {
                    (Zeros::AtNyquist, false) => [1.0, 2.0, 1.0],
                    (Zeros::AtNyquist, true) => [1.0, 1.0, 0.0],
                    (Zeros::AtDc, false) => [1.0, -2.0, 1.0],
                    (Zeros::AtDc, true) => [1.0, -1.0, 0.0],
                    (Zeros::Both, _) => [1.0, 0.0, -1.0],
                };
                let mut sec = Biquad { b, a };
                let g = sec.response(z_ref).norm();
                for v in sec.b.iter_mut() {
                    *v /= g;
                }
                sec
            })
            .collect();
        Ok(Sos {
            sections,
            band,
            order,
            sample_rate_hz,
        })
    }

    /// Complex frequency response at `f_hz`.
    pub fn response(&self, f_hz: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f_hz / self.sample_rate_hz);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Causal filtering from zero initial state (transposed direct form II).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.apply_in_place(&mut y);
        y
    }

    pub fn apply_in_place(&self, y: &mut [f64]) {
        for s in &self.sections {
            let (b0, b1, b2) = (s.b[0], s.b[1], s.b[2]);
            let (a1, a2) = (s.a[1], s.a[2]);
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let xi = *v;
                let yi = b0 * xi + z1;
                z1 = b1 * xi - a1 * yi + z2;
                z2 = b2 * xi - a2 * yi;
                *v = yi;
            }
        }
    }

    /// Samples for the slowest pole to decay by 60 dB.
    pub fn settling_samples(&self) -> usize {
        let r_max = self
            .sections
            .iter()
            .map(|s| {
                // roots of z^2 + a1 z + a2
                let (a1, a2) = (s.a[1], s.a[2]);
                let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
                let r1 = ((-a1 + disc) / 2.0).norm();
                let r2 = ((-a1 - disc) / 2.0).norm();
                r1.max(r2)
            })
            .fold(0.0, f64::max);
        if r_max <= 0.0 {
            return 1;
        }
        if r_max >= 1.0 {
            return usize::MAX / 4;
        }
        ((1e-3f64).ln() / r_max.ln()).ceil() as usize
    }

    /// Forward-backward filtering with odd edge reflection of three settling
    /// lengths (capped at `len - 1`). Net phase is zero and the magnitude
    /// response is squared.
    pub fn apply_zero_phase(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.settling_samples().saturating_mul(3).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0], x[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
        self.apply_in_place(&mut ext);
        ext.reverse();
        self.apply_in_place(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

#[derive(Debug, Clone, Copy)]
enum Zeros {
    AtDc,
    AtNyquist,
    Both,
}
