use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// The common 1e-4..0.02 ramp over 1000 steps, rescaled to 100 steps so
    /// the terminal marginal is still close to standard normal.
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.steps, c.beta_start, c.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Fixed reverse-process variance.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.beta(t)
    }
}

pub fn standard_normal_matrix(rng: &mut SimRng, dim: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

/// Closed-form `q(x_t | x_0)`: returns `(x_t, noise)`.
pub fn forward_diffuse(
    x0: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut SimRng,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if t > schedule.steps() {
        return Err(Error::invalid(format!("step {t} outside 0..={}", schedule.steps())));
    }
    let ab = schedule.alpha_bar(t);
    let z = standard_normal_matrix(rng, x0.dim());
    let xt = x0 * ab.sqrt() + &z * (1.0 - ab).sqrt();
    Ok((xt, z))
}

/// One application of the single-step kernel `q(x_t | x_{t-1})`.
pub fn diffuse_step(x: &Array2<f64>, t: usize, schedule: &NoiseSchedule, rng: &mut SimRng) -> Result<Array2<f64>> {
    schedule.check(t)?;
    let b = schedule.beta(t);
    let z = standard_normal_matrix(rng, x.dim());
    Ok(x * (1.0 - b).sqrt() + &z * b.sqrt())
}

/// Reverse-process mean implied by a noise prediction.
pub fn posterior_mean(xt: &Array2<f64>, eps: &Array2<f64>, t: usize, schedule: &NoiseSchedule) -> Array2<f64> {
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    (xt - &(eps * coef)) / schedule.alpha(t).sqrt()
}

/// One reverse step from a noise prediction: the mean plus `sqrt(beta_t)`
/// noise, or the mean alone at `t = 1`.
pub fn reverse_step(
    xt: &Array2<f64>,
    eps: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut SimRng,
) -> Result<Array2<f64>> {
    schedule.check(t)?;
    if !eps.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalFailure {
            tensor: "predicted_noise".into(),
            detail: format!("non-finite value at step {t}"),
        });
    }
    let mu = posterior_mean(xt, eps, t, schedule);
    if t == 1 {
        return Ok(mu);
    }
    let z = standard_normal_matrix(rng, xt.dim());
    Ok(mu + z * schedule.sigma2(t).sqrt())
}

/// One-step estimate of `x_0` from `x_t` and a noise prediction.
pub fn predict_x0(xt: &Array2<f64>, eps: &Array2<f64>, t: usize, schedule: &NoiseSchedule) -> Array2<f64> {
    let ab = schedule.alpha_bar(t);
    (xt - &(eps * (1.0 - ab).sqrt())) / ab.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, rng_from_seed};

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.betas.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
        // unit-variance x0 stays unit variance: ab + (1 - ab) = 1
        for t in 1..=s.steps() {
            let ab = s.alpha_bar(t);
            assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-12);
        }
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn zero_step_is_identity() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let x0 = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let (xt, _) = forward_diffuse(&x0, 0, &s, &mut rng_from_seed(0)).unwrap();
        assert_eq!(xt, x0);
        assert!(forward_diffuse(&x0, 101, &s, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn closed_form_matches_iterated_steps() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let x0 = Array2::from_shape_vec((1, 3), vec![1.5, -0.7, 0.2]).unwrap();
        let n = 100_000;
        let t = 13;
        let (mut s1, mut s2, mut c1, mut c2) = (vec![0.0; 3], vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]);
        let mut rng_a = derive_rng(1, &[0]);
        let mut rng_b = derive_rng(1, &[1]);
        for _ in 0..n {
            let (xt, _) = forward_diffuse(&x0, t, &s, &mut rng_a).unwrap();
            let mut x = x0.clone();
            for k in 1..=t {
                x = diffuse_step(&x, k, &s, &mut rng_b).unwrap();
            }
            for j in 0..3 {
                s1[j] += xt[[0, j]];
                s2[j] += xt[[0, j]].powi(2);
                c1[j] += x[[0, j]];
                c2[j] += x[[0, j]].powi(2);
            }
        }
        let nn = n as f64;
        let ab = s.alpha_bar(t);
        for j in 0..3 {
            let (m_a, m_b) = (s1[j] / nn, c1[j] / nn);
            let (v_a, v_b) = (s2[j] / nn - m_a * m_a, c2[j] / nn - m_b * m_b);
            // mean: se of a difference of two independent means
            let se_m = ((v_a + v_b) / nn).sqrt();
            assert!((m_a - m_b).abs() < 3.0 * se_m, "mean {m_a} vs {m_b}");
            // variance: Gaussian se of a sample variance is v * sqrt(2 / n)
            let se_v = (2.0 / nn).sqrt() * (v_a * v_a + v_b * v_b).sqrt();
            assert!((v_a - v_b).abs() < 3.0 * se_v, "var {v_a} vs {v_b}");
            assert!((m_a - ab.sqrt() * x0[[0, j]]).abs() < 3.0 * (v_a / nn).sqrt());
        }
    }

    #[test]
    fn terminal_marginal_is_near_standard_normal() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let x0 = Array2::from_elem((1, 1), 3.0);
        let ab = s.alpha_bar(s.steps());
        assert!(ab.sqrt() * 3.0 < 0.05 * 3.0);
        let mut rng = rng_from_seed(4);
        let n = 20_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| forward_diffuse(&x0, s.steps(), &s, &mut rng).unwrap().0[[0, 0]])
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 0.05 * 3.0);
        assert!((v - 1.0).abs() < 0.05);
    }

    #[test]
    fn sigma_is_beta_and_last_step_is_mean() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        for t in 1..=s.steps() {
            assert_eq!(s.sigma2(t), s.betas[t - 1]);
        }
        let xt = Array2::from_elem((2, 2), 0.3);
        let eps = Array2::from_elem((2, 2), 0.1);
        let a = reverse_step(&xt, &eps, 1, &s, &mut rng_from_seed(0)).unwrap();
        assert_eq!(a, posterior_mean(&xt, &eps, 1, &s));
        let b1 = reverse_step(&xt, &eps, 5, &s, &mut rng_from_seed(9)).unwrap();
        let b2 = reverse_step(&xt, &eps, 5, &s, &mut rng_from_seed(9)).unwrap();
        assert_eq!(b1, b2);
        let bad = Array2::from_elem((2, 2), f64::NAN);
        let e = reverse_step(&xt, &bad, 5, &s, &mut rng_from_seed(9)).unwrap_err();
        assert!(matches!(e, Error::NumericalFailure { ref tensor, .. } if tensor == "predicted_noise"));
    }

    #[test]
    fn oracle_noise_shrinks_error_along_the_chain() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let mut rng = rng_from_seed(5);
        let x0 = standard_normal_matrix(&mut rng, (4, 6));
        let (mut x, _) = forward_diffuse(&x0, s.steps(), &s, &mut rng).unwrap();
        let err = |x: &Array2<f64>| (x - &x0).mapv(|v| v * v).sum().sqrt();
        let mut prev = err(&x);
        for t in (1..=s.steps()).rev() {
            let ab = s.alpha_bar(t);
            let eps = (&x - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
            x = posterior_mean(&x, &eps, t, &s);
            let e = err(&x);
            assert!(e < prev, "step {t}: {e} >= {prev}");
            prev = e;
        }
        assert!(prev < 1e-9);
    }
}
