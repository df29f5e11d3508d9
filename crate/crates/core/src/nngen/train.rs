use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::diffuser::Diffuser;
use super::model::{Batch, ParamStore};
use crate::error::{Error, Result};
use crate::rng::derive_rng;

const TAG_SHUFFLE: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_EVAL: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Decay of the exponential moving average of the weights that is
    /// validated and returned; 0 uses the raw weights.
    pub ema_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Noise draws per sample in the fixed evaluation set.
    pub eval_draws: usize,
    /// Fraction of subjects held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            ema_decay: 0.0,
            patience: 40,
            eval_draws: 4,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1)".into()));
        }
        if self.eval_draws == 0 {
            return Err(Error::Config("eval_draws must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Epoch 0 is the untrained model.
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let v = e.val.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train, v));
        }
        s
    }
}

pub type Pair = (Array2<f64>, Array2<f64>);

/// Loss over a fixed set of draws (`eval_draws` per sample).
pub fn eval_loss(model: &Diffuser, data: &[Pair], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, chunk) in data.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<_> = chunk.iter().map(|(a, b)| (a, b)).collect();
        for k in 0..cfg.eval_draws {
            let mut rng = derive_rng(cfg.seed, &[TAG_EVAL, i as u64, k as u64]);
            let b = Batch::draw(&refs, &model.shapes, model.config.d_model, &model.schedule, &mut rng)?;
            total += model.loss(&b)? * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(total / count as f64)
}

struct AdamW {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: i32,
}

impl AdamW {
    fn new(params: &ParamStore) -> Self {
        let z: Vec<Array2<f64>> = params.tensors.iter().map(|t| Array2::zeros(t.value.dim())).collect();
        AdamW {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ParamStore, grads: &mut [Array2<f64>], cfg: &TrainConfig) {
        let norm: f64 = params
            .tensors
            .iter()
            .zip(grads.iter())
            .filter(|(t, _)| t.trainable)
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            if !t.trainable {
                continue;
            }
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            self.v[i].zip_mut_with(g, |v, g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let decay = if t.value.nrows() > 1 { cfg.weight_decay } else { 0.0 };
            let lr = cfg.learning_rate;
            ndarray::Zip::from(&mut t.value)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, m, v| {
                    let upd = (m / bc1) / ((v / bc2).sqrt() + cfg.adam_eps);
                    *p -= lr * (upd + decay * *p);
                });
        }
    }
}

/// Mini-batch training with early stopping on `val` (or on the training
/// loss when `val` is empty). Returns the best parameters seen.
pub fn train(model: &Diffuser, train: &[Pair], val: &[Pair], cfg: &TrainConfig) -> Result<(ParamStore, LossCurve)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut m = model.clone();
    let mut ema = m.clone();
    let mut opt = AdamW::new(&m.params);
    let initial = eval_loss(&m, train, cfg)?;
    let initial_val = if val.is_empty() {
        None
    } else {
        Some(eval_loss(&m, val, cfg)?)
    };
    let mut curve = LossCurve {
        epochs: vec![EpochLoss {
            epoch: 0,
            train: initial,
            val: initial_val,
        }],
        best_epoch: 0,
    };
    let mut best = (initial_val.unwrap_or(initial), m.params.clone());
    let mut since_best = 0;
    let mut over = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<_> = idx.iter().map(|&i| (&train[i].0, &train[i].1)).collect();
            let mut rng = derive_rng(cfg.seed, &[TAG_BATCH, epoch as u64, bi as u64]);
            let batch = Batch::draw(&refs, &m.shapes, m.config.d_model, &m.schedule, &mut rng)?;
            let (loss, mut grads) = m.loss_and_grads(&batch).map_err(|e| match e {
                Error::NumericalFailure { tensor, detail } => Error::NumericalFailure {
                    tensor,
                    detail: format!("{detail} (epoch {epoch}, batch {bi})"),
                },
                other => other,
            })?;
            opt.update(&mut m.params, &mut grads, cfg);
            if let Err(name) = m.params.is_finite() {
                return Err(Error::NumericalFailure {
                    tensor: name,
                    detail: format!("non-finite after update (epoch {epoch}, batch {bi})"),
                });
            }
            let k = cfg.ema_decay;
            for (e, p) in ema.params.tensors.iter_mut().zip(&m.params.tensors) {
                e.value.zip_mut_with(&p.value, |e, p| *e = k * *e + (1.0 - k) * p);
            }
            sum += loss * idx.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(eval_loss(&ema, val, cfg)?)
        };
        curve.epochs.push(EpochLoss {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        if train_loss > 10.0 * initial {
            over += 1;
            if over >= 3 {
                return Err(Error::Divergence {
                    epoch,
                    loss: train_loss,
                    initial,
                    curve: curve.epochs.iter().map(|e| e.train).collect(),
                });
            }
        } else {
            over = 0;
        }
        let monitored = val_loss.unwrap_or(train_loss);
        if monitored < best.0 {
            best = (monitored, ema.params.clone());
            curve.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.1, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngen::model::{ModelConfig, TokenShapes};
    use crate::nngen::schedule::ScheduleConfig;

    fn toy() -> (Diffuser, Vec<Pair>) {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_blocks: 1,
            schedule: ScheduleConfig {
                steps: 20,
                beta_start: 0.01,
                beta_end: 0.4,
            },
            ..ModelConfig::default()
        };
        let shapes = TokenShapes::new(2, 2, 4, None).unwrap();
        let d = Diffuser::new(cfg, shapes).unwrap();
        let pat = |s: f64| Array2::from_shape_fn((2, 4), |(r, c)| s * if (r + c) % 2 == 0 { 1.0 } else { -1.0 });
        let cond = |k: usize| Array2::from_shape_fn((2, 4), |(r, _)| if r == k { 1.0 } else { 0.0 });
        let data = (0..32).map(|i| (cond(i % 2), pat(if i % 2 == 0 { 1.0 } else { -1.0 }))).collect();
        (d, data)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_reproducible() {
        let (d, data) = toy();
        let a = train(&d, &data, &[], &quick()).unwrap();
        let b = train(&d, &data, &[], &quick()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.epochs.len(), 5);
    }

    #[test]
    fn divergence_is_reported_with_curve() {
        let (d, data) = toy();
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 1e6,
            grad_clip: 1e9,
            weight_decay: 0.0,
            ..quick()
        };
        match train(&d, &data, &[], &cfg) {
            Err(Error::Divergence { curve, initial, .. }) => {
                assert!(curve.len() >= 4);
                assert!(curve.last().unwrap() > &(10.0 * initial));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn eval_loss_is_fixed() {
        let (d, data) = toy();
        let cfg = quick();
        assert_eq!(eval_loss(&d, &data, &cfg).unwrap(), eval_loss(&d, &data, &cfg).unwrap());
    }
}
