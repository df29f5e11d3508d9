use ndarray::Array2;

use super::model::{init_params, loss_graph, Batch, ModelConfig, Net, ParamStore, TokenShapes};
use super::schedule::{reverse_step, standard_normal_matrix, NoiseSchedule};
use super::tape::Tape;
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Conditional denoiser with its extractors and unpatcher, operating on
/// normalised `[channels x samples]` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffuser {
    pub config: ModelConfig,
    pub shapes: TokenShapes,
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
}

impl Diffuser {
    pub fn new(config: ModelConfig, shapes: TokenShapes) -> Result<Self> {
        let params = init_params(&config, &shapes)?;
        Self::from_parts(config, shapes, params)
    }

    pub fn from_parts(config: ModelConfig, shapes: TokenShapes, params: ParamStore) -> Result<Self> {
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        Ok(Diffuser {
            config,
            shapes,
            params,
            schedule,
        })
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = loss_graph(&mut tape, &self.config, &self.shapes, &self.params, batch, &self.schedule);
        let v = tape.value(loss)[[0, 0]];
        check_loss(v)?;
        Ok(v)
    }

    /// Loss and one gradient per parameter tensor, in store order. Frozen
    /// tensors get gradients too; the optimiser skips them.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let (net, loss) = loss_graph(&mut tape, &self.config, &self.shapes, &self.params, batch, &self.schedule);
        let v = tape.value(loss)[[0, 0]];
        check_loss(v)?;
        let mut grads = tape.backward(loss);
        let out = net
            .vars()
            .iter()
            .zip(&self.params.tensors)
            .map(|(&var, t)| grads[var].take().unwrap_or_else(|| Array2::zeros(t.value.dim())))
            .collect();
        Ok((v, out))
    }

    /// Source feature tokens `[n_cond_tokens x d_model]` for one sample.
    pub fn source_tokens(&self, cond: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_cond(cond)?;
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, &self.config, &self.shapes, &self.params);
        let x = tape.leaf(self.shapes.patchify(cond));
        let f = net.extract_source(&mut tape, x);
        Ok(tape.value(f).clone())
    }

    /// Target latent tokens `[n_tokens x d_model]` for one sample.
    pub fn target_tokens(&self, target: &Array2<f64>) -> Result<Array2<f64>> {
        if target.dim() != (self.shapes.target_channels, self.shapes.n_samples) {
            return Err(Error::invalid(format!(
                "target of shape {:?}, model expects {:?}",
                target.dim(),
                (self.shapes.target_channels, self.shapes.n_samples)
            )));
        }
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, &self.config, &self.shapes, &self.params);
        let x = tape.leaf(self.shapes.patchify(target));
        let f = net.extract_target(&mut tape, x);
        Ok(tape.value(f).clone())
    }

    /// Latent tokens back to a normalised `[channels x samples]` matrix.
    pub fn unpatch_tokens(&self, x0: &Array2<f64>) -> Result<Array2<f64>> {
        if x0.dim() != (self.shapes.n_tokens(), self.config.d_model) {
            return Err(Error::invalid(format!(
                "latent of shape {:?}, model expects {:?}",
                x0.dim(),
                (self.shapes.n_tokens(), self.config.d_model)
            )));
        }
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, &self.config, &self.shapes, &self.params);
        let x = tape.leaf(x0.clone());
        let y = net.unpatch(&mut tape, x);
        Ok(self.shapes.unpatchify(tape.value(y)))
    }

    fn check_cond(&self, cond: &Array2<f64>) -> Result<()> {
        if cond.dim() != (self.shapes.cond_channels, self.shapes.n_samples) {
            return Err(Error::invalid(format!(
                "conditioning of shape {:?}, model expects {:?}",
                cond.dim(),
                (self.shapes.cond_channels, self.shapes.n_samples)
            )));
        }
        Ok(())
    }

    /// Noise prediction for stacked latents sharing one step.
    pub fn predict_noise(&self, xt: &Array2<f64>, t: usize, ctx: &Array2<f64>, groups: usize) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, &self.config, &self.shapes, &self.params);
        let x = tape.leaf(xt.clone());
        let c = tape.leaf(ctx.clone());
        let tr = net.denoise(&mut tape, x, &vec![t; groups], c);
        Ok(tape.value(tr.eps).clone())
    }

    /// Stacked conditioning context for a set of samples.
    pub fn context(&self, conds: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let mut stacked = Vec::with_capacity(conds.len());
        for c in conds {
            self.check_cond(c)?;
            stacked.push(self.shapes.patchify(c));
        }
        let views: Vec<_> = stacked.iter().map(|a| a.view()).collect();
        let x = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, &self.config, &self.shapes, &self.params);
        let x = tape.leaf(x);
        let f = net.extract_source(&mut tape, x);
        let c = net.context(&mut tape, f);
        Ok(tape.value(c).clone())
    }

    /// Full reverse chain for each conditioning matrix, each driven by its
    /// own generator; returns latent `x_0` estimates.
    pub fn sample_latents(&self, conds: &[&Array2<f64>], rngs: &mut [SimRng]) -> Result<Vec<Array2<f64>>> {
        if conds.len() != rngs.len() {
            return Err(Error::invalid("one generator per sample required"));
        }
        if conds.is_empty() {
            return Ok(Vec::new());
        }
        let ctx = self.context(conds)?;
        let n = self.shapes.n_tokens();
        let d = self.config.d_model;
        let mut xs: Vec<Array2<f64>> = rngs.iter_mut().map(|r| standard_normal_matrix(r, (n, d))).collect();
        for t in (1..=self.schedule.steps()).rev() {
            let views: Vec<_> = xs.iter().map(|a| a.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("same widths");
            let eps = self.predict_noise(&stacked, t, &ctx, conds.len())?;
            for (i, (x, rng)) in xs.iter_mut().zip(rngs.iter_mut()).enumerate() {
                let e = eps.slice(ndarray::s![i * n..(i + 1) * n, ..]).to_owned();
                *x = reverse_step(x, &e, t, &self.schedule, rng)?;
            }
        }
        Ok(xs)
    }

    /// Sample and unpatch: normalised targets.
    pub fn sample(&self, conds: &[&Array2<f64>], rngs: &mut [SimRng]) -> Result<Vec<Array2<f64>>> {
        self.sample_latents(conds, rngs)?
            .iter()
            .map(|x| self.unpatch_tokens(x))
            .collect()
    }
}

fn check_loss(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalFailure {
            tensor: "loss".into(),
            detail: format!("loss evaluated to {v}"),
        })
    }
}
