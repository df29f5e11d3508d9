use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{standard_normal_matrix, NoiseSchedule, ScheduleConfig};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// GELU between the two source-extractor layers; off makes it linear.
    pub extractor_nonlinear: bool,
    /// Samples per temporal patch; `None` takes the whole epoch as one patch.
    pub temporal_patch: Option<usize>,
    /// Weight of the signal reconstruction term.
    pub lambda_recon: f64,
    /// Let the unpatcher drift from the exact inverse of the target patch
    /// embedding. Off keeps generated signals at full bandwidth.
    pub train_unpatch: bool,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            ffn_mult: 2,
            extractor_nonlinear: true,
            temporal_patch: None,
            lambda_recon: 1.0,
            train_unpatch: false,
            schedule: ScheduleConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be > 0".into()));
        }
        if !(self.lambda_recon >= 0.0 && self.lambda_recon.is_finite()) {
            return Err(Error::Config("lambda_recon must be >= 0".into()));
        }
        NoiseSchedule::from_config(&self.schedule)?;
        Ok(())
    }
}

/// Token layout derived from the data: each channel's epoch is cut into
/// `patch_len`-sample temporal patches, one token per (channel, patch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenShapes {
    pub cond_channels: usize,
    pub target_channels: usize,
    pub n_samples: usize,
    pub patch_len: usize,
}

impl TokenShapes {
    pub fn new(cond_channels: usize, target_channels: usize, n_samples: usize, temporal_patch: Option<usize>) -> Result<Self> {
        let patch_len = temporal_patch.unwrap_or(n_samples);
        if patch_len == 0 || n_samples % patch_len != 0 {
            return Err(Error::Config(format!(
                "temporal patch {patch_len} does not divide {n_samples} samples"
            )));
        }
        Ok(TokenShapes {
            cond_channels,
            target_channels,
            n_samples,
            patch_len,
        })
    }

    pub fn patches_per_channel(&self) -> usize {
        self.n_samples / self.patch_len
    }

    pub fn n_cond_tokens(&self) -> usize {
        self.cond_channels * self.patches_per_channel()
    }

    pub fn n_tokens(&self) -> usize {
        self.target_channels * self.patches_per_channel()
    }

    /// `(spatial patch, temporal patch)` of token `i`.
    pub fn token_grid(&self, i: usize) -> (usize, usize) {
        (i / self.patches_per_channel(), i % self.patches_per_channel())
    }

    /// `[channels x samples]` to `[tokens x patch_len]`.
    pub fn patchify(&self, x: &Array2<f64>) -> Array2<f64> {
        let n = x.nrows() * self.patches_per_channel();
        x.as_standard_layout()
            .to_owned()
            .into_shape_with_order((n, self.patch_len))
            .expect("row-major reshape")
    }

    pub fn unpatchify(&self, tokens: &Array2<f64>) -> Array2<f64> {
        let c = tokens.nrows() / self.patches_per_channel();
        tokens
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((c, self.n_samples))
            .expect("row-major reshape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new(tensors: Vec<Tensor>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tensors.iter().enumerate() {
            if index.insert(t.name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate tensor `{}`", t.name)));
            }
        }
        Ok(ParamStore { tensors, index })
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.tensors[self.index[name]].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let i = self.index[name];
        &mut self.tensors[i].value
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn is_finite(&self) -> std::result::Result<(), String> {
        match self.tensors.iter().find(|t| !t.value.iter().all(|v| v.is_finite())) {
            Some(t) => Err(t.name.clone()),
            None => Ok(()),
        }
    }
}

struct Init<'a> {
    rng: &'a mut SimRng,
    out: Vec<Tensor>,
}

impl Init<'_> {
    fn push(&mut self, name: String, value: Array2<f64>, trainable: bool) {
        self.out.push(Tensor { name, value, trainable });
    }

    fn normal(&mut self, name: String, dim: (usize, usize), std: f64) {
        let v = Array2::from_shape_simple_fn(dim, || std * self.rng.sample::<f64, _>(StandardNormal));
        self.push(name, v, true);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        self.normal(format!("{prefix}.w"), (fan_in, fan_out), gain / (fan_in as f64).sqrt());
        self.push(format!("{prefix}.b"), Array2::zeros((1, fan_out)), true);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.g"), Array2::ones((1, d)), true);
        self.push(format!("{prefix}.b"), Array2::zeros((1, d)), true);
    }

    fn attention(&mut self, prefix: &str, d: usize, out_gain: f64) {
        for m in ["wq", "wk", "wv"] {
            self.normal(format!("{prefix}.{m}"), (d, d), 1.0 / (d as f64).sqrt());
        }
        self.linear(&format!("{prefix}.o"), d, d, out_gain);
    }
}

/// `rows x cols` with orthonormal rows (`rows <= cols`).
pub fn orthonormal_rows(rng: &mut SimRng, rows: usize, cols: usize) -> Array2<f64> {
    assert!(rows <= cols);
    let mut m = standard_normal_matrix(rng, (rows, cols));
    for i in 0..rows {
        for _ in 0..2 {
            for j in 0..i {
                let d = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-d, &rj);
            }
        }
        let n = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / n);
    }
    m
}

pub fn init_params(config: &ModelConfig, shapes: &TokenShapes) -> Result<ParamStore> {
    config.validate()?;
    let d = config.d_model;
    let p = shapes.patch_len;
    if p > d {
        return Err(Error::Config(format!(
            "patch of {p} samples does not fit d_model {d}; set a smaller temporal_patch"
        )));
    }
    let mut rng = derive_rng(config.init_seed, &[0x1417]);
    let mut init = Init {
        rng: &mut rng,
        out: Vec::new(),
    };
    let residual_gain = 1.0 / (2.0 * config.n_blocks as f64).sqrt();
    init.linear("src_extractor.l1", p, d, 1.0);
    init.linear("src_extractor.l2", d, d, 1.0);
    let proj = orthonormal_rows(init.rng, p, d);
    init.push("unpatch.w".into(), proj.t().to_owned(), config.train_unpatch);
    init.push("unpatch.b".into(), Array2::zeros((1, p)), config.train_unpatch);
    init.push("tgt_extractor.proj".into(), proj, false);
    init.normal("cond_pos".into(), (shapes.n_cond_tokens(), d), 0.5);
    init.normal("token_pos".into(), (shapes.n_tokens(), d), 0.5);
    init.norm("cond_ln", d);
    init.linear("in_proj", d, d, 1.0);
    init.linear("time.l1", d, d, 1.0);
    init.linear("time.l2", d, d, 1.0);
    let f = d * config.ffn_mult;
    for l in 0..config.n_blocks {
        let b = format!("blocks.{l}");
        init.norm(&format!("{b}.ln1"), d);
        init.attention(&format!("{b}.self"), d, residual_gain);
        init.norm(&format!("{b}.ln2"), d);
        init.attention(&format!("{b}.cross"), d, residual_gain);
        init.norm(&format!("{b}.ln3"), d);
        init.linear(&format!("{b}.ffn.l1"), d, f, 1.0);
        init.linear(&format!("{b}.ffn.l2"), f, d, residual_gain);
    }
    init.norm("out_ln", d);
    init.linear("out_proj", d, d, 0.0);
    init.push("out_skip".into(), Array2::zeros((d, d)), true);
    // step-dependent gains start as the identity
    for m in ["mod.out_scale", "mod.skip_scale"] {
        init.push(format!("{m}.w"), Array2::zeros((d, d)), true);
        init.push(format!("{m}.b"), Array2::ones((1, d)), true);
    }
    init.push("mod.out_shift.w".into(), Array2::zeros((d, d)), true);
    init.push("mod.out_shift.b".into(), Array2::zeros((1, d)), true);
    ParamStore::new(init.out)
}

/// Sinusoidal embedding of step `t`, one row.
pub fn timestep_embedding(t: usize, d: usize) -> Array2<f64> {
    let half = d / 2;
    Array2::from_shape_fn((1, d), |(_, j)| {
        let k = j % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        if j < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Parameters bound as leaves on one tape.
pub struct Net<'a> {
    pub config: &'a ModelConfig,
    pub shapes: &'a TokenShapes,
    store: &'a ParamStore,
    schedule: NoiseSchedule,
    vars: Vec<Var>,
}

/// Outputs of one denoiser pass. The head predicts `v`; noise and clean
/// estimates are formed from it as `eps = s*x_t + a*v`, `x0 = a*x_t - s*v`
/// with `a = sqrt(alpha_bar)`, `s = sqrt(1 - alpha_bar)`.
pub struct DenoiseTrace {
    pub eps: Var,
    pub x0: Var,
    pub attention: Vec<Var>,
}

/// Row order that sorts each group of `rows` rows lexicographically.
fn canonical_order(x: &Array2<f64>, rows: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(x.nrows());
    for g in 0..x.nrows() / rows {
        let mut idx: Vec<usize> = (g * rows..(g + 1) * rows).collect();
        idx.sort_by(|&a, &b| {
            x.row(a)
                .iter()
                .zip(x.row(b).iter())
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        perm.extend(idx);
    }
    perm
}

impl<'a> Net<'a> {
    pub fn bind(tape: &mut Tape, config: &'a ModelConfig, shapes: &'a TokenShapes, store: &'a ParamStore) -> Self {
        let vars = store.tensors.iter().map(|t| tape.leaf(t.value.clone())).collect();
        Net {
            config,
            shapes,
            store,
            schedule: NoiseSchedule::from_config(&config.schedule).expect("validated schedule"),
            vars,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn p(&self, name: &str) -> Var {
        self.vars[self.store.position(name).unwrap_or_else(|| panic!("missing tensor {name}"))]
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let h = tape.matmul(x, self.p(&format!("{prefix}.w")));
        tape.add_bias(h, self.p(&format!("{prefix}.b")))
    }

    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let h = tape.layer_norm(x);
        let h = tape.mul_row(h, self.p(&format!("{prefix}.g")));
        tape.add_bias(h, self.p(&format!("{prefix}.b")))
    }

    fn attention(&self, tape: &mut Tape, x: Var, ctx: Var, prefix: &str, groups: usize) -> (Var, Var) {
        let q = tape.matmul(x, self.p(&format!("{prefix}.wq")));
        let k = tape.matmul(ctx, self.p(&format!("{prefix}.wk")));
        let v = tape.matmul(ctx, self.p(&format!("{prefix}.wv")));
        let a = tape.attention(q, k, v, self.config.n_heads, groups);
        (self.linear(tape, a, &format!("{prefix}.o")), a)
    }

    /// Source extractor on stacked patches `[B * n_cond_tokens x patch_len]`.
    pub fn extract_source(&self, tape: &mut Tape, patches: Var) -> Var {
        let h = self.linear(tape, patches, "src_extractor.l1");
        let h = if self.config.extractor_nonlinear {
            tape.gelu(h)
        } else {
            h
        };
        self.linear(tape, h, "src_extractor.l2")
    }

    /// Target extractor: fixed linear projection of target patches.
    pub fn extract_target(&self, tape: &mut Tape, patches: Var) -> Var {
        tape.matmul(patches, self.p("tgt_extractor.proj"))
    }

    /// Conditioning context: features plus positions, normalised, rows put
    /// in a canonical order within each sample.
    pub fn context(&self, tape: &mut Tape, features: Var) -> Var {
        let c = tape.add_tiled(features, self.p("cond_pos"));
        let c = self.norm(tape, c, "cond_ln");
        let perm = canonical_order(tape.value(c), self.shapes.n_cond_tokens());
        tape.permute_rows(c, perm)
    }

    /// Noise and clean-signal predictions for stacked `x_t` given per-sample steps.
    pub fn denoise(&self, tape: &mut Tape, xt: Var, steps: &[usize], ctx: Var) -> DenoiseTrace {
        let b = steps.len();
        let d = self.config.d_model;
        let mut emb = Array2::zeros((b, d));
        for (i, &t) in steps.iter().enumerate() {
            emb.row_mut(i).assign(&timestep_embedding(t, d).row(0));
        }
        let emb = tape.leaf(emb);
        let te = self.linear(tape, emb, "time.l1");
        let te = tape.silu(te);
        let te = self.linear(tape, te, "time.l2");

        let mut h = self.linear(tape, xt, "in_proj");
        h = tape.add_tiled(h, self.p("token_pos"));
        h = tape.add_group(h, te, self.shapes.n_tokens());
        let mut attention = Vec::new();
        for l in 0..self.config.n_blocks {
            let pre = format!("blocks.{l}");
            let n = self.norm(tape, h, &format!("{pre}.ln1"));
            let (a, p) = self.attention(tape, n, n, &format!("{pre}.self"), b);
            attention.push(p);
            h = tape.add(h, a);
            let n = self.norm(tape, h, &format!("{pre}.ln2"));
            let (a, p) = self.attention(tape, n, ctx, &format!("{pre}.cross"), b);
            attention.push(p);
            h = tape.add(h, a);
            let n = self.norm(tape, h, &format!("{pre}.ln3"));
            let f = self.linear(tape, n, &format!("{pre}.ffn.l1"));
            let f = tape.gelu(f);
            let f = self.linear(tape, f, &format!("{pre}.ffn.l2"));
            h = tape.add(h, f);
        }
        let n = self.shapes.n_tokens();
        let h = self.norm(tape, h, "out_ln");
        let scale = self.linear(tape, te, "mod.out_scale");
        let shift = self.linear(tape, te, "mod.out_shift");
        let h = tape.mul_group(h, scale, n);
        let h = tape.add_group(h, shift, n);
        let out = self.linear(tape, h, "out_proj");
        // the normalised stream has lost the scale of x_t; a gated linear skip restores it
        let skip = tape.matmul(xt, self.p("out_skip"));
        let gain = self.linear(tape, te, "mod.skip_scale");
        let skip = tape.mul_group(skip, gain, n);
        let v = tape.add(out, skip);
        let a: Vec<f64> = steps.iter().map(|&t| self.schedule.alpha_bar(t).sqrt()).collect();
        let s: Vec<f64> = steps.iter().map(|&t| (1.0 - self.schedule.alpha_bar(t)).sqrt()).collect();
        let neg_s: Vec<f64> = s.iter().map(|v| -v).collect();
        DenoiseTrace {
            eps: tape.group_lin_comb(xt, v, s, a.clone(), n),
            x0: tape.group_lin_comb(xt, v, a, neg_s, n),
            attention,
        }
    }

    pub fn unpatch(&self, tape: &mut Tape, x0: Var) -> Var {
        self.linear(tape, x0, "unpatch")
    }
}

/// A training batch in token layout, samples stacked along rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub cond: Array2<f64>,
    pub target: Array2<f64>,
    pub steps: Vec<usize>,
    pub noise: Array2<f64>,
}

impl Batch {
    /// Stack `(cond, target)` channel-by-sample pairs, drawing a step and
    /// latent noise per sample from `rng`.
    pub fn draw(
        pairs: &[(&Array2<f64>, &Array2<f64>)],
        shapes: &TokenShapes,
        d_model: usize,
        schedule: &NoiseSchedule,
        rng: &mut SimRng,
    ) -> Result<Self> {
        let steps: Vec<usize> = pairs.iter().map(|_| rng.gen_range(1..=schedule.steps())).collect();
        let noise = standard_normal_matrix(rng, (pairs.len() * shapes.n_tokens(), d_model));
        Self::with_noise(pairs, shapes, steps, noise)
    }

    pub fn with_noise(
        pairs: &[(&Array2<f64>, &Array2<f64>)],
        shapes: &TokenShapes,
        steps: Vec<usize>,
        noise: Array2<f64>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut cond = Vec::with_capacity(pairs.len());
        let mut target = Vec::with_capacity(pairs.len());
        for (c, t) in pairs {
            if c.dim() != (shapes.cond_channels, shapes.n_samples) || t.dim() != (shapes.target_channels, shapes.n_samples) {
                return Err(Error::invalid(format!(
                    "sample shapes {:?}/{:?} do not match model {:?}",
                    c.dim(),
                    t.dim(),
                    shapes
                )));
            }
            cond.push(shapes.patchify(c));
            target.push(shapes.patchify(t));
        }
        let views: Vec<_> = cond.iter().map(|a| a.view()).collect();
        let cond = ndarray::concatenate(Axis(0), &views).expect("same widths");
        let views: Vec<_> = target.iter().map(|a| a.view()).collect();
        let target = ndarray::concatenate(Axis(0), &views).expect("same widths");
        Ok(Batch {
            cond,
            target,
            steps,
            noise,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The same batch repeated `k` times.
    pub fn repeated(&self, k: usize) -> Batch {
        let rep = |a: &Array2<f64>| {
            let views: Vec<_> = (0..k).map(|_| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("same widths")
        };
        Batch {
            cond: rep(&self.cond),
            target: rep(&self.target),
            steps: (0..k).flat_map(|_| self.steps.iter().copied()).collect(),
            noise: rep(&self.noise),
        }
    }
}

/// Mean over the batch of the noise-prediction error plus `lambda` times
/// the reconstruction error of the unpatched one-step estimate, both per
/// element.
pub fn loss_terms(
    tape: &mut Tape,
    eps_hat: Var,
    noise: &Array2<f64>,
    y_hat: Var,
    y: &Array2<f64>,
    lambda: f64,
    tokens_per_sample: usize,
) -> Var {
    let b = (noise.nrows() / tokens_per_sample) as f64;
    let n_lat = (tokens_per_sample * noise.ncols()) as f64;
    let n_y = (tokens_per_sample * y.ncols()) as f64;
    let w_eps = vec![1.0 / (b * n_lat); noise.nrows()];
    let w_y = vec![lambda / (b * n_y); y.nrows()];
    let l1 = tape.weighted_sse(eps_hat, noise.clone(), w_eps);
    let l2 = tape.weighted_sse(y_hat, y.clone(), w_y);
    tape.add(l1, l2)
}

/// Shapes every tensor must have for this configuration.
pub fn expected_shapes(config: &ModelConfig, shapes: &TokenShapes) -> Result<BTreeMap<String, (usize, usize)>> {
    let mut c = config.clone();
    c.init_seed = 0;
    Ok(init_params(&c, shapes)?
        .tensors
        .into_iter()
        .map(|t| (t.name, t.value.dim()))
        .collect())
}

/// Forward pass of the loss on a fresh tape.
pub fn loss_graph<'a>(
    tape: &mut Tape,
    config: &'a ModelConfig,
    shapes: &'a TokenShapes,
    store: &'a ParamStore,
    batch: &Batch,
    schedule: &NoiseSchedule,
) -> (Net<'a>, Var) {
    let net = Net::bind(tape, config, shapes, store);
    let n = shapes.n_tokens();
    let cond = tape.leaf(batch.cond.clone());
    let feats = net.extract_source(tape, cond);
    let ctx = net.context(tape, feats);
    let y = tape.leaf(batch.target.clone());
    let x0 = net.extract_target(tape, y);
    let abar: Vec<f64> = batch.steps.iter().map(|&t| schedule.alpha_bar(t)).collect();
    let noise = tape.leaf(batch.noise.clone());
    let xt = tape.group_lin_comb(
        x0,
        noise,
        abar.iter().map(|a| a.sqrt()).collect(),
        abar.iter().map(|a| (1.0 - a).sqrt()).collect(),
        n,
    );
    let trace = net.denoise(tape, xt, &batch.steps, ctx);
    let y_hat = net.unpatch(tape, trace.x0);
    let loss = loss_terms(tape, trace.eps, &batch.noise, y_hat, &batch.target, config.lambda_recon, n);
    (net, loss)
}

/// Slice of a stacked matrix belonging to sample `i`.
pub fn sample_rows(x: &Array2<f64>, i: usize, rows: usize) -> Array2<f64> {
    x.slice(s![i * rows..(i + 1) * rows, ..]).to_owned()
}
