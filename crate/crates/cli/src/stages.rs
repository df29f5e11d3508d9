//! One function per pipeline command. Every stage writes only below its
//! output directory and leaves its inputs untouched.

use std::path::{Path, PathBuf};
use std::time::Instant;

use neuroforge::fairness::{experiment_subset, fairness_experiment};
use neuroforge::hyperalign::{align_pair, AlignmentConfig};
use neuroforge::metrics::{evaluate, Provenance as ReportProvenance, TargetGenerator};
use neuroforge::nngen::{fit, load_checkpoint, save_checkpoint, TrainedModel};
use neuroforge::rng::{derive_seed, tag};
use neuroforge::signal::{
    bandpass_filter, load_container, save_container, ModalitySchema, PairedDataset, PairedSample, Provenance,
};
use neuroforge::simdata::{make_paired_dataset, save_ground_truth};
use neuroforge::{Error, Result};

use crate::config::PipelineConfig;
use crate::manifest::{hash_tree, sha256_hex, FileHash, RunManifest, CONFIG_FILE, MANIFEST_FILE};

const TAG_GENERATE: u64 = 0x6e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

pub struct Context {
    pub config: PipelineConfig,
    pub deterministic: bool,
    pub quiet: bool,
}

impl Context {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn canonical(p: &Path) -> PathBuf {
    std::fs::canonicalize(p)
        .or_else(|_| std::path::absolute(p))
        .unwrap_or_else(|_| p.to_path_buf())
}

/// Run `body` as stage `name` writing into `out`, then echo the config and
/// write the run manifest.
fn run_stage(
    ctx: &Context,
    name: &str,
    out: &Path,
    inputs: &[(&str, &Path)],
    body: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    let start = Instant::now();
    let out_c = canonical(out);
    for (role, p) in inputs {
        let pc = canonical(p);
        if pc.starts_with(&out_c) || out_c.starts_with(&pc) {
            return Err(Error::Config(format!(
                "{role} {} overlaps the output directory {}",
                p.display(),
                out.display()
            )));
        }
    }
    let mut input_hashes = Vec::new();
    for (role, p) in inputs {
        for h in hash_tree(p, p)? {
            input_hashes.push(FileHash {
                path: format!("{role}/{}", h.path),
                sha256: h.sha256,
            });
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_text = ctx.config.to_toml()?;
    let cfg_path = out.join(CONFIG_FILE);
    std::fs::write(&cfg_path, &config_text).map_err(|e| Error::io(&cfg_path, e))?;
    ctx.log(format!("[{name}] writing to {}", out.display()));
    body(out)?;
    let outputs = hash_tree(out, out)?
        .into_iter()
        .filter(|h| h.path != MANIFEST_FILE)
        .collect();
    let manifest = RunManifest {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        seed: ctx.config.seed,
        inputs: input_hashes,
        outputs,
        wall_time_s: (!ctx.deterministic).then(|| start.elapsed().as_secs_f64()),
    };
    manifest.write(out)?;
    ctx.log(format!("[{name}] done in {:.1} s", start.elapsed().as_secs_f64()));
    Ok(())
}

pub fn simulate(ctx: &Context, out: &Path) -> Result<()> {
    run_stage(ctx, "simulate", out, &[], |out| {
        let (ds, truth) = make_paired_dataset(&ctx.config.sim)?;
        ctx.log(format!("[simulate] {} samples from {} subjects", ds.len(), ds.subjects().len()));
        save_container(&ds, &out.join("dataset"))?;
        save_ground_truth(&truth, &out.join("truth"))
    })
}

pub fn preprocess(ctx: &Context, input: &Path, out: &Path) -> Result<()> {
    run_stage(ctx, "preprocess", out, &[("input", input)], |out| {
        let p = &ctx.config.preprocess;
        let mut ds = load_container(input)?;
        for s in &mut ds.samples {
            s.source_epoch = bandpass_filter(&s.source_epoch, p.eeg_band[0], p.eeg_band[1], p.eeg_order, p.zero_phase)?;
            if let Some([lo, hi]) = p.target_band {
                s.target_epoch = bandpass_filter(&s.target_epoch, lo, hi, p.target_order, p.zero_phase)?;
            }
        }
        let phase = if p.zero_phase { "zero-phase" } else { "causal" };
        ds.manifest.history.push(format!(
            "preprocess: source bandpass [{}, {}] Hz order {} {phase}",
            p.eeg_band[0], p.eeg_band[1], p.eeg_order
        ));
        if let Some([lo, hi]) = p.target_band {
            ds.manifest
                .history
                .push(format!("preprocess: target bandpass [{lo}, {hi}] Hz order {} {phase}", p.target_order));
        }
        save_container(&ds, &out.join("dataset"))
    })
}

/// Source epochs mapped onto the target channels and timestamps.
pub fn align_dataset(ds: &PairedDataset, cfg: &AlignmentConfig) -> Result<PairedDataset> {
    cfg.validate()?;
    let m = &ds.manifest;
    let mut samples = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let pair = align_pair(s, &m.source.geometry, &m.target.geometry, cfg)?;
        samples.push(PairedSample {
            source_epoch: pair.source,
            target_epoch: pair.target,
            ..s.clone()
        });
    }
    let mut manifest = m.clone();
    manifest.source = ModalitySchema {
        modality: format!("{}-conjugate", m.source.modality),
        units: m.source.units.clone(),
        ..m.target.clone()
    };
    manifest.lag_s = m.lag_s - cfg.tau_s;
    manifest.history.push(format!(
        "align: source onto {} grid, tau {} s, sigma {} s",
        m.target.modality, cfg.tau_s, cfg.sigma_s
    ));
    PairedDataset::new(manifest, samples)
}

/// A container whose source already lives on the target grid.
fn is_conjugate(ds: &PairedDataset) -> bool {
    let m = &ds.manifest;
    m.source.geometry.positions == m.target.geometry.positions && m.source.sample_rate_hz == m.target.sample_rate_hz
}

pub fn align(ctx: &Context, input: &Path, out: &Path) -> Result<()> {
    run_stage(ctx, "align", out, &[("input", input)], |out| {
        let ds = load_container(input)?;
        save_container(&align_dataset(&ds, &ctx.config.align)?, &out.join("dataset"))
    })
}

pub fn train(ctx: &Context, input: &Path, fairness_subset: bool, out: &Path) -> Result<()> {
    run_stage(ctx, "train", out, &[("input", input)], |out| {
        let cfg = &ctx.config;
        let mut ds = load_container(input)?;
        if fairness_subset {
            ds = experiment_subset(&ds, &cfg.fairness)?;
        }
        let mut alignment = cfg.align.clone();
        if is_conjugate(&ds) {
            // already aligned; skip the second mapping
            alignment.tau_s = 0.0;
        }
        ctx.log(format!(
            "[train] {} samples, {} epochs, d_model {}",
            ds.len(),
            cfg.train.epochs,
            cfg.model.d_model
        ));
        let model = fit(&ds, &cfg.model, &cfg.train, &alignment)?;
        let lc = &model.loss_curve;
        ctx.log(format!(
            "[train] best epoch {} of {}, val subjects {:?}",
            lc.best_epoch,
            lc.epochs.len() - 1,
            model.val_subjects
        ));
        save_checkpoint(&model, &out.join("checkpoint"))?;
        let p = out.join("loss_curve.csv");
        std::fs::write(&p, lc.to_csv()).map_err(|e| Error::io(&p, e))
    })
}

/// Seed of the generation draw for one sample; independent of which other
/// samples are generated alongside it.
pub fn sample_seed(seed: u64, s: &PairedSample) -> u64 {
    derive_seed(
        seed,
        &[TAG_GENERATE, tag(&s.subject_id), tag(&s.condition_label), s.trial as u64],
    )
}

pub fn generate_dataset(model: &TrainedModel, ds: &PairedDataset, split: Split, seed: u64) -> Result<PairedDataset> {
    if ds.manifest.target.channel_ids != model.target_schema.channel_ids {
        return Err(Error::Schema("input targets do not match the checkpoint's target schema".into()));
    }
    let keep = |s: &PairedSample| {
        !s.provenance.is_synthetic()
            && match split {
                Split::All => true,
                Split::Train => model.train_subjects.contains(&s.subject_id),
                Split::Val => model.val_subjects.contains(&s.subject_id),
            }
    };
    let picked: Vec<&PairedSample> = ds.samples.iter().filter(|s| keep(s)).collect();
    if picked.is_empty() {
        return Err(Error::invalid(format!("no real samples in the {split:?} split")));
    }
    let sources: Vec<_> = picked.iter().map(|s| s.source_epoch.clone()).collect();
    let seeds: Vec<u64> = picked.iter().map(|s| sample_seed(seed, s)).collect();
    let generated = model.generate(&sources, &seeds)?;
    let samples = picked
        .iter()
        .zip(generated)
        .map(|(s, g)| PairedSample {
            target_epoch: g,
            provenance: Provenance::Synthetic { parent_trial: s.trial },
            ..(*s).clone()
        })
        .collect();
    let mut manifest = ds.manifest.clone();
    manifest
        .history
        .push(format!("generate: {split:?} split, seed {seed}").to_lowercase());
    PairedDataset::new(manifest, samples)
}

pub fn generate(ctx: &Context, checkpoint: &Path, input: &Path, split: Split, out: &Path) -> Result<()> {
    run_stage(ctx, "generate", out, &[("checkpoint", checkpoint), ("input", input)], |out| {
        let model = load_checkpoint(checkpoint)?;
        let ds = load_container(input)?;
        let g = generate_dataset(&model, &ds, split, ctx.config.seed)?;
        ctx.log(format!("[generate] {} samples", g.len()));
        save_container(&g, &out.join("dataset"))
    })
}

fn manifest_id(dir: &Path) -> Result<String> {
    let p = dir.join("manifest.json");
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn eval(ctx: &Context, generated: &Path, reference: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let mut inputs = vec![("generated", generated), ("reference", reference)];
    if let Some(c) = checkpoint {
        inputs.push(("checkpoint", c));
    }
    run_stage(ctx, "eval", out, &inputs, |out| {
        let gen = load_container(generated)?;
        let reference_ds = load_container(reference)?;
        let model = checkpoint.map(load_checkpoint).transpose()?;
        let alignment = model.as_ref().map_or(&ctx.config.align, |m| &m.alignment);
        let provenance = ReportProvenance {
            dataset_id: manifest_id(reference)?,
            checkpoint_id: checkpoint.map(manifest_id).transpose()?.unwrap_or_else(|| "none".into()),
            seed: ctx.config.seed,
        };
        let attribution = model.as_ref().map(|m| m as &dyn TargetGenerator);
        let report = evaluate(&gen, &reference_ds, &ctx.config.eval, alignment, provenance, attribution)?;
        for k in ["pcc", "pcc_noise", "ssim", "fc_similarity", "fc_noise", "lag_peak", "lag_hit_rate"] {
            if let Some(v) = report.metrics.get(k) {
                ctx.log(format!("[eval] {k:>14} {:.4}", v.mean));
            }
        }
        report.write(out)
    })
}

pub fn fairness(ctx: &Context, checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    run_stage(ctx, "fairness", out, &[("checkpoint", checkpoint), ("input", input)], |out| {
        let model = load_checkpoint(checkpoint)?;
        let ds = load_container(input)?;
        let cfg = &ctx.config;
        let r = fairness_experiment(&ds, &model, &cfg.fairness, &cfg.classifier)?;
        let (b, a) = (r.minority_before(), r.minority_after());
        ctx.log(format!(
            "[fairness] minority F1 {:.3} ± {:.3} -> {:.3} ± {:.3}, gap {:.3} -> {:.3}",
            b.mean, b.std, a.mean, a.std, r.gap_before, r.gap_after
        ));
        r.write(out)
    })
}

/// Every stage in order under `out/<stage>`. The generator is trained on
/// the fairness subset so one checkpoint serves both evaluation and the
/// fairness experiment without seeing the discarded minority trials.
pub fn demo(ctx: &Context, out: &Path) -> Result<()> {
    let d = |s: &str| out.join(s);
    let start = Instant::now();
    simulate(ctx, &d("simulate"))?;
    preprocess(ctx, &d("simulate").join("dataset"), &d("preprocess"))?;
    let data = d("preprocess").join("dataset");
    align(ctx, &data, &d("align"))?;
    train(ctx, &data, true, &d("train"))?;
    let ck = d("train").join("checkpoint");
    generate(ctx, &ck, &data, Split::Val, &d("generate"))?;
    eval(ctx, &d("generate").join("dataset"), &data, Some(&ck), &d("eval"))?;
    fairness(ctx, &ck, &data, &d("fairness"))?;
    ctx.log(format!("[demo] finished in {:.1} s", start.elapsed().as_secs_f64()));
    Ok(())
}
