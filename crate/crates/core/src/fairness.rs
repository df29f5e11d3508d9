//! Class-imbalance protocol: subsample one class, score a linear decoder
//! with stratified k-fold F1, rebalance the class with generated targets
//! and score again.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean_std, MetricValue, TargetGenerator};
use crate::rng::{derive_rng, derive_seed, SimRng};
use crate::signal::{PairedDataset, PairedSample, Provenance};

const TAG_FOLDS: u64 = 0xf01d;
const TAG_MINORITY: u64 = 0x3140;

/// Share of requested generations allowed to fail before giving up.
const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImbalanceSpec {
    pub minority_class: String,
    pub n_minority: usize,
    pub n_majority: usize,
    pub n_generated: usize,
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for ImbalanceSpec {
    fn default() -> Self {
        ImbalanceSpec {
            minority_class: "task-a".into(),
            n_minority: 30,
            n_majority: 150,
            n_generated: 120,
            k_folds: 5,
            seed: 0,
        }
    }
}

impl ImbalanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_minority > self.n_majority {
            return Err(Error::Config(format!(
                "n_minority {} exceeds n_majority {}",
                self.n_minority, self.n_majority
            )));
        }
        if self.n_minority + self.n_generated != self.n_majority {
            return Err(Error::Config(format!(
                "n_minority + n_generated = {} must equal n_majority {}",
                self.n_minority + self.n_generated,
                self.n_majority
            )));
        }
        if self.k_folds < 2 {
            return Err(Error::Config("k_folds must be >= 2".into()));
        }
        if self.n_minority < self.k_folds {
            return Err(Error::Config(format!(
                "{} minority samples cannot fill {} folds",
                self.n_minority, self.k_folds
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Ridge penalty on the standardised features.
    pub ridge: f64,
    /// Frequency bins (excluding DC) for the per-channel band powers.
    pub n_power_bins: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            ridge: 3000.0,
            n_power_bins: 3,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config("ridge must be > 0".into()));
        }
        if self.n_power_bins == 0 {
            return Err(Error::Config("n_power_bins must be > 0".into()));
        }
        Ok(())
    }
}

fn indices_by_class(dataset: &PairedDataset, real_only: bool) -> BTreeMap<String, Vec<usize>> {
    let mut by: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in dataset.canonical_order() {
        let s = &dataset.samples[i];
        if real_only && s.provenance.is_synthetic() {
            continue;
        }
        by.entry(s.condition_label.clone()).or_default().push(i);
    }
    by
}

/// Subsample the minority class to `n_minority` and truncate every other
/// class to its first `n_majority` samples in canonical order.
pub fn make_imbalanced(dataset: &PairedDataset, spec: &ImbalanceSpec, rng: &mut SimRng) -> Result<PairedDataset> {
    spec.validate()?;
    let by = indices_by_class(dataset, true);
    if !by.contains_key(&spec.minority_class) {
        return Err(Error::invalid(format!("minority class `{}` not in dataset", spec.minority_class)));
    }
    let mut keep = Vec::new();
    for (class, idx) in &by {
        if idx.len() < spec.n_majority {
            return Err(Error::invalid(format!(
                "class `{class}` has {} samples, need {}",
                idx.len(),
                spec.n_majority
            )));
        }
        let pool = &idx[..spec.n_majority];
        if *class == spec.minority_class {
            let mut pick: Vec<usize> = pool.choose_multiple(rng, spec.n_minority).copied().collect();
            pick.sort_unstable();
            keep.extend(pick);
        } else {
            keep.extend_from_slice(pool);
        }
    }
    keep.sort_unstable();
    let samples = keep.iter().map(|&i| dataset.samples[i].clone()).collect();
    let mut manifest = dataset.manifest.clone();
    manifest.history.push(format!(
        "imbalance: `{}` {} of {}, seed {}",
        spec.minority_class, spec.n_minority, spec.n_majority, spec.seed
    ));
    PairedDataset::new(manifest, samples)
}

/// Append `n_generated` synthetic minority samples, each conditioned on a
/// bootstrap draw of the real minority source epochs.
pub fn augment_minority(
    generator: &dyn TargetGenerator,
    dataset: &PairedDataset,
    spec: &ImbalanceSpec,
    rng: &mut SimRng,
) -> Result<PairedDataset> {
    spec.validate()?;
    let by = indices_by_class(dataset, true);
    let parents = by
        .get(&spec.minority_class)
        .ok_or_else(|| Error::invalid(format!("minority class `{}` not in dataset", spec.minority_class)))?;
    let mut out = dataset.clone();
    if spec.n_generated == 0 {
        return Ok(out);
    }
    let draws: Vec<usize> = (0..spec.n_generated).map(|_| parents[rng.gen_range(0..parents.len())]).collect();
    let seeds: Vec<u64> = (0..spec.n_generated).map(|_| rng.gen()).collect();
    let sources: Vec<_> = draws.iter().map(|&i| dataset.samples[i].source_epoch.clone()).collect();

    let generated = match generator.generate(&sources, &seeds) {
        Ok(v) => v,
        // find the failing samples and give each one retry with a fresh seed
        Err(Error::NumericalFailure { .. }) => {
            let mut failures = 0usize;
            let mut v = Vec::with_capacity(sources.len());
            for (src, &seed) in sources.iter().zip(&seeds) {
                let one = std::slice::from_ref(src);
                match generator.generate(one, &[seed]) {
                    Ok(mut g) => v.push(g.remove(0)),
                    Err(Error::NumericalFailure { .. }) => {
                        failures += 1;
                        v.push(generator.generate(one, &[derive_seed(seed, &[1])])?.remove(0));
                    }
                    Err(e) => return Err(e),
                }
            }
            if failures as f64 > MAX_FAILURE_RATE * spec.n_generated as f64 {
                return Err(Error::NumericalFailure {
                    tensor: "generated_target".into(),
                    detail: format!("{failures} of {} generations failed", spec.n_generated),
                });
            }
            v
        }
        Err(e) => return Err(e),
    };
    let made = draws.iter().zip(sources).zip(generated).enumerate().map(|(k, ((&parent, src), target_epoch))| {
        let p = &dataset.samples[parent];
        PairedSample {
            source_epoch: src,
            target_epoch,
            condition_label: p.condition_label.clone(),
            subject_id: p.subject_id.clone(),
            group_id: p.group_id.clone(),
            trial: k as u32,
            provenance: Provenance::Synthetic { parent_trial: p.trial },
        }
    });
    out.samples.extend(made);
    out.manifest.history.push(format!(
        "augment: {} generated `{}` samples",
        spec.n_generated, spec.minority_class
    ));
    PairedDataset::new(out.manifest, out.samples)
}

/// Per-channel mean, variance and log periodogram power in `n_bins`
/// equal-width frequency bins above DC.
pub fn epoch_features(target: &Array2<f64>, n_bins: usize) -> Vec<f64> {
    let n = target.ncols();
    let n_freq = n / 2;
    let mut out = Vec::with_capacity(target.nrows() * (2 + n_bins));
    for row in target.outer_iter() {
        let x: Vec<f64> = row.to_vec();
        let (m, s) = mean_std(&x);
        out.push(m);
        out.push(s * s);
        let mut bins = vec![0.0; n_bins];
        for k in 1..=n_freq {
            let w = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (j, v) in x.iter().enumerate() {
                let (sn, cs) = (w * j as f64).sin_cos();
                re += (v - m) * cs;
                im -= (v - m) * sn;
            }
            let b = ((k - 1) * n_bins / n_freq.max(1)).min(n_bins - 1);
            bins[b] += (re * re + im * im) / n as f64;
        }
        out.extend(bins.iter().map(|p| (p + 1e-12).ln()));
    }
    out
}

/// Least-squares fit to one-hot labels with a ridge penalty on the
/// standardised features; predicts the arg-max score.
#[derive(Debug, Clone)]
pub struct RidgeClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: DMatrix<f64>,
    n_classes: usize,
}

impl RidgeClassifier {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize, ridge: f64) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(Error::invalid("need matching nonempty features and labels"));
        }
        let p = features[0].len();
        let mut mean = vec![0.0; p];
        let mut scale = vec![0.0; p];
        for j in 0..p {
            let col: Vec<f64> = features.iter().map(|f| f[j]).collect();
            let (m, s) = mean_std(&col);
            mean[j] = m;
            scale[j] = if s > 0.0 { s } else { 1.0 };
        }
        let x = DMatrix::from_fn(n, p + 1, |i, j| {
            if j == p {
                1.0
            } else {
                (features[i][j] - mean[j]) / scale[j]
            }
        });
        let y = DMatrix::from_fn(n, n_classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
        let mut gram = x.transpose() * &x;
        for j in 0..p {
            gram[(j, j)] += ridge;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure {
                tensor: "classifier_gram".into(),
                detail: "normal equations are not positive definite".into(),
            })?;
        let weights = chol.solve(&(x.transpose() * y));
        Ok(RidgeClassifier {
            mean,
            scale,
            weights,
            n_classes,
        })
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let p = self.mean.len();
        let v = DVector::from_fn(p + 1, |j, _| {
            if j == p {
                1.0
            } else {
                (features[j] - self.mean[j]) / self.scale[j]
            }
        });
        let scores = self.weights.transpose() * v;
        (0..self.n_classes)
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .expect("at least one class")
    }
}

/// Per-class F1 with undefined precision counted as zero.
pub fn per_class_f1(truth: &[usize], pred: &[usize], n_classes: usize) -> Vec<f64> {
    (0..n_classes)
        .map(|c| {
            let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let fp = truth.iter().zip(pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
            let fn_ = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldResult {
    pub classes: Vec<String>,
    pub per_class: BTreeMap<String, MetricValue>,
    /// `per_fold[f][c]` in the order of `classes`.
    pub per_fold: Vec<Vec<f64>>,
    /// Real sample indices held out in each fold.
    pub validation: Vec<Vec<usize>>,
    pub n_synthetic_used: usize,
}

impl KFoldResult {
    /// Largest minus smallest per-class mean F1.
    pub fn gap(&self) -> f64 {
        let v: Vec<f64> = self.per_class.values().map(|m| m.mean).collect();
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    }
}

/// Stratified k-fold F1 over the real samples. Synthetic samples only ever
/// join training folds, and only when their parent is not being validated.
pub fn kfold_f1(dataset: &PairedDataset, k: usize, config: &ClassifierConfig, rng: &mut SimRng) -> Result<KFoldResult> {
    config.validate()?;
    if k < 2 {
        return Err(Error::Config("k must be >= 2".into()));
    }
    let by = indices_by_class(dataset, true);
    let classes: Vec<String> = by.keys().cloned().collect();
    let class_of: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut fold_of = vec![usize::MAX; dataset.len()];
    for (class, idx) in &by {
        if idx.len() < k {
            return Err(Error::invalid(format!(
                "stratification: class `{class}` has {} samples for {k} folds",
                idx.len()
            )));
        }
        let mut idx = idx.clone();
        idx.shuffle(rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold_of[i] = pos % k;
        }
    }
    let real_key = |s: &PairedSample, trial: u32| (s.subject_id.clone(), s.condition_label.clone(), trial);
    let real_fold: BTreeMap<_, usize> = (0..dataset.len())
        .filter(|&i| fold_of[i] != usize::MAX)
        .map(|i| (real_key(&dataset.samples[i], dataset.samples[i].trial), fold_of[i]))
        .collect();
    let parent_fold: Vec<Option<usize>> = dataset
        .samples
        .iter()
        .map(|s| match s.provenance {
            Provenance::Synthetic { parent_trial } => real_fold.get(&real_key(s, parent_trial)).copied(),
            Provenance::Real => None,
        })
        .collect();
    let features: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .map(|s| epoch_features(&s.target_epoch.data, config.n_power_bins))
        .collect();
    let labels: Vec<usize> = dataset.samples.iter().map(|s| class_of[s.condition_label.as_str()]).collect();

    let mut per_fold = Vec::with_capacity(k);
    let mut validation = Vec::with_capacity(k);
    let mut n_synthetic_used = 0;
    for f in 0..k {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            if s.provenance.is_synthetic() {
                if parent_fold[i] != Some(f) {
                    train.push(i);
                }
            } else if fold_of[i] == f {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        if let Some(c) = (0..classes.len()).find(|&c| !train.iter().any(|&i| labels[i] == c)) {
            return Err(Error::invalid(format!(
                "stratification: class `{}` absent from training fold {f}",
                classes[c]
            )));
        }
        n_synthetic_used += train.iter().filter(|&&i| dataset.samples[i].provenance.is_synthetic()).count();
        let tf: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
        let tl: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let clf = RidgeClassifier::fit(&tf, &tl, classes.len(), config.ridge)?;
        let pred: Vec<usize> = val.iter().map(|&i| clf.predict(&features[i])).collect();
        let truth: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
        per_fold.push(per_class_f1(&truth, &pred, classes.len()));
        validation.push(val);
    }
    let per_class = classes
        .iter()
        .enumerate()
        .map(|(c, name)| (name.clone(), MetricValue::of(&per_fold.iter().map(|f| f[c]).collect::<Vec<_>>())))
        .collect();
    Ok(KFoldResult {
        classes,
        per_class,
        per_fold,
        validation,
        n_synthetic_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub spec: ImbalanceSpec,
    pub classifier: ClassifierConfig,
    pub before: KFoldResult,
    pub after: KFoldResult,
    /// `after - before` mean F1 per class.
    pub delta: BTreeMap<String, f64>,
    pub gap_before: f64,
    pub gap_after: f64,
    pub conditioning: String,
}

impl FairnessReport {
    pub fn minority_before(&self) -> &MetricValue {
        &self.before.per_class[&self.spec.minority_class]
    }

    pub fn minority_after(&self) -> &MetricValue {
        &self.after.per_class[&self.spec.minority_class]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,fold,class,f1\n");
        for (phase, r) in [("before", &self.before), ("after", &self.after)] {
            for (f, row) in r.per_fold.iter().enumerate() {
                for (c, v) in r.classes.iter().zip(row) {
                    s.push_str(&format!("{phase},{f},{c},{v}\n"));
                }
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let p = dir.join("fairness_report.json");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("fairness_folds.csv");
        std::fs::write(&p, self.to_csv()).map_err(|e| Error::io(&p, e))
    }
}

/// The imbalanced subset [`fairness_experiment`] scores, for training a
/// generator that never sees the discarded minority samples.
pub fn experiment_subset(dataset: &PairedDataset, spec: &ImbalanceSpec) -> Result<PairedDataset> {
    make_imbalanced(dataset, spec, &mut derive_rng(spec.seed, &[TAG_MINORITY, 0]))
}

/// Imbalance, score, augment, score again. Both scorings share fold seeds.
pub fn fairness_experiment(
    dataset: &PairedDataset,
    generator: &dyn TargetGenerator,
    spec: &ImbalanceSpec,
    classifier: &ClassifierConfig,
) -> Result<FairnessReport> {
    spec.validate()?;
    let imbalanced = experiment_subset(dataset, spec)?;
    let before = kfold_f1(&imbalanced, spec.k_folds, classifier, &mut derive_rng(spec.seed, &[TAG_FOLDS]))?;
    let augmented = augment_minority(generator, &imbalanced, spec, &mut derive_rng(spec.seed, &[TAG_MINORITY, 1]))?;
    let after = kfold_f1(&augmented, spec.k_folds, classifier, &mut derive_rng(spec.seed, &[TAG_FOLDS]))?;
    let delta = before
        .per_class
        .iter()
        .map(|(c, b)| (c.clone(), after.per_class[c].mean - b.mean))
        .collect();
    Ok(FairnessReport {
        spec: spec.clone(),
        classifier: classifier.clone(),
        gap_before: before.gap(),
        gap_after: after.gap(),
        before,
        after,
        delta,
        conditioning: "bootstrap-resampled real minority source epochs".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::signal::{DatasetManifest, ModalitySchema, MultichannelTimeSeries, SensorGeometry, CONTAINER_SCHEMA_VERSION};
    use rand_distr::{Distribution, StandardNormal};
    use std::cell::Cell;

    const CH: usize = 2;
    const NS: usize = 8;

    fn schema(name: &str) -> ModalitySchema {
        ModalitySchema {
            modality: name.into(),
            channel_ids: (0..CH).map(|i| format!("{name}{i}")).collect(),
            sample_rate_hz: 1.0,
            n_samples: NS,
            units: "au".into(),
            geometry: SensorGeometry::new((0..CH).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect(), "test").unwrap(),
        }
    }

    /// `counts[c]` real samples of class `c{c}`; channel 0 is offset by
    /// `sep * c` plus unit noise, in both source and target.
    fn toy(counts: &[usize], sep: f64, seed: u64) -> PairedDataset {
        let mut rng = rng_from_seed(seed);
        let (src, tgt) = (schema("src"), schema("tgt"));
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for k in 0..n {
                let data = Array2::from_shape_fn((CH, NS), |(ch, _)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + if ch == 0 { sep * c as f64 } else { 0.0 }
                });
                let t0 = (c * 1000 + k) as f64 * NS as f64;
                samples.push(PairedSample {
                    source_epoch: MultichannelTimeSeries::new(src.channel_ids.clone(), 1.0, t0, data.clone()).unwrap(),
                    target_epoch: MultichannelTimeSeries::new(tgt.channel_ids.clone(), 1.0, t0, data).unwrap(),
                    condition_label: format!("c{c}"),
                    subject_id: "sub-01".into(),
                    group_id: "g0".into(),
                    trial: k as u32,
                    provenance: Provenance::Real,
                });
            }
        }
        let manifest = DatasetManifest {
            schema_version: CONTAINER_SCHEMA_VERSION,
            name: "toy".into(),
            source: src,
            target: tgt.clone(),
            seed,
            lag_s: 0.0,
            parcellation: None,
            history: vec![],
        };
        PairedDataset::new(manifest, samples).unwrap()
    }

    /// Returns the conditioning epoch as the target; refuses batches larger
    /// than `max_batch`.
    struct Echo {
        max_batch: usize,
        calls: Cell<usize>,
    }

    impl Echo {
        fn new(max_batch: usize) -> Self {
            Echo {
                max_batch,
                calls: Cell::new(0),
            }
        }
    }

    impl TargetGenerator for Echo {
        fn generate(&self, eeg: &[MultichannelTimeSeries], _seeds: &[u64]) -> Result<Vec<MultichannelTimeSeries>> {
            self.calls.set(self.calls.get() + 1);
            if eeg.len() > self.max_batch {
                return Err(Error::NumericalFailure {
                    tensor: "t".into(),
                    detail: "batch".into(),
                });
            }
            let ids = schema("tgt").channel_ids;
            Ok(eeg
                .iter()
                .map(|e| MultichannelTimeSeries::new(ids.clone(), 1.0, e.start_time_s, e.data.clone()).unwrap())
                .collect())
        }
    }

    fn counts(d: &PairedDataset) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for s in &d.samples {
            *m.entry(s.condition_label.clone()).or_insert(0) += 1;
        }
        m
    }

    fn spec4() -> ImbalanceSpec {
        ImbalanceSpec {
            minority_class: "c0".into(),
            ..ImbalanceSpec::default()
        }
    }

    #[test]
    fn imbalance_counts_and_determinism() {
        let d = toy(&[160, 160, 160, 170], 1.0, 1);
        let spec = spec4();
        let a = make_imbalanced(&d, &spec, &mut rng_from_seed(3)).unwrap();
        let c = counts(&a);
        assert_eq!(c.values().copied().collect::<Vec<_>>(), vec![30, 150, 150, 150]);
        assert_eq!(a, make_imbalanced(&d, &spec, &mut rng_from_seed(3)).unwrap());
        assert_ne!(a, make_imbalanced(&d, &spec, &mut rng_from_seed(4)).unwrap());
        // minority drawn without replacement from the first n_majority trials
        let trials: Vec<u32> = a.samples.iter().filter(|s| s.condition_label == "c0").map(|s| s.trial).collect();
        let unique: std::collections::BTreeSet<_> = trials.iter().collect();
        assert_eq!(unique.len(), 30);
        assert!(trials.iter().all(|&t| t < 150));
        assert_eq!(a.manifest.history.len(), 1);
    }

    #[test]
    fn equal_counts_only_truncate() {
        let d = toy(&[160, 155], 1.0, 2);
        let spec = ImbalanceSpec {
            minority_class: "c0".into(),
            n_minority: 150,
            n_majority: 150,
            n_generated: 0,
            ..ImbalanceSpec::default()
        };
        let a = make_imbalanced(&d, &spec, &mut rng_from_seed(0)).unwrap();
        let expect: Vec<_> = d.samples.iter().filter(|s| s.trial < 150).cloned().collect();
        assert_eq!(a.samples, expect);
    }

    #[test]
    fn rebalancing_identity_is_enforced() {
        let bad = ImbalanceSpec {
            n_generated: 100,
            ..ImbalanceSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let d = toy(&[20, 20], 1.0, 0);
        assert!(make_imbalanced(&d, &spec4(), &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn augmentation_restores_counts_and_marks_provenance() {
        let d = toy(&[160, 160, 160, 160], 1.0, 5);
        let spec = spec4();
        let imb = make_imbalanced(&d, &spec, &mut rng_from_seed(0)).unwrap();
        let aug = augment_minority(&Echo::new(usize::MAX), &imb, &spec, &mut rng_from_seed(1)).unwrap();
        assert!(counts(&aug).values().all(|&n| n == 150));
        let real_trials: std::collections::BTreeSet<u32> =
            imb.samples.iter().filter(|s| s.condition_label == "c0").map(|s| s.trial).collect();
        let syn: Vec<_> = aug.samples.iter().filter(|s| s.provenance.is_synthetic()).collect();
        assert_eq!(syn.len(), 120);
        for s in &syn {
            assert_eq!(s.condition_label, "c0");
            match s.provenance {
                Provenance::Synthetic { parent_trial } => assert!(real_trials.contains(&parent_trial)),
                Provenance::Real => unreachable!(),
            }
        }
        assert_eq!(aug, augment_minority(&Echo::new(usize::MAX), &imb, &spec, &mut rng_from_seed(1)).unwrap());
    }

    #[test]
    fn failed_batches_fall_back_to_single_samples() {
        let d = toy(&[160, 160], 1.0, 6);
        let spec = ImbalanceSpec {
            minority_class: "c0".into(),
            ..ImbalanceSpec::default()
        };
        let imb = make_imbalanced(&d, &spec, &mut rng_from_seed(0)).unwrap();
        let whole = augment_minority(&Echo::new(usize::MAX), &imb, &spec, &mut rng_from_seed(2)).unwrap();
        let single = Echo::new(1);
        assert_eq!(augment_minority(&single, &imb, &spec, &mut rng_from_seed(2)).unwrap(), whole);
        assert_eq!(single.calls.get(), 121);
        let err = augment_minority(&Echo::new(0), &imb, &spec, &mut rng_from_seed(2));
        assert!(matches!(err, Err(Error::NumericalFailure { .. })));
    }

    #[test]
    fn separable_classes_score_one() {
        let d = toy(&[40, 40], 100.0, 7);
        let cfg = ClassifierConfig {
            ridge: 1.0,
            ..ClassifierConfig::default()
        };
        let r = kfold_f1(&d, 3, &cfg, &mut rng_from_seed(0)).unwrap();
        assert!(r.per_fold.iter().flatten().all(|&f| f == 1.0), "{:?}", r.per_fold);
        assert_eq!(r.gap(), 0.0);
    }

    #[test]
    fn shuffled_labels_score_at_chance() {
        let cfg = ClassifierConfig {
            ridge: 1.0,
            ..ClassifierConfig::default()
        };
        let mut macro_f1 = Vec::new();
        for seed in 0..20u64 {
            let mut d = toy(&[40, 40, 40, 40], 3.0, 100 + seed);
            let mut labels: Vec<String> = d.samples.iter().map(|s| s.condition_label.clone()).collect();
            labels.shuffle(&mut rng_from_seed(seed));
            for (s, l) in d.samples.iter_mut().zip(labels) {
                s.condition_label = l;
            }
            // keep (subject, condition, trial) unique after relabelling
            for (k, s) in d.samples.iter_mut().enumerate() {
                s.trial = k as u32;
            }
            let r = kfold_f1(&d, 5, &cfg, &mut rng_from_seed(seed)).unwrap();
            macro_f1.push(r.per_class.values().map(|m| m.mean).sum::<f64>() / 4.0);
        }
        let m = macro_f1.iter().sum::<f64>() / 20.0;
        assert!((m - 0.25).abs() < 0.1, "macro F1 {m}");
    }

    #[test]
    fn synthetic_samples_never_validate() {
        let d = toy(&[160, 160, 160, 160], 1.0, 8);
        let spec = spec4();
        let imb = make_imbalanced(&d, &spec, &mut rng_from_seed(0)).unwrap();
        let aug = augment_minority(&Echo::new(usize::MAX), &imb, &spec, &mut rng_from_seed(1)).unwrap();
        let r = kfold_f1(&aug, 5, &ClassifierConfig::default(), &mut rng_from_seed(2)).unwrap();
        let all: Vec<usize> = r.validation.iter().flatten().copied().collect();
        assert_eq!(all.len(), 480);
        assert!(all.iter().all(|&i| !aug.samples[i].provenance.is_synthetic()));
        // synthetic samples train except in the fold that validates their parent
        let mut expect = 0;
        for val in &r.validation {
            let held: std::collections::BTreeSet<u32> = val
                .iter()
                .filter(|&&i| aug.samples[i].condition_label == "c0")
                .map(|&i| aug.samples[i].trial)
                .collect();
            expect += aug
                .samples
                .iter()
                .filter(|s| matches!(s.provenance, Provenance::Synthetic { parent_trial } if !held.contains(&parent_trial)))
                .count();
        }
        assert_eq!(r.n_synthetic_used, expect);
        assert!(expect > 0 && expect < 5 * 120);
    }

    #[test]
    fn zero_generation_leaves_scores_unchanged() {
        let d = toy(&[150, 150, 150], 1.5, 9);
        let spec = ImbalanceSpec {
            minority_class: "c1".into(),
            n_minority: 120,
            n_majority: 120,
            n_generated: 0,
            ..ImbalanceSpec::default()
        };
        let echo = Echo::new(usize::MAX);
        let rep = fairness_experiment(&d, &echo, &spec, &ClassifierConfig::default()).unwrap();
        assert_eq!(rep.before, rep.after);
        assert!(rep.delta.values().all(|&v| v == 0.0));
        assert_eq!(echo.calls.get(), 0);
    }

    #[test]
    fn f1_hand_example() {
        // class 0: tp 2, fp 1, fn 1; class 1: tp 1, fp 1, fn 1; class 2 never predicted
        let truth = [0, 0, 0, 1, 1, 2];
        let pred = [0, 0, 1, 1, 0, 1];
        let f = per_class_f1(&truth, &pred, 3);
        assert!((f[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((f[1] - 0.4).abs() < 1e-15);
        assert_eq!(f[2], 0.0);
    }

    #[test]
    fn report_files() {
        let d = toy(&[160, 160], 2.0, 10);
        let spec = ImbalanceSpec {
            minority_class: "c0".into(),
            ..ImbalanceSpec::default()
        };
        let rep = fairness_experiment(&d, &Echo::new(usize::MAX), &spec, &ClassifierConfig::default()).unwrap();
        assert_eq!(rep.to_csv().lines().count(), 1 + 2 * 5 * 2);
        assert_eq!(rep.after.per_class.values().map(|m| m.n).collect::<Vec<_>>(), vec![5, 5]);
        let dir = tempfile::tempdir().unwrap();
        rep.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("fairness_report.json")).unwrap();
        let back: FairnessReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rep);
        assert!(dir.path().join("fairness_folds.csv").exists());
    }
}
