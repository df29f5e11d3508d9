use neuroforge::hyperalign::AlignmentConfig;
use neuroforge::metrics::{evaluate, EvalConfig, Provenance};
use neuroforge::simdata::{make_paired_dataset, SimConfig};

fn provenance() -> Provenance {
    Provenance {
        dataset_id: "d".into(),
        checkpoint_id: "identity".into(),
        seed: 3,
    }
}

#[test]
fn identical_targets_score_perfectly() {
    let sim = SimConfig {
        n_subjects: 2,
        trials_per_condition: 6,
        active_prob: 0.8,
        inactive_prob: 0.1,
        ..SimConfig::default()
    };
    let (ds, _) = make_paired_dataset(&sim).unwrap();
    let r = evaluate(&ds, &ds, &EvalConfig::default(), &AlignmentConfig::default(), provenance(), None).unwrap();
    let m = |k: &str| r.metrics[k].mean;
    assert!((m("pcc") - 1.0).abs() < 1e-12);
    assert!((m("ssim") - 1.0).abs() < 1e-12);
    assert!((m("fc_similarity") - 1.0).abs() < 1e-12);
    assert!(m("pcc_noise").abs() < 0.05);
    // trial-to-trial activation changes must not leak into the noise baseline
    assert!(m("fc_noise").abs() < 0.3, "{}", m("fc_noise"));
    assert_eq!(m("lag_peak"), -6.0);
    assert!(m("lag_hit_rate") > 0.8, "{}", m("lag_hit_rate"));
    assert_eq!(r.curves["lag_correlation"].len(), 21);
    assert_eq!(r, evaluate(&ds, &ds, &EvalConfig::default(), &AlignmentConfig::default(), provenance(), None).unwrap());
}

#[test]
fn unmatched_samples_are_rejected() {
    let sim = SimConfig {
        n_subjects: 2,
        trials_per_condition: 2,
        ..SimConfig::default()
    };
    let (ds, _) = make_paired_dataset(&sim).unwrap();
    let half = ds.filtered(|s| s.subject_id == ds.samples[0].subject_id);
    assert!(evaluate(&ds, &half, &EvalConfig::default(), &AlignmentConfig::default(), provenance(), None).is_err());
}
