mod common;

use std::time::Instant;

use common::{neuroforge, run_chain, snapshot, stderr, TINY};
use neuroforge::signal::load_container;

fn error_record(stderr: &str) -> serde_json::Value {
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("json error record");
    serde_json::from_str(line).unwrap()
}

#[test]
fn reruns_are_byte_identical_and_inputs_untouched() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_chain(a.path(), TINY).unwrap();
    let first = snapshot(a.path());
    run_chain(b.path(), TINY).unwrap();
    let second = snapshot(b.path());
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (k, v) in &first {
        assert!(second[k] == *v, "{} differs between runs", k.display());
    }
    for stage in ["sim", "pre", "aln", "trn", "gen", "ev", "fair"] {
        let m: serde_json::Value =
            serde_json::from_slice(&first[&std::path::Path::new(stage).join("run_manifest.json")]).unwrap();
        assert!(m.get("wall_time_s").is_none());
        assert!(!m["outputs"].as_array().unwrap().is_empty(), "{stage}");
        assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    }

    // rerunning into an existing directory changes nothing, and no stage
    // writes into its inputs
    run_chain(a.path(), TINY).unwrap();
    assert!(snapshot(a.path()) == first);
}

#[test]
fn non_deterministic_mode_records_wall_time() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("s");
    let o = neuroforge(&["simulate", "--out", out.to_str().unwrap()], TINY, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["command"], "simulate");
}

#[test]
fn corrupted_blob_fails_train_with_integrity_code() {
    let d = tempfile::tempdir().unwrap();
    let sim = d.path().join("sim");
    let o = neuroforge(&["simulate", "--out", sim.to_str().unwrap()], TINY, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let blob = std::fs::read_dir(sim.join("dataset"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .min()
        .unwrap();
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&blob, bytes).unwrap();
    let input = sim.join("dataset");
    let out = d.path().join("trn");
    let o = neuroforge(&["train", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()], TINY, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let name = blob.file_name().unwrap().to_str().unwrap();
    let rec = error_record(&stderr(&o));
    assert_eq!(rec["exit_code"], 3);
    assert!(rec["message"].as_str().unwrap().contains(name), "{rec}");
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn unknown_config_keys_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("o");
    let o = neuroforge(&["simulate", "--out", out.to_str().unwrap()], &["sim.n_subjectz=3"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&stderr(&o))["error"], "config");
    assert!(!out.exists(), "nothing is written before validation");

    let cfg = d.path().join("c.toml");
    std::fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let o = neuroforge(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("width"));

    let o = neuroforge(&["simulate", "--out", out.to_str().unwrap()], &[], &[("NFORGE_TRAIN__LR", "1")]);
    assert_eq!(o.status.code(), Some(2));

    let o = neuroforge(&["simulate", "--out", out.to_str().unwrap()], &["train.epochs=0"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_layers_are_echoed() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\n[sim]\nn_subjects = 3\ntrials_per_condition = 2\n").unwrap();
    let out = d.path().join("o");
    let o = neuroforge(
        &["simulate", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out.to_str().unwrap()],
        &["sim.trials_per_condition=1"],
        &[("NFORGE_SIM__N_SUBJECTS", "2")],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let echo: toml::Table = std::fs::read_to_string(out.join("effective_config.toml")).unwrap().parse().unwrap();
    assert_eq!(echo["seed"].as_integer(), Some(9));
    assert_eq!(echo["sim"]["seed"].as_integer(), Some(9));
    assert_eq!(echo["sim"]["n_subjects"].as_integer(), Some(2));
    assert_eq!(echo["sim"]["trials_per_condition"].as_integer(), Some(1));
    // the echo is complete: defaults are spelled out
    assert!(echo["train"].get("weight_decay").is_some());
    let ds = load_container(&out.join("dataset")).unwrap();
    assert_eq!(ds.len(), 2 * 4);
    assert_eq!(ds.manifest.seed, 9);
}

#[test]
fn io_and_overlap_errors() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("missing");
    let out = d.path().join("o");
    let o = neuroforge(&["preprocess", "--input", missing.to_str().unwrap(), "--out", out.to_str().unwrap()], &[], &[]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));

    let sim = d.path().join("sim");
    assert!(neuroforge(&["simulate", "--out", sim.to_str().unwrap()], TINY, &[]).status.success());
    let before = snapshot(&sim);
    let o = neuroforge(
        &["preprocess", "--input", sim.join("dataset").to_str().unwrap(), "--out", sim.to_str().unwrap()],
        TINY,
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(snapshot(&sim) == before);
}

#[test]
fn default_simulate_preprocess_align_under_a_minute() {
    let d = tempfile::tempdir().unwrap();
    let p = |s: &str| d.path().join(s).to_string_lossy().into_owned();
    let t = Instant::now();
    for args in [
        vec!["simulate".to_string(), "--out".into(), p("sim")],
        vec!["preprocess".into(), "--input".into(), p("sim/dataset"), "--out".into(), p("pre")],
        vec!["align".into(), "--input".into(), p("pre/dataset"), "--out".into(), p("aln")],
    ] {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = neuroforge(&a, &[], &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let elapsed = t.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "took {elapsed:.1} s");
    let raw = load_container(&d.path().join("sim/dataset")).unwrap();
    let pre = load_container(&d.path().join("pre/dataset")).unwrap();
    let aln = load_container(&d.path().join("aln/dataset")).unwrap();
    assert_eq!(raw.len(), pre.len());
    assert_eq!(raw.len(), aln.len());
    assert_ne!(raw.samples[0].source_epoch, pre.samples[0].source_epoch);
    assert_eq!(raw.samples[0].target_epoch, pre.samples[0].target_epoch);
    assert_eq!(aln.manifest.source.channel_ids, aln.manifest.target.channel_ids);
    assert_eq!(aln.samples[0].source_epoch.data.dim(), aln.samples[0].target_epoch.data.dim());
    assert_eq!(pre.manifest.history.len(), raw.manifest.history.len() + 1);
}
