#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Overrides that shrink every stage to a few seconds.
pub const TINY: &[&str] = &[
    "sim.n_subjects=2",
    "sim.trials_per_condition=4",
    "model.d_model=32",
    "model.n_heads=2",
    "model.n_blocks=1",
    "model.schedule.steps=10",
    "train.epochs=2",
    "train.batch_size=8",
    "train.val_fraction=0.5",
    "eval.noise_draws=30",
    "fairness.n_minority=4",
    "fairness.n_majority=8",
    "fairness.n_generated=4",
    "fairness.k_folds=2",
];

pub fn neuroforge(args: &[&str], sets: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_neuroforge"));
    cmd.args(args).arg("--quiet");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn neuroforge")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every file below `root` keyed by its relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Every stage chained under `root`; returns the failing stage, if any.
pub fn run_chain(root: &Path, sets: &[&str]) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("simulate", vec!["simulate".into(), "--out".into(), p("sim")]),
        ("preprocess", vec!["preprocess".into(), "--input".into(), p("sim/dataset"), "--out".into(), p("pre")]),
        ("align", vec!["align".into(), "--input".into(), p("pre/dataset"), "--out".into(), p("aln")]),
        ("train", vec!["train".into(), "--input".into(), p("pre/dataset"), "--out".into(), p("trn")]),
        (
            "generate",
            vec![
                "generate".into(),
                "--checkpoint".into(),
                p("trn/checkpoint"),
                "--input".into(),
                p("pre/dataset"),
                "--split".into(),
                "val".into(),
                "--out".into(),
                p("gen"),
            ],
        ),
        (
            "eval",
            vec![
                "eval".into(),
                "--generated".into(),
                p("gen/dataset"),
                "--reference".into(),
                p("pre/dataset"),
                "--checkpoint".into(),
                p("trn/checkpoint"),
                "--out".into(),
                p("ev"),
            ],
        ),
        (
            "fairness",
            vec![
                "fairness".into(),
                "--checkpoint".into(),
                p("trn/checkpoint"),
                "--input".into(),
                p("pre/dataset"),
                "--out".into(),
                p("fair"),
            ],
        ),
    ];
    for (name, mut args) in steps {
        args.push("--deterministic".into());
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = neuroforge(&a, sets, &[]);
        if !o.status.success() {
            return Err(format!("{name}: {}", stderr(&o)));
        }
    }
    Ok(())
}
