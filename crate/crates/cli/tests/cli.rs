// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
d = 16
num_objects = 4
num_styles = 3
timesteps = 3
samples_per_pair = 6

[model]
d = 16
n = 32
k = 2
k_aux = 8

[unsupervised]
epochs = 4

[supervised]
epochs = 4

[steering]
candidates = [-1.0, -10.0]

[eval]
sequential_order = ["object:0", "object:1"]
"#;

fn saemnesia(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saemnesia"))
        .current_dir(dir)
        .env_remove("SAEMNESIA_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = saemnesia(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn gen_data_is_deterministic() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["gen-data", "--seed", "7", "--out", "a.saea"]);
    ok(p, &["gen-data", "--seed", "7", "--out", "b.saea"]);
    ok(p, &["gen-data", "--seed", "8", "--out", "c.saea"]);
    let a = std::fs::read(p.join("a.saea")).unwrap();
    assert_eq!(a, std::fs::read(p.join("b.saea")).unwrap());
    assert_ne!(a, std::fs::read(p.join("c.saea")).unwrap());
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(saemnesia(p, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(saemnesia(p, &["gen-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(saemnesia(p, &["train", "--data", "x.saea"]).status.code(), Some(2));
    std::fs::write(p.join("bad.toml"), "[synth]\nsamples = 3\n").unwrap();
    let out = saemnesia(p, &["gen-data", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("samples"));
    std::fs::write(p.join("junk.saem"), b"SAEX....").unwrap();
    assert_eq!(saemnesia(p, &["inspect", "junk.saem"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(
        p.join("hot.toml"),
        format!("{SMALL}\n").replace("[unsupervised]\nepochs = 4", "[unsupervised]\nepochs = 4\nlearning_rate = 1e30\nclip_norm = 1e30"),
    )
    .unwrap();
    ok(p, &["gen-data", "--config", "hot.toml", "--out", "d.saea"]);
    let out = saemnesia(p, &["train", "--config", "hot.toml", "--phase", "unsup", "--data", "d.saea", "--out", "m.saem"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn out_dir_from_environment() {
    let dir = setup();
    let p = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_saemnesia"))
        .current_dir(p)
        .env("SAEMNESIA_OUT_DIR", p.join("artifacts"))
        .args(["gen-data", "--config", "small.toml"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(p.join("artifacts/data.saea").exists());
}

#[test]
fn full_workflow() {
    let dir = setup();
    let p = dir.path();
    let c = ["--config", "small.toml", "--seed", "3"];
    let with = |args: &[&'static str]| -> Vec<&'static str> { args.iter().chain(c.iter()).copied().collect() };

    let out = ok(p, &with(&["gen-data", "--out", "d.saea"]));
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("# resolved config"), "{log}");
    assert!(log.contains("learning_rate"), "defaults are logged: {log}");
    ok(p, &with(&["gen-data", "--split", "1", "--out", "h.saea"]));

    ok(p, &with(&["train", "--phase", "pipeline", "--data", "d.saea", "--out", "m.saem"]));
    for f in ["m.saem", "m.pretrained.saem", "m.assignment.json", "m.unsup.jsonl", "m.sup.jsonl"] {
        assert!(p.join(f).exists(), "{f} missing");
    }
    ok(p, &with(&["train", "--phase", "sup", "--data", "d.saea", "--init", "m.pretrained.saem", "--assignment", "m.assignment.json", "--out", "m2.saem"]));
    assert_eq!(std::fs::read(p.join("m.saem")).unwrap(), std::fs::read(p.join("m2.saem")).unwrap());

    ok(p, &with(&["score", "--model", "m.saem", "--data", "d.saea", "--out", "s.json"]));
    let out = ok(p, &with(&["assign", "--scores", "s.json", "--out", "a.json"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("concepts dominated"));
    ok(p, &with(&["steer", "--model", "m.saem", "--data", "d.saea", "--assignment", "a.json", "--multiplier", "-10", "--out", "p.json"]));
    let eval = ["--model", "m.saem", "--plan", "p.json", "--data", "h.saea", "--probe-data", "d.saea"];
    let args: Vec<&str> = ["sweep"].iter().chain(&eval).chain(&c).copied().chain(["--out", "pt.json", "--uniform-csv", "u.csv"]).collect();
    let out = ok(p, &args);
    assert!(String::from_utf8_lossy(&out.stdout).contains("8 evaluations (2 per concept)"));
    assert!(std::fs::read_to_string(p.join("u.csv")).unwrap().starts_with("multiplier,"));

    let args: Vec<&str> = ["eval"].iter().chain(&eval).chain(&c).copied().chain(["--out", "e.json"]).collect();
    let out = ok(p, &args);
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 4);
    for field in ["ua", "ira", "cra"] {
        assert!(reports[0][field].is_number());
    }
    let args: Vec<&str> = ["seq-eval"].iter().chain(&eval).chain(&c).copied().chain(["--out", "q.json"]).collect();
    let out = ok(p, &args);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);

    let out = ok(p, &["inspect", "m.saem"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["header"]["phase"], "supervised");
    assert_eq!(v["header"]["n"], 32);
    let out = ok(p, &["inspect", "a.json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["format"], "saemnesia.assignment");
}
