//! Black-box checks of the command-line binary: exit codes, artifact layout,
//! determinism, and the eval report schema.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use once_cell::sync::Lazy;
use sha2::{Digest, Sha256};

use gsf::data::{covered_modes, mode_mass, sample_ring, samples_to_points, save_points_csv};
use gsf::model::{generate, sample_latent, Checkpoint};
use gsf::runs::{ExperimentRecord, RunDir};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gsf"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().unwrap();
    assert!(
        out.status.success(),
        "gsf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn file_digest(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A shared workspace holding toy data and a CLI-pretrained source model.
struct Fixture {
    dir: tempfile::TempDir,
    pretrain_wall: Duration,
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let dir = tempfile::tempdir().unwrap();
    let all: Vec<usize> = (0..8).collect();
    save_points_csv(
        &dir.path().join("ring.csv"),
        &sample_ring(2000, 11, &all).unwrap(),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("pretrain.cfg"),
        "arch = toy\ndata = ring.csv\nout = source.bin\n",
    )
    .unwrap();
    let started = Instant::now();
    run_ok(&["pretrain", "--config", "pretrain.cfg"], dir.path());
    Fixture {
        dir,
        pretrain_wall: started.elapsed(),
    }
});

fn fixture_path(name: &str) -> PathBuf {
    FIXTURE.dir.path().join(name)
}

#[test]
fn pretrained_toy_model_covers_the_ring() {
    let f = &*FIXTURE;
    let ckpt = Checkpoint::load(&fixture_path("source.bin")).unwrap();
    let z = sample_latent(10_000, 99, ckpt.generator.arch.d_z).unwrap();
    let mass = mode_mass(&samples_to_points(&generate(&ckpt.generator, &z.values)));
    let covered = covered_modes(&mass, 0.02);
    assert!(covered >= 7, "only {covered}/8 modes covered: {mass:?}");
    assert!(
        f.pretrain_wall < Duration::from_secs(600),
        "pretraining took {:?}",
        f.pretrain_wall
    );
}

#[test]
fn pretraining_is_deterministic_across_reruns() {
    let f = &*FIXTURE;
    std::fs::write(
        f.dir.path().join("pretrain2.cfg"),
        "arch = toy\ndata = ring.csv\nout = source2.bin\n",
    )
    .unwrap();
    run_ok(&["pretrain", "--config", "pretrain2.cfg"], f.dir.path());
    assert_eq!(
        file_digest(&fixture_path("source.bin")),
        file_digest(&fixture_path("source2.bin"))
    );
}

#[test]
fn missing_dataset_exits_with_code_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("pretrain.cfg"),
        "arch = toy\ndata = nowhere/ring.csv\nout = source.bin\n",
    )
    .unwrap();
    let out = bin()
        .args(["pretrain", "--config", "pretrain.cfg"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nowhere/ring.csv"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.cfg"),
        "arch = toy\ndata = ring.csv\nout = s.bin\npretrain.itres = 5\n",
    )
    .unwrap();
    let out = bin()
        .args(["pretrain", "--config", "bad.cfg"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain.itres"));
}

#[test]
fn sampling_writes_one_file_per_sample_and_is_deterministic() {
    let f = &*FIXTURE;
    run_ok(
        &["sample", "--ckpt", "source.bin", "--n", "1", "--out", "one"],
        f.dir.path(),
    );
    let entries: Vec<_> = std::fs::read_dir(fixture_path("one"))
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.file_name().into_string().unwrap()))
        .filter(|n| n.ends_with(".png") && n != "grid.png")
        .collect();
    assert_eq!(entries, vec!["00000.png"]);

    run_ok(
        &["sample", "--ckpt", "source.bin", "--n", "4", "--seed", "3", "--out", "a"],
        f.dir.path(),
    );
    run_ok(
        &["sample", "--ckpt", "source.bin", "--n", "4", "--seed", "3", "--out", "b"],
        f.dir.path(),
    );
    assert_eq!(
        file_digest(&fixture_path("a/grid.png")),
        file_digest(&fixture_path("b/grid.png"))
    );
}

#[test]
fn eval_report_has_exactly_the_documented_keys() {
    let f = &*FIXTURE;
    run_ok(
        &[
            "eval",
            "--ckpt",
            "source.bin",
            "--ref",
            "ring.csv",
            "--out",
            "report.json",
            "--n",
            "200",
            "--ppl-n",
            "100",
        ],
        f.dir.path(),
    );
    let text = std::fs::read_to_string(fixture_path("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let obj = v.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        vec!["extractor", "fid", "n_samples", "ppl", "precision", "recall", "seed"]
    );
    assert!(v["fid"].as_f64().unwrap() >= 0.0);
}

#[test]
fn report_marks_the_minimum_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for (name, best) in [("alpha", 4.0), ("beta", 1.5)] {
        let run = RunDir::create(dir.path(), name).unwrap();
        run.write_record(&ExperimentRecord {
            name: name.to_string(),
            code_version: "test".into(),
            metrics_file: "metrics.jsonl".into(),
            ckpt_best: "ckpt_best.bin".into(),
            ckpt_last: "ckpt_last.bin".into(),
            best_fid: best,
            best_iteration: 100,
            wall_seconds: 1.0,
            completed: true,
        })
        .unwrap();
    }
    let out = run_ok(
        &["report", "--root", dir.path().to_str().unwrap()],
        dir.path(),
    );
    let text = String::from_utf8_lossy(&out.stdout);
    let beta = text.lines().find(|l| l.contains("beta")).unwrap();
    let alpha = text.lines().find(|l| l.contains("alpha")).unwrap();
    assert!(beta.contains('*'), "minimum not marked: {text}");
    assert!(!alpha.contains('*'), "non-minimum marked: {text}");
}

#[test]
fn corrupt_checkpoint_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.bin"), b"not a checkpoint").unwrap();
    let out = bin()
        .args(["sample", "--ckpt", "bad.bin", "--out", "x"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
