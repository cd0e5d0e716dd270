use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const TOY: &str = r#"
seed = 7
[training.base]
epochs = 2
steps_per_epoch = 40
[training.clnet]
epochs = 2
steps_per_epoch = 40
[data]
train_sequences = 6
test_sequences = 3
[data.synth]
length = 24
"#;

fn clnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clnet")).args(args).output().expect("spawn clnet")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

struct Fixture {
    _dir: TempDir,
    config: PathBuf,
    checkpoint: PathBuf,
    plain: PathBuf,
    shifted: PathBuf,
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One trained checkpoint and two synthetic sequences shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("toy.toml");
        fs::write(&config, TOY).unwrap();
        let checkpoint = dir.path().join("ckpt.json");
        let out = clnet(&["train", "--config", p(&config), "--checkpoint", p(&checkpoint)]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        let seqs = dir.path().join("seqs");
        let out = clnet(&["synth", "--seed", "500", "--out", p(&seqs), "--length", "24"]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        let out = clnet(&["synth", "--seed", "600", "--out", p(&seqs), "--length", "40", "--shift-frame", "20"]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        Fixture { plain: seqs.join("synth_000500"), shifted: seqs.join("synth_000600"), _dir: dir, config, checkpoint }
    })
}

fn track(f: &Fixture, seq: &Path, extra: &[&str]) -> Vec<serde_json::Value> {
    let mut args = vec!["track", "--config", p(&f.config), "--checkpoint", p(&f.checkpoint), "--sequence", p(seq)];
    args.extend_from_slice(extra);
    let out = clnet(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    text(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn frame_count(seq: &Path) -> usize {
    fs::read_to_string(seq.join("groundtruth_rect.txt")).unwrap().lines().count()
}

#[test]
fn train_is_deterministic() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again.json");
    let out = clnet(&["train", "--config", p(&f.config), "--seed", "7", "--checkpoint", p(&again)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout).trim(), p(&again));
    assert_eq!(fs::read(&f.checkpoint).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn missing_dataset_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dir.toml");
    fs::write(&cfg, "[data]\nsource = \"dir\"\n").unwrap();
    let out = clnet(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("data.train_dir"), "{}", text(&out.stderr));
}

#[test]
fn schema_violations_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[tracking]\nwindow = 0.3\n").unwrap();
    let out = clnet(&["params", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(clnet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(clnet(&["track", "--sequence", "/nonexistent", "--mode", "sideways"]).status.code(), Some(1));
}

#[test]
fn clnet_mode_never_updates() {
    let f = fixture();
    let recs = track(f, &f.plain, &["--mode", "clnet"]);
    assert_eq!(recs.len(), frame_count(&f.plain));
    assert!(recs.iter().all(|r| r["updated"] == false));
}

#[test]
fn star_mode_updates_on_shift() {
    let f = fixture();
    let recs = track(f, &f.shifted, &["--mode", "clnet_star"]);
    assert_eq!(recs.len(), frame_count(&f.shifted));
    assert!(recs.iter().any(|r| r["updated"] == true));
    let never = track(f, &f.shifted, &["--mode", "clnet_star", "--tau-m", "-inf"]);
    let plain = track(f, &f.shifted, &["--mode", "clnet"]);
    assert_eq!(never, plain);
}

#[test]
fn synth_writes_otb_layout() {
    let f = fixture();
    assert_eq!(frame_count(&f.plain), 24);
    assert!(f.plain.join("img/0001.png").is_file());
    assert!(f.plain.join("img/0024.png").is_file());
}

#[test]
fn params_reports_full_size_counts() {
    let out = clnet(&["params", "--full", "--verify"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    let fc3 = 256 * 2571 + 2571;
    assert!(s.lines().any(|l| l.starts_with("0 cls") && l.split(' ').nth(5) == Some(&fc3.to_string())), "{s}");
    assert!(s.contains("total 7925472"), "{s}");
}

#[test]
fn eval_bundle_is_reproducible() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |root: &Path| {
        let out = Command::new(env!("CARGO_BIN_EXE_clnet"))
            .args(["eval", "--config", p(&f.config), "--checkpoint", p(&f.checkpoint), "--mode", "clnet"])
            .env("CLNET_RESULTS_DIR", root)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", text(&out.stderr));
        let summary: serde_json::Value = serde_json::from_str(text(&out.stdout).trim()).unwrap();
        root.join(summary["run_id"].as_str().unwrap())
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    for name in ["summary.json", "per_sequence.csv", "frames/synth_010000.jsonl"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    let rows = fs::read_to_string(a.join("per_sequence.csv")).unwrap();
    let aucs: Vec<f64> = rows.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((summary["auc"].as_f64().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn analyze_writes_diagnostics() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("diag.csv");
    let out = clnet(&[
        "analyze",
        "--config",
        p(&f.config),
        "--checkpoint",
        p(&f.checkpoint),
        "--sequence",
        p(&f.plain),
        "--out",
        p(&csv),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let body = fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("frame,p_c,n_c,d,overlap"));
    assert_eq!(body.lines().count(), frame_count(&f.plain));
    for l in body.lines().skip(1) {
        let d: f64 = l.split(',').nth(3).unwrap().parse().unwrap();
        assert!((-1.0..=1.0).contains(&d));
    }
}
