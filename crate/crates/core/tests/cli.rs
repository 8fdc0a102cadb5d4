mod common;

use common::out_extent;
use dynopool::cli::summarize_file;
use std::path::Path;
use std::process::{Command, Output};

fn dynopool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynopool"))
        .args(args)
        .env("DYNOPOOL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dynopool(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, transform: &str, n: &str, size: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    ok(&[
        "gen", "--transform", transform, "--seed", "1", "--n", n, "--size", size, "--k", "4", "--out", p(&path),
    ]);
    path
}

#[test]
fn gen_writes_the_requested_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let stdout = ok(&[
        "gen", "--transform", "stretch_v", "--seed", "1", "--n", "512", "--size", "16", "--k", "4", "--out", p(&path),
    ]);
    assert_eq!(stdout.trim(), "N=512 shape=(1,16,16) K=4");
    let bytes = std::fs::read(&path).unwrap();
    let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    assert_eq!([field(0), field(1), field(2), field(3), field(4)], [512, 1, 16, 16, 4]);
}

#[test]
fn gen_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    for t in ["base", "stretch_v", "tile", "large"] {
        let a = std::fs::read(gen(dir.path(), "a.bin", t, "40", "8")).unwrap();
        let b = std::fs::read(gen(dir.path(), "b.bin", t, "40", "8")).unwrap();
        assert_eq!(a, b, "{t}");
    }
}

#[test]
fn gen_rejects_odd_tile_size_and_unknown_transform() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(&dir.path().join("x.bin")).to_string();
    let odd = dynopool(&["gen", "--transform", "tile", "--size", "15", "--out", &out]);
    assert_eq!(odd.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&odd.stderr).contains("odd"));
    let bad = dynopool(&["gen", "--transform", "swirl", "--out", &out]);
    assert_eq!(bad.status.code(), Some(1));
    let unwritable = dynopool(&["gen", "--transform", "base", "--n", "8", "--out", "/nonexistent-dir/x.bin"]);
    assert_eq!(unwritable.status.code(), Some(2));
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.bin", "base", "64", "8");
    let (metrics, ckpt) = (dir.path().join("m.csv"), dir.path().join("s.ckpt"));
    ok(&[
        "train", "--data", p(&data), "--epochs", "2", "--metrics", p(&metrics), "--ckpt", p(&ckpt),
    ]);
    assert!(ckpt.exists());
    let summary = summarize_file(&metrics).unwrap();
    assert_eq!(summary.final_epoch, 2);

    // Resuming a finished run adds no rows.
    let again = dir.path().join("m2.csv");
    ok(&[
        "train", "--data", p(&data), "--epochs", "2", "--metrics", p(&again), "--ckpt", p(&ckpt), "--resume",
        p(&ckpt),
    ]);
    assert_eq!(std::fs::read_to_string(&again).unwrap().lines().count(), 1);
}

#[test]
fn zero_epochs_gives_only_the_epoch_zero_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.bin", "base", "32", "8");
    let metrics = dir.path().join("m.csv");
    ok(&[
        "train", "--data", p(&data), "--epochs", "0", "--metrics", p(&metrics), "--ckpt",
        p(&dir.path().join("s.ckpt")),
    ]);
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.lines().skip(1).all(|l| l.starts_with("0,")));
    assert!(text.lines().count() > 1);
}

#[test]
fn complexity_weight_does_not_raise_final_gmacs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.bin", "stretch_v", "96", "16");
    let run = |lambda: &str| {
        let metrics = dir.path().join(format!("m{lambda}.csv"));
        ok(&[
            "train", "--data", p(&data), "--epochs", "4", "--seed", "2", "--lambda", lambda, "--metrics",
            p(&metrics), "--ckpt", p(&dir.path().join("s.ckpt")),
        ]);
        summarize_file(&metrics).unwrap().final_gmacs
    };
    let (free, weighted) = (run("0"), run("1.0"));
    assert!(weighted <= free, "{weighted} > {free}");
}

#[test]
fn train_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.bin", "base", "16", "8");
    let m = p(&dir.path().join("m.csv")).to_string();
    let c = p(&dir.path().join("s.ckpt")).to_string();
    let arch = dynopool(&["train", "--data", p(&data), "--arch", "resnet9", "--metrics", &m, "--ckpt", &c]);
    assert_eq!(arch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&arch.stderr).contains("architecture"));

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a dataset").unwrap();
    let bad = dynopool(&["train", "--data", p(&junk), "--metrics", &m, "--ckpt", &c]);
    assert_eq!(bad.status.code(), Some(2));

    let missing = dynopool(&["train", "--metrics", &m, "--ckpt", &c]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_detects_a_sign_fault() {
    let stdout = ok(&["gradcheck", "--seed", "0"]);
    let checks = stdout.lines().filter(|l| l.contains("max_rel")).count();
    assert!(checks >= 8, "{stdout}");
    for line in stdout.lines().filter(|l| l.contains("max_rel")) {
        let rel: f64 = line
            .split_whitespace()
            .find_map(|t| t.strip_prefix("max_rel="))
            .and_then(|t| t.parse().ok())
            .unwrap_or_else(|| panic!("unparsable line {line}"));
        assert!(rel < 1e-2, "{line}");
    }
    let faulty = dynopool(&["gradcheck", "--inject-fault"]);
    assert_eq!(faulty.status.code(), Some(3));
}

#[test]
fn report_of_frozen_run_shows_the_halving_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.bin", "base", "32", "16");
    let metrics = dir.path().join("m.csv");
    let svg = dir.path().join("shapes.svg");
    ok(&[
        "train", "--data", p(&data), "--epochs", "1", "--freeze-scales", "--metrics", p(&metrics), "--ckpt",
        p(&dir.path().join("s.ckpt")),
    ]);
    let stdout = ok(&["report", "--metrics", p(&metrics), "--svg", p(&svg)]);
    assert!(stdout.contains("best eval acc") && stdout.contains("final GMACs"));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let summary = summarize_file(&metrics).unwrap();
    let resized: Vec<(usize, usize)> = summary
        .layers
        .iter()
        .filter(|l| l.resizer.is_some())
        .map(|l| (l.h, l.w))
        .collect();
    assert_eq!(resized, vec![(8, 8), (4, 4), (2, 2)]);
}

#[test]
fn reported_shapes_follow_the_size_rule() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.bin", "stretch_v", "48", "16");
    let metrics = dir.path().join("m.csv");
    ok(&[
        "train", "--data", p(&data), "--epochs", "3", "--lambda", "0.5", "--lr-alpha", "0.05", "--metrics",
        p(&metrics), "--ckpt", p(&dir.path().join("s.ckpt")),
    ]);
    let layers = summarize_file(&metrics).unwrap().layers;
    for pair in layers.windows(2) {
        if let Some((_, r_h, r_w)) = pair[1].resizer {
            assert_eq!((pair[1].h, pair[1].w), (out_extent(pair[0].h, r_h), out_extent(pair[0].w, r_w)));
        }
    }
}

#[test]
fn report_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dynopool(&["report", "--metrics", p(&dir.path().join("nope.csv"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());

    // A resizer row whose shape contradicts its ratio is refused.
    let forged = dir.path().join("forged.csv");
    std::fs::write(
        &forged,
        "epoch,train_loss,train_acc,eval_acc,gmacs,resizer_id,r_h,r_w,layer_id,h,w\n\
         0,1,0.5,0.5,0.001,,,,0,16,16\n\
         0,1,0.5,0.5,0.001,0,0.5,0.5,1,16,16\n",
    )
    .unwrap();
    assert_eq!(dynopool(&["report", "--metrics", p(&forged)]).status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    assert!(dynopool(&["--help"]).status.success());
    assert_eq!(dynopool(&["frobnicate"]).status.code(), Some(1));
}
