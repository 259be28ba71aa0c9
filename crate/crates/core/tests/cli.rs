use std::path::Path;
use std::process::{Command, Output};

use tsfmicro::eval::MetricsReport;

const TINY: &str = "\
task = synthetic-3
mode = late
image_size = 32
patch_size = 8
embed_dim = 64
stem_channels = 16,32,64
retention_layers = 1
retention_heads = 4
transformer_layers = 1
transformer_heads = 4
head_hidden = 128
epochs = 2
batch_size = 8
synth_subjects = 3
synth_per_subject = 6
synth_image_size = 32
output_dir = out
";

fn tsfmicro(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsfmicro"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), TINY).unwrap();
    dir
}

#[test]
fn loso_writes_a_parseable_report() {
    let dir = setup();
    let out = tsfmicro(dir.path(), &["loso", "--config", "run.cfg", "--mode", "late", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("out/report.json")).unwrap();
    let report = MetricsReport::from_json(&text).unwrap();
    assert_eq!(report.seed, 5);
    assert_eq!(report.folds.len(), 3);
    assert_eq!(report.folds.iter().map(|f| f.n_test).sum::<usize>(), 18);
    for k in 0..3 {
        assert!(dir.path().join(format!("out/fold{k:02}_sub{k:02}.ckpt")).exists());
    }
}

#[test]
fn unknown_mode_lists_the_valid_names() {
    let dir = setup();
    let out = tsfmicro(dir.path(), &["loso", "--config", "run.cfg", "--mode", "middle"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["temporal", "spatial", "early", "t2s", "s2t", "late"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn unknown_subcommand_and_bad_config_fail() {
    let dir = setup();
    assert!(!tsfmicro(dir.path(), &["bogus"]).status.success());
    std::fs::write(dir.path().join("bad.cfg"), "colour = blue\n").unwrap();
    let out = tsfmicro(dir.path(), &["loso", "--config", "bad.cfg"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = tsfmicro(dir.path(), &["loso", "--config", "missing.cfg"]);
    assert!(!out.status.success());
}

#[test]
fn synth_train_eval_gradcam_chain() {
    let dir = setup();
    let out = tsfmicro(dir.path(), &["synth", "--config", "run.cfg", "--out", "data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/manifest.csv").exists());

    let out = tsfmicro(dir.path(), &["train", "--config", "run.cfg", "--holdout", "sub01"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/train.ckpt").exists());
    let log = std::fs::read_to_string(dir.path().join("out/train.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let out = tsfmicro(
        dir.path(),
        &["eval", "--config", "run.cfg", "--checkpoint", "out/train.ckpt", "--manifest", "data/manifest.csv"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["n"], 18);
    assert!(summary["acc"].as_f64().is_some());

    let out = tsfmicro(
        dir.path(),
        &["gradcam", "--config", "run.cfg", "--checkpoint", "out/train.ckpt", "--index", "4", "--target", "1", "--out", "cam"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let heat = image::open(dir.path().join("cam/sub00_clip004_cam1.png")).unwrap();
    assert_eq!((heat.width(), heat.height()), (32, 32));
    assert!(dir.path().join("cam/sub00_clip004_cam1_overlay.png").exists());

    let out = tsfmicro(dir.path(), &["eval", "--config", "run.cfg", "--checkpoint", "out/train.ckpt", "--mode", "t2s"]);
    assert!(!out.status.success(), "mode/weights mismatch must be rejected");
}

#[test]
fn gradcheck_passes() {
    let dir = setup();
    let out = tsfmicro(dir.path(), &["gradcheck", "--per-param", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("all ") && !text.contains("FAIL"), "{text}");
}
