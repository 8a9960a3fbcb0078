use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[model]
hidden_width = 32
latent_channels = 8
[cohort]
count = 4
grid = 16
spacing = 3.0
[train]
epochs = 1
conditions = [\"lv_fraction\"]
[adapt]
epochs = 2
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inr-atlas"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_config_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[model]\nlatnet_dim = 4\n").unwrap();
    let o = run(dir.path(), &["--config", "c.toml", "make-phantoms"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("latnet_dim"), "{}", stderr(&o));
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "seed = 1\n\n[train\n").unwrap();
    let o = run(dir.path(), &["--config", "c.toml", "make-phantoms"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_and_unknown_recipe_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["infer-atlas", "--checkpoint", "none.ckpt", "--age", "30"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("none.ckpt"));
    let o = run(dir.path(), &["run", "seg-evaluation"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["--scale", "huge", "make-phantoms"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn phantoms_train_atlas_adapt_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let o = run(d, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    ok(&["--config", "tiny.toml", "--out", "ph", "make-phantoms"]);
    let manifest = fs::read_to_string(d.join("ph/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    assert!(manifest.contains("\"scan_age_weeks\""));

    ok(&["--config", "tiny.toml", "--out", "m/model.ckpt", "train", "--cohort", "ph/manifest.jsonl"]);
    assert!(d.join("m/model.ckpt.log.csv").is_file());
    let run_record = fs::read_to_string(d.join("m/model.ckpt.run.json")).unwrap();
    assert!(run_record.contains("\"seed\": 0"));

    ok(&[
        "--config", "tiny.toml", "--out", "atlas", "infer-atlas", "--checkpoint", "m/model.ckpt", "--age", "30",
        "--cond", "lv_fraction=0.5", "--resolution", "3",
    ]);
    for f in ["atlas_mod0.nii", "atlas_mod1.nii", "atlas_probabilities.nii", "atlas_labels.nii", "metadata.json"] {
        assert!(d.join("atlas").join(f).is_file(), "{f}");
    }

    ok(&[
        "--config", "tiny.toml", "--out", "ad", "adapt", "--checkpoint", "m/model.ckpt", "--image",
        "ph/sub-000_image.nii", "--mask", "ph/sub-000_mask.nii", "--observe", "0",
    ]);
    assert!(d.join("ad/translated_mod1.nii").is_file());
    let result = fs::read_to_string(d.join("ad/result.json")).unwrap();
    assert!(result.contains("predicted_scan_age_weeks") && result.contains("lv_fraction"));

    ok(&["--config", "tiny.toml", "--out", "r1.csv", "evaluate", "--checkpoint", "m/model.ckpt", "--cohort", "ph/manifest.jsonl"]);
    ok(&["--config", "tiny.toml", "--out", "r2.csv", "evaluate", "--checkpoint", "m/model.ckpt", "--cohort", "ph/manifest.jsonl"]);
    let r1 = fs::read_to_string(d.join("r1.csv")).unwrap();
    assert_eq!(r1, fs::read_to_string(d.join("r2.csv")).unwrap());
    assert_eq!(r1.lines().filter(|l| l.starts_with("sub-")).count(), 4);

    ok(&["--out", "sl", "export-slices", "--image", "ph/sub-000_image.nii", "--channel", "1"]);
    let pgm = fs::read(d.join("sl/sub-000_image_axial.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);
}

#[test]
fn retraining_with_the_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    for args in [
        &["--config", "tiny.toml", "--seed", "2", "--out", "ph", "make-phantoms"][..],
        &["--config", "tiny.toml", "--seed", "2", "--out", "a.ckpt", "train", "--cohort", "ph/manifest.jsonl"],
        &["--config", "tiny.toml", "--seed", "2", "--out", "b.ckpt", "train", "--cohort", "ph/manifest.jsonl"],
    ] {
        assert!(run(d, args).status.success());
    }
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
}
