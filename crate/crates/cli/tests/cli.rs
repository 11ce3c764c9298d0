use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[synth]
n_slides = 12
instances_min = 16
instances_max = 20
test_fraction = 0.25
slide_images = true

[teacher]
epochs = 1

[student]
epochs = 1

[scoring]
k = 2
";

fn gleason(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gleason"))
        .current_dir(dir)
        .env_remove("GLEASON_OUTPUT_ROOT")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gleason(dir, args);
    assert!(
        out.status.success(),
        "gleason {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A one-line `error: <kind>: <message>` report on stderr.
fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    assert!(lines[0].starts_with("error: "), "{stderr}");
    lines[0].to_string()
}

fn dataset(dir: &Path) {
    std::fs::write(dir.join("c.toml"), SMALL).unwrap();
    ok(dir, &["synth-gen", "--config", "c.toml", "--out", "data", "--seed", "5"]);
}

#[test]
fn evaluate_identical_files_gives_perfect_kappa() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    ok(tmp.path(), &["evaluate", "--pred", "data/truth.csv", "--truth", "data/truth.csv", "--level", "patch", "--out", "r.csv"]);
    let report = std::fs::read_to_string(tmp.path().join("r.csv")).unwrap();
    let kappa: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("kappa,"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(kappa, 1.0, "{report}");
    assert!(tmp.path().join("r.txt").is_file());
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[teacher]\nlearning_rate = 0.1\n").unwrap();
    let out = gleason(tmp.path(), &["synth-gen", "--config", "bad.toml", "--out", "x"]);
    let line = error_line(&out);
    assert!(line.starts_with("error: invalid_config:"), "{line}");
    assert!(line.contains("learning_rate"), "{line}");
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn invalid_values_fail_before_any_stage_runs() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[scoring]\nk = 0\n").unwrap();
    let line = error_line(&gleason(tmp.path(), &["synth-gen", "--config", "bad.toml", "--out", "x"]));
    assert!(line.contains("[scoring]"), "{line}");
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn malformed_manifest_names_the_row() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("m.csv"),
        "slide_id,path,gleason_primary,gleason_secondary,split\ns1,p,3,9,train\n",
    )
    .unwrap();
    let line = error_line(&gleason(tmp.path(), &["train-teacher", "--manifest", "m.csv", "--out", "t.ckpt"]));
    assert!(line.starts_with("error: manifest:"), "{line}");
    assert!(line.contains("row 1"), "{line}");
}

#[test]
fn usage_errors_are_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let line = error_line(&gleason(tmp.path(), &["score", "--method", "nope"]));
    assert!(line.starts_with("error: usage:"), "{line}");
    let line = error_line(&gleason(tmp.path(), &["frobnicate"]));
    assert!(line.starts_with("error: usage:"), "{line}");
}

#[test]
fn every_command_accepts_seed() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in [
        "synth-gen",
        "tile",
        "normalize",
        "train-teacher",
        "pseudo-label",
        "train-student",
        "baseline-global",
        "predict",
        "score",
        "evaluate",
        "heatmap",
    ] {
        let out = gleason(tmp.path(), &[cmd, "--seed", "3", "--help"]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn output_root_resolves_relative_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    std::fs::write(tmp.path().join("c.toml"), SMALL).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gleason"))
        .current_dir(tmp.path())
        .env("GLEASON_OUTPUT_ROOT", &root)
        .args(["synth-gen", "--config", "c.toml", "--out", "data"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("data/manifest.csv").is_file());
    assert!(!tmp.path().join("data").exists());
}

#[test]
fn full_chain_on_a_small_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d);
    ok(d, &["tile", "--manifest", "data/manifest_images.csv", "--out", "tiles", "--window", "32", "--stride", "32"]);
    assert!(d.join("tiles/manifest.csv").is_file());
    ok(d, &["normalize", "--manifest", "data/manifest.csv", "--reference", "data/images/slide_0000.png", "--out", "norm"]);
    assert!(d.join("norm/manifest.csv").is_file());

    ok(d, &["train-teacher", "--manifest", "data/manifest.csv", "--config", "c.toml", "--out", "t.ckpt"]);
    let loss = std::fs::read_to_string(d.join("t.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2, "{loss}");
    ok(d, &["train-teacher", "--manifest", "data/manifest.csv", "--config", "c.toml", "--out", "att.ckpt", "--agg", "attention"]);
    ok(d, &["pseudo-label", "--ckpt", "t.ckpt", "--manifest", "data/manifest.csv", "--out", "pl.csv"]);
    let pl = std::fs::read_to_string(d.join("pl.csv")).unwrap();
    assert!(pl.starts_with("slide_id,patch_id,p_nc,p_gg3,p_gg4,p_gg5,refined"));

    // a store with nothing kept is a degenerate pseudo-dataset
    let header = pl.lines().next().unwrap();
    let discarded: String = pl
        .lines()
        .skip(1)
        .map(|l| format!("{},DISCARD\n", l.rsplit_once(',').unwrap().0))
        .collect();
    std::fs::write(d.join("none.csv"), format!("{header}\n{discarded}")).unwrap();
    let line = error_line(&gleason(d, &["train-student", "--pseudo", "none.csv", "--manifest", "data/manifest.csv", "--config", "c.toml", "--out", "x.ckpt"]));
    assert!(line.starts_with("error: degenerate_pseudo_dataset:"), "{line}");

    ok(d, &["baseline-global", "--manifest", "data/manifest.csv", "--config", "c.toml", "--out", "b.ckpt"]);
    ok(d, &["predict", "--ckpt", "b.ckpt", "--manifest", "data/manifest.csv", "--out", "pred.csv", "--split", "all"]);
    let rows = std::fs::read_to_string(d.join("pred.csv")).unwrap().lines().count() - 1;
    let truth = std::fs::read_to_string(d.join("data/truth.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, truth);
    ok(d, &["evaluate", "--pred", "pred.csv", "--truth", "data/truth.csv", "--level", "patch", "--out", "r.csv"]);

    for method in ["knn", "mlp", "ggpct-knn", "ggpct-mlp"] {
        let out = format!("s_{method}.csv");
        ok(d, &["score", "--ckpt", "b.ckpt", "--manifest", "data/manifest.csv", "--config", "c.toml", "--method", method, "--out", &out]);
        ok(d, &["evaluate", "--pred", &out, "--truth", "data/manifest.csv", "--level", "slide", "--out", "sr.csv"]);
    }

    ok(d, &["heatmap", "--ckpt", "b.ckpt", "--manifest", "data/manifest.csv", "--slide", "slide_0003", "--out", "h.png", "--map", "h.csv"]);
    let img = image::open(d.join("h.png")).unwrap();
    assert!(img.width() > 0 && img.height() > 0);
    assert!(d.join("h.csv").is_file());
    let line = error_line(&gleason(d, &["heatmap", "--ckpt", "b.ckpt", "--manifest", "data/manifest.csv", "--slide", "nope", "--out", "h2.png"]));
    assert!(line.starts_with("error: missing_slide:"), "{line}");
}
