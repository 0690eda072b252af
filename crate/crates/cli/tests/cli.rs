use std::path::Path;
use std::process::{Command, Output};

use vidistill::pipeline::RunManifest;

const TINY: &str = r#"
seed = 3

[data]
frames = 4
height = 8
width = 8
min_half_size = 1
max_half_size = 2
max_speed = 1

[split]
train_count = 16
test_count = 64

[model]
width = 8
blocks = 1

[teacher]
steps = 3
batch_size = 4
sample_steps = 2

[discriminator]
levels = [4, 8]
backbone_steps = 2
backbone_batch = 4

[distill]
stage1_iters = 2
stage2_iters = 2
batch_size = 2

[sampler]
count = 4

[eval]
clips = 64
gap_trajectories = 2
diagnostic_clips = 2
"#;

fn vidistill(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_vidistill"))
        .arg("--config")
        .arg(&cfg)
        .arg("--work-dir")
        .arg(dir.join("work"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_is_deterministic_modulo_timestamps() {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &runs {
        for args in [
            &["datagen"][..],
            &["train-teacher"],
            &["distill", "--stage", "1"],
            &["distill", "--stage", "2"],
            &["sample", "--sampler", "tts", "--steps", "1", "--seed", "9", "--png", "grid.png"],
            &["eval"],
        ] {
            let mut args = args.to_vec();
            let png = dir.path().join("grid.png");
            let png = png.to_str().unwrap().to_string();
            if let Some(p) = args.iter_mut().find(|a| **a == "grid.png") {
                *p = &png;
            }
            ok(&vidistill(dir.path(), &args));
        }
        assert!(dir.path().join("grid.png").exists());
    }
    let names = ["datagen", "train-teacher", "distill-stage1", "distill-stage2", "eval"];
    for name in names {
        let read = |d: &tempfile::TempDir| {
            RunManifest::read(d.path().join("work/manifests").join(format!("{name}.toml")))
                .unwrap()
                .without_timestamps()
        };
        let (a, b) = (read(&runs[0]), read(&runs[1]));
        assert_eq!(a.outputs, b.outputs, "{name}");
        assert_eq!(a.seeds, b.seeds, "{name}");
    }
}

#[test]
fn refuses_to_overwrite_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    ok(&vidistill(dir.path(), &["datagen"]));
    let again = vidistill(dir.path(), &["datagen"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("refusing to overwrite"));
}

#[test]
fn missing_stage1_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vidistill(dir.path(), &["distill", "--stage", "2"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage1"));
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[distill]\nlambda_gan = 0.3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vidistill"))
        .arg("--config")
        .arg(&cfg)
        .arg("verify")
        .arg("--quick")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_gan"));
}

#[test]
fn quick_verify_passes() {
    let out = Command::new(env!("CARGO_BIN_EXE_vidistill"))
        .args(["verify", "--quick"])
        .output()
        .unwrap();
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 7, "{text}");
}
