use std::path::Path;
use std::process::Command;

use bedfuse::harness::manifest::RunManifest;

const CONFIG: &str = r#"
seed = 5

[dataset]
root = "data"
covers = ["uncover", "cover1"]
subjects = 4
poses = 2

[backbone]
preset = "tiny"
input_size = 64

[train]
steps = 2
batch_size = 4
overlays = 1

[fusion]
stage = 2
fusion_type = "addition"
strategy = "frozen_weighted"
modalities = ["visible", "lwir"]
primary = "visible"
checkpoints = { visible = "out/checkpoints/unimodal_visible.ckpt", lwir = "out/checkpoints/unimodal_lwir.ckpt" }

[gan]
preset = "tiny"
epochs_total = 2
lr_constant_epochs = 1
checkpoint = "out/checkpoints/translator.ckpt"

[eval]
checkpoint = "out/checkpoints/fusion.ckpt"

[plot]
inputs = ["out/losses.csv"]
"#;

fn bedfuse(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_bedfuse"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok(dir: &Path, args: &[&str]) {
    let (code, err) = bedfuse(dir, args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
}

fn pipeline(dir: &Path, config: &str) {
    std::fs::write(dir.join("cfg.toml"), config).unwrap();
    let c = ["--config", "cfg.toml"];
    ok(dir, &[&c[..], &["--out", "data", "gen-data"]].concat());
    for m in ["visible", "lwir"] {
        ok(dir, &[&c[..], &["--out", "out", "train-unimodal", "--modality", m]].concat());
    }
    for cmd in ["train-fusion", "train-cgan", "reconstruct-eval", "plot"] {
        ok(dir, &[&c[..], &["--out", "out", cmd]].concat());
    }
}

#[test]
fn pipeline_is_reproducible_and_recorded() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), CONFIG);
    pipeline(b.path(), CONFIG);
    let metrics = std::fs::read_to_string(a.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics, std::fs::read_to_string(b.path().join("out/metrics.csv")).unwrap());
    let header = metrics.lines().next().unwrap();
    assert_eq!(
        header,
        "Joint,unimodal_visible,unimodal_lwir,visible+lwir_frozen_weighted_addition_stage2,real,synthetic_square_bb,synthetic_no_bb"
    );
    assert_eq!(metrics.lines().count(), 16);
    assert_eq!(
        std::fs::read(a.path().join("out/losses.csv")).unwrap(),
        std::fs::read(b.path().join("out/losses.csv")).unwrap()
    );
    let losses = std::fs::read_to_string(a.path().join("out/losses.csv")).unwrap();
    assert!(losses.starts_with("epoch,g_l1,g_adv,d_loss\n"));
    assert_eq!(losses.lines().count(), 3);

    let out = a.path().join("out");
    let manifest = RunManifest::load(&out).unwrap();
    manifest.verify(&out).unwrap();
    let commands: Vec<&str> = manifest.runs.iter().map(|r| r.command.as_str()).collect();
    assert_eq!(
        commands,
        ["train-unimodal", "train-unimodal", "train-fusion", "train-cgan", "reconstruct-eval", "plot"]
    );
    assert!(manifest.runs.iter().all(|r| r.seed == 5));
    RunManifest::load(&a.path().join("data")).unwrap().verify(&a.path().join("data")).unwrap();

    let overlays: Vec<String> = std::fs::read_dir(out.join("overlays"))
        .unwrap()
        .flat_map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                std::fs::read_dir(p).unwrap().map(|f| f.unwrap().file_name().to_string_lossy().into_owned()).collect()
            } else {
                vec![p.file_name().unwrap().to_string_lossy().into_owned()]
            }
        })
        .collect();
    assert!(!overlays.is_empty());
    for name in &overlays {
        let stem = name.strip_suffix(".png").expect("png overlays");
        let parts: Vec<&str> = stem.split('_').collect();
        assert_eq!(parts.len(), 3, "{name}");
        assert!(parts[0].len() == 5 && parts[1].len() == 6, "{name}");
        assert!(["uncover", "cover1", "cover2"].contains(&parts[2]), "{name}");
    }
    assert!(out.join("checkpoints/fusion.ckpt").is_file());
    assert!(out.join("checkpoints/translator.ckpt").is_file());

    // a tampered artifact no longer verifies
    std::fs::write(out.join("losses.csv"), "epoch,g_l1,g_adv,d_loss\n").unwrap();
    assert!(RunManifest::load(&out).unwrap().verify(&out).is_err());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("typo.toml"), "[dataset]\nsubjectz = 3\n").unwrap();
    let (code, err) = bedfuse(d, &["--config", "typo.toml", "evaluate"]);
    assert_eq!(code, 2, "{err}");
    let (code, _) = bedfuse(d, &["--config", "missing.toml", "evaluate"]);
    assert_eq!(code, 2);

    std::fs::write(d.join("cfg.toml"), CONFIG).unwrap();
    let (code, err) = bedfuse(d, &["--config", "cfg.toml", "--out", "out", "train-unimodal", "--modality", "lwir"]);
    assert_eq!(code, 3, "missing dataset: {err}");

    ok(d, &["--config", "cfg.toml", "--out", "data", "gen-data", "--subjects", "2", "--poses", "1"]);
    let (code, err) = bedfuse(d, &["--config", "cfg.toml", "--out", "out", "train-fusion"]);
    assert_eq!(code, 2, "listed checkpoints do not exist: {err}");
    let unlisted = CONFIG.replace("checkpoints = { visible", "# checkpoints = { visible");
    std::fs::write(d.join("unlisted.toml"), unlisted).unwrap();
    let (code, err) = bedfuse(d, &["--config", "unlisted.toml", "--out", "out", "train-fusion"]);
    assert_eq!(code, 2, "frozen fusion without checkpoints: {err}");
    let (code, _) = bedfuse(d, &["--config", "cfg.toml", "--out", "out", "train-unimodal"]);
    assert_eq!(code, 2, "no modality given");

    let diverging = CONFIG.replace("steps = 2", "steps = 6\nlr = 1e30");
    std::fs::write(d.join("diverge.toml"), diverging).unwrap();
    let (code, err) = bedfuse(d, &["--config", "diverge.toml", "--out", "out", "train-unimodal", "--modality", "lwir"]);
    assert_eq!(code, 4, "non-finite training: {err}");
}
