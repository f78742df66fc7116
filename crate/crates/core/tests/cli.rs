use std::path::Path;
use std::process::{Command, Output};

fn hns(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hns-gnn"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect()
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(&hns(&["synth", "--count", "3", "--seed", "9", "--size", "64", "--output-dir", name], dir.path()));
    }
    let a = files(&dir.path().join("a"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, files(&dir.path().join("b")));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hns(&["train", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(hns(&["--help"], dir.path()).status.code(), Some(0));
    let out = hns(&["train", "--set", "train.batch_size=0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = hns(&["train", "--set", "model.nonsense=3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = hns(&["eval", "--checkpoint", "nowhere"], dir.path());
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn smoke_ablation_writes_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(&hns(&["ablate", "--variants", "BU,full", "--smoke", "--output-dir", "abl"], dir.path()));
    let csv = std::fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let rows: Vec<_> = csv.lines().skip(1).filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2, "{csv}");
    assert!(dir.path().join("abl/ablation.json").exists());
}

const DESK_TRAIN: &[&str] = &[
    "--set",
    "model.width_divisor=8",
    "--set",
    "model.attn_dim=16",
    "--set",
    "model.latent_nodes=16",
    "--set",
    "model.latent_dim=16",
    "--set",
    "model.border_width=16",
    "--set",
    "data.crop_size=64",
    "--set",
    "data.synthetic={train_count=2,val_count=2,test_count=2,size=64,seed=1}",
    "--set",
    "train.batch_size=2",
    "--set",
    "train.epochs=1",
];

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--output-dir", "ckpt"];
    args.extend_from_slice(DESK_TRAIN);
    ok(&hns(&args, dir.path()));
    assert!(dir.path().join("ckpt/last/manifest.json").exists());
    assert!(dir.path().join("ckpt/loss_log.csv").exists());

    ok(&hns(&["eval", "--checkpoint", "ckpt/last", "--output-dir", "ev", "--overlays"], dir.path()));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ev/report.json")).unwrap()).unwrap();
    for key in ["precision", "recall", "iou", "f1", "boundary_f", "counts"] {
        assert!(report.get(key).is_some(), "missing {key} in {report}");
    }
    assert_eq!(report["boundary_f"].as_object().unwrap().len(), 5);
    assert!(dir.path().join("ev/per_image.json").exists());
    assert_eq!(std::fs::read_dir(dir.path().join("ev/overlays")).unwrap().count(), 2);

    ok(&hns(&["synth", "--count", "1", "--size", "64", "--output-dir", "imgs"], dir.path()));
    let image = walk(&dir.path().join("imgs/images")).pop().unwrap();
    let stem = image.file_stem().unwrap().to_string_lossy().into_owned();
    ok(&hns(
        &["predict", "--checkpoint", "ckpt/last", "--output-dir", "pred", image.to_str().unwrap()],
        dir.path(),
    ));
    for suffix in ["road", "overlay", "border_l2", "border_l3", "border_l4"] {
        assert!(dir.path().join(format!("pred/{stem}_{suffix}.png")).exists(), "{suffix}");
    }

    let mismatch = hns(
        &[
            "eval",
            "--checkpoint",
            "ckpt/last",
            "--set",
            "model.variant=\"BU\"",
            "--set",
            "data.synthetic={train_count=2,val_count=2,test_count=2,size=64,seed=1}",
            "--output-dir",
            "ev2",
        ],
        dir.path(),
    );
    assert_ne!(mismatch.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("checkpoint"));
}

#[test]
fn make_borders_writes_pyramid() {
    let dir = tempfile::tempdir().unwrap();
    ok(&hns(&["synth", "--count", "2", "--size", "64", "--output-dir", "s"], dir.path()));
    ok(&hns(&["make-borders", "--masks", "s/masks", "--pyramid", "--output-dir", "b"], dir.path()));
    for level in [2, 3, 4] {
        assert_eq!(std::fs::read_dir(dir.path().join(format!("b/level_{level}"))).unwrap().count(), 2);
    }
}

#[test]
fn config_snapshot_reproduces_the_run_and_writes_stay_in_output_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--output-dir", "a", "--set", "train.epochs=2"];
    args.extend_from_slice(DESK_TRAIN);
    ok(&hns(&args, dir.path()));
    ok(&hns(&["train", "--config", "a/config.toml", "--output-dir", "b"], dir.path()));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/loss_log.csv"), read("b/loss_log.csv"));
    assert_eq!(read("a/last/params.safetensors"), read("b/last/params.safetensors"));

    ok(&hns(&["eval", "--checkpoint", "a/last", "--output-dir", "ev"], dir.path()));
    ok(&hns(&["make-borders", "--masks", "a", "--output-dir", "mb"], dir.path()));
    let mut top: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, ["a", "b", "ev", "mb"]);
}
