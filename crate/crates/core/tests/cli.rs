use std::path::Path;
use std::process::Command;
use std::time::Instant;

use accut::config::RESOLVED_CONFIG_FILE;

const TINY: &str = r#"
[data]
n_subjects = 6
split_ratios = [0.5, 0.0, 0.5]

[data.source]
image_height = 64
image_width = 64

[data.target]
image_height = 64
image_width = 64

[model]
width = 4
disc_width = 4
embed_dim = 16

[loss]
mode = "accut_s"
num_patches = 32

[train]
epochs = 1
image_size = [64, 64]
checkpoint_interval = 1

[eval.uda]
folds = 2
epochs = 1
crop_size = [32, 32]
batch_size = 2

[eval.uda.backbone]
kind = "unet"
width = 4
levels = 3
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_accut"));
    c.env_remove(accut::cli::OUTPUT_ROOT_ENV).env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["accut"];
    full.extend_from_slice(args);
    accut::cli::run(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn chain(root: &Path, cfg: &str) {
    let (data, train, trans, fid) = (root.join("data"), root.join("train"), root.join("trans"), root.join("fid"));
    assert_eq!(run(&["--config", cfg, "gen-data", "--out", s(&data)]), 0);
    assert_eq!(run(&["--config", cfg, "train", "--data", s(&data), "--out", s(&train)]), 0);
    let ckpt = train.join("checkpoints/epoch_0001.ckpt");
    assert!(ckpt.exists());
    assert_eq!(run(&["--config", cfg, "translate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&trans)]), 0);
    assert_eq!(
        run(&["--config", cfg, "eval-fid", "--real", s(&data), "--fake", s(&trans), "--out", s(&fid)]),
        0
    );
    for dir in [&data, &train, &trans, &fid] {
        assert!(dir.join(RESOLVED_CONFIG_FILE).exists(), "{}", dir.display());
    }
}

#[test]
fn smoke_chain_is_quick_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let start = Instant::now();
    chain(&tmp.path().join("a"), s(&cfg));
    assert!(start.elapsed().as_secs() < 300);
    chain(&tmp.path().join("b"), s(&cfg));
    for rel in [
        "train/metrics.jsonl",
        "train/checkpoints/epoch_0001.ckpt",
        "trans/source/images/subject_000.png",
        "fid/fid.json",
        "data/manifest.json",
    ] {
        let a = std::fs::read(tmp.path().join("a").join(rel)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(rel)).unwrap();
        assert!(a == b, "{rel} differs between reruns");
    }
    let fid: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("a/fid/fid.json")).unwrap()).unwrap();
    let hash = accut::config::parse_config(&cfg).unwrap().hash;
    assert_eq!(fid["config_hash"], hash.as_str());
    assert!(fid["fid"].as_f64().unwrap() >= 0.0);

    // the remaining evaluators on the same artifacts
    let a = tmp.path().join("a");
    let ckpt = a.join("train/checkpoints/epoch_0001.ckpt");
    assert_eq!(
        run(&["--config", s(&cfg), "eval-dice", "--checkpoint", s(&ckpt), "--data", s(&a.join("data")), "--out", s(&a.join("dice"))]),
        0
    );
    assert!(a.join("dice/dice.json").exists());
    assert_eq!(
        run(&["--config", s(&cfg), "ablate", "--checkpoint", s(&ckpt), "--data", s(&a.join("data")), "--pairs", "3", "--out", s(&a.join("abl"))]),
        0
    );
    assert!(a.join("abl/ablation_grid.png").exists());
    assert_eq!(
        run(&[
            "--config", s(&cfg), "eval-uda", "--train-manifest", s(&a.join("trans")), "--target-test",
            s(&a.join("data")), "--variant", "accut_s", "--out", s(&a.join("uda")),
        ]),
        0
    );
    let csv = std::fs::read_to_string(a.join("uda/results.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("accut_s,"));
    assert!(a.join("uda").join(RESOLVED_CONFIG_FILE).exists());

    // resuming to a later epoch continues the same run
    let more = tmp.path().join("more.toml");
    std::fs::write(&more, TINY.replace("epochs = 1\nimage_size", "epochs = 2\nimage_size")).unwrap();
    assert_eq!(
        run(&["--config", s(&more), "train", "--data", s(&a.join("data")), "--resume", s(&ckpt), "--out", s(&a.join("train"))]),
        0
    );
    assert!(a.join("train/checkpoints/epoch_0002.ckpt").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rat = 1.0\n").unwrap();
    let out = bin().args(["--config", s(&bad), "gen-data", "--out", s(&tmp.path().join("x"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rat"));

    let out = bin()
        .args(["train", "--data", s(&tmp.path().join("missing")), "--out", s(&tmp.path().join("y"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    let corrupt = tmp.path().join("c.ckpt");
    std::fs::write(&corrupt, b"not a checkpoint").unwrap();
    let out = bin()
        .args(["ablate", "--checkpoint", s(&corrupt), "--data", s(tmp.path()), "--out", s(&tmp.path().join("z"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    let help = bin().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["gen-data", "train", "translate", "eval-fid", "eval-dice", "eval-uda", "ablate"] {
        assert!(text.contains(sub), "{sub} missing from --help");
    }
}

#[test]
fn output_root_env_prefixes_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let status = bin()
        .env(accut::cli::OUTPUT_ROOT_ENV, tmp.path())
        .args(["--config", s(&cfg), "gen-data", "--out", "rel/data"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("rel/data/manifest.json").exists());
    assert!(tmp.path().join("rel/data").join(RESOLVED_CONFIG_FILE).exists());
}
