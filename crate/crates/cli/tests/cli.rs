use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hds(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hds")).args(args).current_dir(cwd).output().expect("spawn hds")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let o = hds(args, cwd);
    assert!(o.status.success(), "hds {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn gen_data_cardinality_determinism_and_guards() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--count", "20", "--seed", "7", "--desk", "--out", "a"], t);
    ok(&["gen-data", "--count", "20", "--seed", "7", "--desk", "--out", "b"], t);
    assert_eq!(csv_rows(&t.join("a/manifest.csv")).len(), 20);
    let (fa, fb) = (files(&t.join("a")), files(&t.join("b")));
    assert_eq!(fa.len(), 42);
    for (x, y) in fa.iter().zip(&fb) {
        if x.ends_with("manifest.json") {
            continue;
        }
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }

    ok(&["gen-data", "--count", "0", "--out", "empty"], t);
    assert!(csv_rows(&t.join("empty/manifest.csv")).is_empty());

    assert_eq!(code(&hds(&["gen-data", "--count", "1", "--desk", "--out", "a"], t)), 1);
    ok(&["gen-data", "--count", "1", "--desk", "--out", "a", "--force"], t);
    assert_eq!(code(&hds(&["gen-data", "--count", "1", "--mass-probability", "2", "--out", "c"], t)), 1);
    assert_eq!(code(&hds(&["gen-data", "--out", "c"], t)), 1);
}

#[test]
fn paper_dry_run_prints_the_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["train", "--preset", "paper", "--dry-run"], tmp.path());
    assert!(out.contains("main-stream 3x3 convolutions: 45"), "{out}");
    assert!(out.contains("training patch 512x384:\n  level 0: classification map 4x3"), "{out}");
    assert!(out.contains("test image 1024x512:\n  level 0: classification map 8x4"), "{out}");
    assert!(fs::read_dir(tmp.path()).unwrap().next().is_none(), "dry run wrote files");
}

#[test]
fn invalid_config_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--count", "6", "--desk", "--out", "data"], t);
    fs::write(t.join("bad.toml"), "[train]\nmomentum = 1.5\n").unwrap();
    let o = hds(&["train", "--data", "data", "--config", "bad.toml", "--out", "ck"], t);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));
    assert!(!t.join("ck").exists(), "rejected run wrote output");

    fs::write(t.join("typo.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = hds(&["train", "--data", "data", "--config", "typo.toml", "--out", "ck"], t);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    assert_eq!(code(&hds(&["train", "--data", "missing", "--preset", "desk", "--out", "ck"], t)), 1);
    assert_eq!(code(&hds(&["train", "--data", "data", "--preset", "desk", "--mode", "both", "--out", "ck"], t)), 1);
}

#[test]
fn desk_training_eval_and_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--count", "20", "--seed", "3", "--desk", "--mass-probability", "0.5", "--out", "data"], t);

    ok(&["train", "--data", "data", "--preset", "desk", "--mode", "hybrid", "--epochs", "3", "--out", "hy"], t);
    let log = csv_rows(&t.join("hy/train_log.csv"));
    assert_eq!(log.len(), 3);
    assert!(log.iter().any(|r| r[6].parse::<f64>().unwrap() > 0.0));
    for f in ["last.hdsw", "last.velocity.hdsw", "checkpoint.toml", "split.json", "manifest.json"] {
        assert!(t.join("hy").join(f).is_file(), "{f}");
    }
    let manifest = fs::read_to_string(t.join("hy/manifest.json")).unwrap();
    assert!(manifest.contains("\"last.hdsw\""), "{manifest}");

    ok(&["train", "--data", "data", "--preset", "desk", "--mode", "seg-only", "--epochs", "2", "--out", "seg"], t);
    for r in csv_rows(&t.join("seg/train_log.csv")) {
        assert_eq!(r[6].parse::<f64>().unwrap(), 0.0, "cls loss in seg-only mode");
    }

    let out = ok(&["eval", "--checkpoint", "hy", "--data", "data", "--split", "test", "--overlay", "--out", "ev"], t);
    assert!(out.contains("DSC") && out.contains("AUC"), "{out}");
    let metrics = csv_rows(&t.join("ev/metrics.csv"));
    assert_eq!(metrics[0][0], "test");
    let n: usize = metrics[0][1].parse().unwrap();
    assert_eq!(n, 4);
    assert_eq!(fs::read_dir(t.join("ev/overlays")).unwrap().count(), n);
    assert_eq!(csv_rows(&t.join("ev/predictions.csv")).len(), n);

    // A 1024x512 image gives an 8x4 map; an odd size is padded and cropped back.
    ok(&["gen-data", "--count", "1", "--seed", "1", "--out", "big"], t);
    ok(&["gen-data", "--count", "1", "--seed", "1", "--height", "300", "--width", "200", "--out", "odd"], t);
    let img = |d: &str| files(&t.join(d).join("images"))[0].to_string_lossy().into_owned();
    let out = ok(&["predict", "--checkpoint", "hy", "--image", &img("big"), "--out", "pb"], t);
    assert!(out.contains("level 0 classification map: 8x4"), "{out}");
    assert!(!out.contains("padded"), "{out}");
    let out = ok(&["predict", "--checkpoint", "hy", "--image", &img("odd"), "--out", "po"], t);
    assert!(out.contains("padded 300x200 to 384x256"), "{out}");
    let mask = image::open(t.join("po/mask.png")).unwrap();
    assert_eq!((mask.height(), mask.width()), (300, 200));
    let p: f64 = fs::read_to_string(t.join("po/score.txt")).unwrap().trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&p));

    // Weights from a different architecture are refused.
    let side = fs::read_to_string(t.join("hy/checkpoint.toml")).unwrap();
    fs::write(t.join("hy/checkpoint.toml"), side.replace("base_channels = 8", "base_channels = 4")).unwrap();
    let o = hds(&["eval", "--checkpoint", "hy", "--data", "data", "--out", "ev2"], t);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
}

#[test]
fn untrained_model_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--count", "40", "--seed", "11", "--desk", "--mass-probability", "0.5", "--out", "data"], t);
    fs::write(t.join("frozen.toml"), RUN_DESK_FROZEN).unwrap();
    ok(&["train", "--data", "data", "--config", "frozen.toml", "--no-split", "--out", "ck"], t);
    ok(&["eval", "--checkpoint", "ck", "--data", "data", "--split", "all", "--weights", "last", "--out", "ev"], t);
    let auc: f64 = csv_rows(&t.join("ev/metrics.csv"))[0][6].parse().unwrap();
    assert!((0.3..=0.7).contains(&auc), "untrained AUC {auc}");
}

const RUN_DESK_FROZEN: &str = "
[arch]
scales = 3
base_channels = 8
encoder_blocks = [2, 2, 2]
decoder_blocks = [2, 2]
supervision_levels = [0, 1, 2]

[train]
lr0 = 0.0
lr_milestones = []
epochs = 1
patch = [128, 128]

[data]
image_size = [256, 128]
";

#[test]
fn overfit_checkpoint_recovers_its_images() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--count", "4", "--seed", "1", "--desk", "--mass-probability", "0.5", "--out", "data"], t);
    ok(&["train", "--data", "data", "--preset", "desk", "--no-split", "--out", "ck"], t);
    ok(&["eval", "--checkpoint", "ck", "--data", "data", "--split", "train", "--weights", "last", "--out", "ev"], t);
    let m = &csv_rows(&t.join("ev/metrics.csv"))[0];
    let dsc: f64 = m[2].parse().unwrap();
    assert!(dsc > 0.9, "overfit DSC {dsc}");

    let rows = fs::read_to_string(t.join("data/manifest.csv")).unwrap();
    let negative = rows.lines().skip(1).find(|l| l.ends_with(",0")).expect("a mass-free image");
    let path = t.join("data").join(negative.split(',').nth(1).unwrap());
    let out = ok(&["predict", "--checkpoint", "ck", "--weights", "last", "--image", path.to_str().unwrap(), "--out", "pr"], t);
    let p: f64 = fs::read_to_string(t.join("pr/score.txt")).unwrap().trim().parse().unwrap();
    assert!(p < 0.5, "background image scored {p}: {out}");
}

#[test]
fn verify_passes_across_seeds_and_catches_a_broken_backward() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in ["0", "1", "2", "3", "4"] {
        let out = ok(&["verify", "--seed", seed], tmp.path());
        assert!(out.contains(" 0 failed"), "{out}");
    }
    let o = hds(&["verify", "--inject-conv-fault"], tmp.path());
    assert_ne!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("FAIL gradient conv2d")), "{out}");
}
