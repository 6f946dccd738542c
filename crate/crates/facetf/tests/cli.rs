//! End-to-end tests of the `facetf` binary: every subcommand, the
//! documented exit codes, and output-file formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use facetf::ppm::write_ppm;

fn facetf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facetf"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

/// A config that trains in well under a second.
const TINY_CFG: &str = "image_side = 12
channels = 1
patch = 4
stride = 4
dim = 16
heads = 2
depth = 1
mlp_dim = 16
identities = 3
samples_per_identity = 4
epochs = 2
batch_size = 8
warmup_epochs = 1
base_lr = 0.001
seed = 3
augment = false
";

fn write_cfg(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

/// Trains the tiny config into `dir` and returns the checkpoint path.
fn train_tiny(dir: &Path, extra: &str) -> PathBuf {
    let cfg = write_cfg(dir, &format!("{TINY_CFG}{extra}"));
    let out = facetf(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    dir.join("model.ftck")
}

/// Writes a 12x12 gray PPM whose pixels ramp from `base`.
fn gradient_ppm(dir: &Path, name: &str, base: u8) -> PathBuf {
    let path = dir.join(name);
    let mut rgb = Vec::with_capacity(12 * 12 * 3);
    for i in 0..144u32 {
        let v = base.wrapping_add((i % 97) as u8);
        rgb.extend_from_slice(&[v, v, v]);
    }
    write_ppm(&path, 12, 12, &rgb).unwrap();
    path
}

fn write_pairs(dir: &Path) -> PathBuf {
    gradient_ppm(dir, "a1.ppm", 0);
    gradient_ppm(dir, "a2.ppm", 5);
    gradient_ppm(dir, "b1.ppm", 120);
    gradient_ppm(dir, "b2.ppm", 125);
    let pairs = dir.join("pairs.csv");
    fs::write(
        &pairs,
        "a1.ppm,a2.ppm,1\nb1.ppm,b2.ppm,1\na1.ppm,b1.ppm,0\n\
         a2.ppm,b2.ppm,0\na1.ppm,b2.ppm,1\nb1.ppm,a2.ppm,0\n",
    )
    .unwrap();
    pairs
}

// ── General plumbing ─────────────────────────────────────────────────────

#[test]
fn help_prints_usage_and_exits_zero() {
    let out = facetf(&["help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for cmd in ["train", "eval", "analyze", "profile", "bench"] {
        assert!(text.contains(cmd), "usage text is missing `{cmd}`");
    }
}

#[test]
fn missing_command_and_unknown_flags_are_usage_errors() {
    assert_eq!(code(&facetf(&[])), 2);
    let out = facetf(&["teleport"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("teleport"));
    let out = facetf(&["profile", "--wat"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--wat"));
}

// ── train ────────────────────────────────────────────────────────────────

#[test]
fn train_writes_checkpoint_and_csv_report() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "");
    assert!(ck.is_file());
    let csv = fs::read_to_string(dir.path().join("training.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,step,lr,loss,train_acc"));
    assert_eq!(lines.count(), 4, "2 epochs of 2 steps each");
}

#[test]
fn train_rejects_missing_and_invalid_configs() {
    let dir = tempfile::tempdir().unwrap();
    let out = facetf(&["train", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(code(&out), 2);

    let bad = write_cfg(dir.path(), "dim = 510\nheads = 8\n");
    let out = facetf(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "indivisible width must be refused: {}", stderr(&out));

    let unknown = dir.path().join("unk.cfg");
    fs::write(&unknown, "learning_rate = 0.1\n").unwrap();
    let out = facetf(&["train", "--config", unknown.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "got: {}", stderr(&out));
}

#[test]
fn deterministic_runs_with_one_seed_agree_byte_for_byte() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let cfg1 = write_cfg(d1.path(), TINY_CFG);
    for d in [&d1, &d2] {
        let out = facetf(&[
            "train",
            "--config",
            cfg1.to_str().unwrap(),
            "--out",
            d.path().to_str().unwrap(),
            "--deterministic",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = fs::read(d1.path().join("model.ftck")).unwrap();
    let b = fs::read(d2.path().join("model.ftck")).unwrap();
    assert_eq!(a, b, "same seed and config must give identical checkpoints");
    let ra = fs::read(d1.path().join("training.csv")).unwrap();
    let rb = fs::read(d2.path().join("training.csv")).unwrap();
    assert_eq!(ra, rb, "reports must match too");
}

// ── eval ─────────────────────────────────────────────────────────────────

#[test]
fn eval_scores_pairs_and_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "");
    let pairs = write_pairs(dir.path());
    let out = facetf(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--pairs",
        pairs.to_str().unwrap(),
        "--folds",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("pair accuracy"));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value\n"));
    assert!(metrics.contains("mean_pair_accuracy,"));
    assert!(metrics.contains("fold_2_accuracy,"));
}

#[test]
fn eval_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "");
    let pairs = write_pairs(dir.path());
    let run = || {
        let out = facetf(&[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--pairs",
            pairs.to_str().unwrap(),
            "--folds",
            "3",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(dir.path().join("metrics.csv")).unwrap()
    };
    assert_eq!(run(), run(), "same checkpoint and pairs must reproduce the report");
}

#[test]
fn eval_rejects_empty_pairs_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "");
    let pairs = dir.path().join("none.csv");
    fs::write(&pairs, "# no rows\n").unwrap();
    let out = facetf(&["eval", "--checkpoint", ck.to_str().unwrap(), "--pairs", pairs.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn eval_rejects_mismatched_image_grid_with_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "");
    let big = dir.path().join("big.ppm");
    write_ppm(&big, 16, 16, &vec![9u8; 16 * 16 * 3]).unwrap();
    let pairs = dir.path().join("big.csv");
    fs::write(&pairs, "big.ppm,big.ppm,1\nbig.ppm,big.ppm,0\n").unwrap();
    let out = facetf(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--pairs",
        pairs.to_str().unwrap(),
        "--folds",
        "2",
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn downcast_is_opt_in_when_computing_at_lower_precision() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "precision = f64\n");
    let pairs = write_pairs(dir.path());
    let base = [
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--pairs",
        pairs.to_str().unwrap(),
        "--folds",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
        "--precision",
        "f32",
    ];
    let out = facetf(&base);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("allow-downcast"), "got: {}", stderr(&out));

    let mut permitted: Vec<&str> = base.to_vec();
    permitted.push("--allow-downcast");
    let out = facetf(&permitted);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

// ── analyze ──────────────────────────────────────────────────────────────

#[test]
fn analyze_emits_heatmap_and_distance_profile() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "");
    let image = gradient_ppm(dir.path(), "face.ppm", 40);
    let out = facetf(&[
        "analyze",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let heatmap = fs::read(dir.path().join("heatmap.ppm")).unwrap();
    assert!(heatmap.starts_with(b"P6"), "heatmap must be a raw PPM");

    let distances = fs::read_to_string(dir.path().join("distances.csv")).unwrap();
    let mut lines = distances.lines();
    assert_eq!(lines.next(), Some("layer,head,mean_distance_px"));
    assert_eq!(lines.count(), 2, "1 layer x 2 heads");
}

// ── profile ──────────────────────────────────────────────────────────────

#[test]
fn profile_reports_published_model_scale() {
    let out = facetf(&["profile", "--preset", "vit-p8s8"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("63.2 M params"), "got: {text}");
    assert!(text.contains("13.2 G MACs"), "got: {text}");
    assert!(text.contains("196 patches"), "got: {text}");
    for preset in ["vit-p10s8", "vit-p12s8"] {
        let out = facetf(&["profile", "--preset", preset]);
        assert!(stdout(&out).contains("63.3 M params"), "{preset}: {}", stdout(&out));
    }
}

#[test]
fn profile_requires_a_model_and_validates_it() {
    let out = facetf(&["profile"]);
    assert_eq!(code(&out), 2);
    let out = facetf(&["profile", "--preset", "vit-p16s16"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("vit-p16s16"), "got: {}", stderr(&out));
}

// ── bench ────────────────────────────────────────────────────────────────

#[test]
fn bench_measures_throughput_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY_CFG);
    let out = facetf(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("images/s"), "got: {}", stdout(&out));
}
