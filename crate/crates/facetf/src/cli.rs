//! Command-line interface: argument parsing and the five subcommands
//! (`train`, `eval`, `analyze`, `profile`, `bench`).
//!
//! Errors map to process exit codes through [`Error::exit_code`]: 2 for
//! usage, config, and I/O problems, 3 for numerical failures, 4 for
//! shape or compatibility mismatches.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attn::{export_heatmap, mean_attention_distance, rollout};
use crate::checkpoint::{self, peek_meta};
use crate::config::{preset, DataSource, RunConfig};
use crate::cosface::MarginHead;
use crate::encoder::{embed_image, ModelParams};
use crate::error::{Error, Result};
use crate::eval::{
    cosine_similarity, fold_accuracy, profile, tar_at_far, DEFAULT_FAR_TARGETS,
};
use crate::manifest::{load_manifest, load_pairs, ImageDataset};
use crate::ppm::load_image;
use crate::tensor::{Precision, Scalar, Tensor};
use crate::trainer::{
    steps_per_epoch, train, Dataset, Schedule, SyntheticDataset, TrainConfig,
};

const USAGE: &str = "usage: facetf <command> [flags]

commands:
  train     fit a model from a config file, writing a checkpoint and report
  eval      score verification pairs against a checkpoint
  analyze   export an attention heatmap and per-head distance profile
  profile   report parameter and multiply-accumulate counts
  bench     measure single-image embedding throughput

flags:
  --config PATH      run configuration (key = value lines)
  --preset NAME      built-in geometry: vit-p8s8, vit-p10s8, vit-p12s8
  --seed N           override the configured seed
  --threads N        override the configured worker count
  --deterministic    force one worker with fixed-order reductions
  --out DIR          output directory (default: current directory)
  --checkpoint PATH  saved model, for eval and analyze
  --pairs PATH       verification pairs CSV `path_a,path_b,same`, for eval
  --image PATH       input image, for analyze
  --folds N          cross-validation folds for eval (default 10)
  --precision NAME   compute type for eval/analyze, f32 or f64
                     (default: whatever the checkpoint stores)
  --allow-downcast   permit narrowing a float64 checkpoint to float32
  --include-head     count the classifier head in profile

environment:
  FACETF_LOG={error,info,debug}   logging verbosity (default error)";

// ── Flag parsing ─────────────────────────────────────────────────────────

#[derive(Debug, Default)]
struct Flags {
    config: Option<PathBuf>,
    preset: Option<String>,
    seed: Option<u64>,
    threads: Option<usize>,
    deterministic: bool,
    allow_downcast: bool,
    include_head: bool,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    pairs: Option<PathBuf>,
    image: Option<PathBuf>,
    folds: usize,
    precision: Option<Precision>,
}

fn parse_flags(args: &[String]) -> Result<Flags> {
    let mut flags = Flags { folds: 10, ..Flags::default() };
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let mut value = |name: &str| {
            it.next()
                .cloned()
                .ok_or_else(|| Error::Usage(format!("flag {name} needs a value")))
        };
        match arg.as_str() {
            "--config" => flags.config = Some(PathBuf::from(value("--config")?)),
            "--preset" => flags.preset = Some(value("--preset")?),
            "--seed" => {
                let v = value("--seed")?;
                flags.seed = Some(v.parse().map_err(|_| {
                    Error::Usage(format!("--seed expects an integer, got `{v}`"))
                })?);
            }
            "--threads" => {
                let v = value("--threads")?;
                flags.threads = Some(v.parse().map_err(|_| {
                    Error::Usage(format!("--threads expects an integer, got `{v}`"))
                })?);
            }
            "--deterministic" => flags.deterministic = true,
            "--allow-downcast" => flags.allow_downcast = true,
            "--include-head" => flags.include_head = true,
            "--out" => flags.out = Some(PathBuf::from(value("--out")?)),
            "--checkpoint" => flags.checkpoint = Some(PathBuf::from(value("--checkpoint")?)),
            "--pairs" => flags.pairs = Some(PathBuf::from(value("--pairs")?)),
            "--image" => flags.image = Some(PathBuf::from(value("--image")?)),
            "--folds" => {
                let v = value("--folds")?;
                flags.folds = v.parse().map_err(|_| {
                    Error::Usage(format!("--folds expects an integer, got `{v}`"))
                })?;
            }
            "--precision" => {
                let v = value("--precision")?;
                flags.precision = Some(Precision::parse(&v).ok_or_else(|| {
                    Error::Usage(format!("--precision expects f32 or f64, got `{v}`"))
                })?);
            }
            other => return Err(Error::Usage(format!("unknown flag `{other}`"))),
        }
    }
    Ok(flags)
}

/// Builds the run configuration from `--config` or `--preset`, then layers
/// the command-line overrides on top.
fn resolve_config(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match (&flags.config, &flags.preset) {
        (Some(_), Some(_)) => {
            return Err(Error::Usage("pass --config or --preset, not both".to_string()))
        }
        (Some(path), None) => RunConfig::from_file(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            return Err(Error::Usage("this command needs --config or --preset".to_string()))
        }
    };
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = flags.threads {
        cfg.threads = threads;
    }
    if flags.deterministic {
        cfg.threads = 1;
    }
    Ok(cfg)
}

fn out_dir(flags: &Flags) -> Result<PathBuf> {
    let dir = flags.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn require(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Usage(format!("this command needs {flag}")))
}

/// Entry point shared by the binary and the integration tests.
pub fn run(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        println!("{USAGE}");
        return Err(Error::Usage("no command given".to_string()));
    };
    if matches!(command.as_str(), "help" | "-h" | "--help") {
        println!("{USAGE}");
        return Ok(());
    }
    let flags = parse_flags(&args[1..])?;
    match command.as_str() {
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "analyze" => cmd_analyze(&flags),
        "profile" => cmd_profile(&flags),
        "bench" => cmd_bench(&flags),
        other => Err(Error::Usage(format!("unknown command `{other}`; try `facetf help`"))),
    }
}

// ── train ────────────────────────────────────────────────────────────────

fn build_dataset<S: Scalar>(cfg: &RunConfig) -> Result<Box<dyn Dataset<S>>> {
    match &cfg.data {
        DataSource::Synthetic { identities, samples_per_identity, noise_sigma, max_translation } => {
            let mut ds = SyntheticDataset::new(
                cfg.seed,
                *identities,
                *samples_per_identity,
                cfg.patch.image_side,
            );
            ds.channels = cfg.patch.channels;
            ds.noise_sigma = *noise_sigma;
            ds.max_translation = *max_translation;
            Ok(Box::new(ds))
        }
        DataSource::Manifest(path) => Ok(Box::new(ImageDataset::<S>::load(
            path,
            cfg.patch.image_side,
            cfg.patch.channels,
        )?)),
    }
}

fn train_typed<S: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = build_dataset::<S>(cfg)?;
    let spe = steps_per_epoch(dataset.len(), cfg.batch_size);
    let schedule = Schedule::new(
        cfg.warmup_epochs * spe,
        cfg.epochs * spe,
        cfg.base_lr,
        cfg.final_lr,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModelParams::<S>::init(&cfg.patch, &cfg.model, &mut rng);
    let mut head = MarginHead::<S>::init(dataset.num_classes(), cfg.model.dim, &mut rng);

    let mut tc = TrainConfig::new(cfg.epochs);
    tc.batch_size = cfg.batch_size;
    tc.seed = cfg.seed;
    tc.threads = cfg.threads;
    tc.augment = cfg.augment;
    tc.optimizer = cfg.optimizer;
    tc.stop_at_train_acc = cfg.stop_at_train_acc;
    tc.manual_drop = cfg.lr_drop;

    let report = train(
        &mut model,
        &mut head,
        dataset.as_ref(),
        &cfg.patch,
        &cfg.model,
        &cfg.margin,
        &schedule,
        &tc,
        |_, _, _| Ok(()),
    )?;

    let ck_path = out.join("model.ftck");
    checkpoint::save(&ck_path, &cfg.patch, &cfg.model, &cfg.margin, &model, &head)?;
    let csv_path = out.join("training.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    report.write_csv(&mut csv).map_err(|e| Error::io(&csv_path, e))?;

    println!(
        "trained {} epochs ({} steps), final train accuracy {:.4}",
        report.epochs.len(),
        report.steps.len(),
        report.final_train_acc()
    );
    println!("wrote {} and {}", ck_path.display(), csv_path.display());
    Ok(())
}

fn cmd_train(flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let out = out_dir(flags)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &out),
        Precision::F64 => train_typed::<f64>(&cfg, &out),
    }
}

// ── eval ─────────────────────────────────────────────────────────────────

fn eval_typed<S: Scalar>(flags: &Flags, ck_path: &Path, pairs_path: &Path) -> Result<()> {
    let ck = checkpoint::load::<S>(ck_path, flags.allow_downcast)?;
    let pairs = load_pairs(pairs_path)?;
    let out = out_dir(flags)?;

    let mut cache: HashMap<PathBuf, Tensor<S>> = HashMap::new();
    let embed = |path: &PathBuf, cache: &mut HashMap<PathBuf, Tensor<S>>| -> Result<Tensor<S>> {
        if let Some(e) = cache.get(path) {
            return Ok(e.clone());
        }
        let img = load_image::<S>(path, ck.meta.patch.image_side, ck.meta.patch.channels)?;
        let (emb, _) = embed_image(&img, &ck.params, &ck.meta.patch, &ck.meta.model, false)?;
        cache.insert(path.clone(), emb.clone());
        Ok(emb)
    };

    let mut scores = Vec::with_capacity(pairs.len());
    let mut same = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let ea = embed(&pair.a, &mut cache)?;
        let eb = embed(&pair.b, &mut cache)?;
        scores.push(cosine_similarity(&ea, &eb)?);
        same.push(pair.same);
    }

    let folds = fold_accuracy(&scores, &same, flags.folds)?;
    let genuine: Vec<f64> =
        scores.iter().zip(&same).filter(|(_, s)| **s).map(|(v, _)| *v).collect();
    let impostor: Vec<f64> =
        scores.iter().zip(&same).filter(|(_, s)| !**s).map(|(v, _)| *v).collect();

    let mut csv = String::from("metric,value\n");
    println!(
        "pair accuracy: {:.4} over {} folds ({} pairs)",
        folds.mean_accuracy,
        folds.fold_accuracies.len(),
        pairs.len()
    );
    csv.push_str(&format!("mean_pair_accuracy,{}\n", folds.mean_accuracy));
    for (i, acc) in folds.fold_accuracies.iter().enumerate() {
        csv.push_str(&format!("fold_{}_accuracy,{acc}\n", i + 1));
    }

    if genuine.is_empty() || impostor.is_empty() {
        println!("tar@far skipped: needs both genuine and impostor pairs");
    } else {
        for reading in tar_at_far(&genuine, &impostor, &DEFAULT_FAR_TARGETS)? {
            match reading.tar {
                Some(tar) => {
                    println!(
                        "tar @ far {:.0e}: {:.4} (threshold {:.6}, achieved far {:.6})",
                        reading.far_target,
                        tar,
                        reading.threshold.unwrap(),
                        reading.achieved_far.unwrap()
                    );
                    csv.push_str(&format!("tar_at_far_{},{tar}\n", reading.far_target));
                }
                None => {
                    println!(
                        "tar @ far {:.0e}: unattainable with {} impostor pairs",
                        reading.far_target,
                        impostor.len()
                    );
                    csv.push_str(&format!("tar_at_far_{},\n", reading.far_target));
                }
            }
        }
    }

    let csv_path = out.join("metrics.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_eval(flags: &Flags) -> Result<()> {
    let ck_path = require(&flags.checkpoint, "--checkpoint")?;
    let pairs_path = require(&flags.pairs, "--pairs")?;
    let precision = flags.precision.unwrap_or(peek_meta(&ck_path)?.precision);
    match precision {
        Precision::F32 => eval_typed::<f32>(flags, &ck_path, &pairs_path),
        Precision::F64 => eval_typed::<f64>(flags, &ck_path, &pairs_path),
    }
}

// ── analyze ──────────────────────────────────────────────────────────────

fn analyze_typed<S: Scalar>(flags: &Flags, ck_path: &Path, image_path: &Path) -> Result<()> {
    let ck = checkpoint::load::<S>(ck_path, flags.allow_downcast)?;
    let out = out_dir(flags)?;
    let image =
        load_image::<S>(image_path, ck.meta.patch.image_side, ck.meta.patch.channels)?;
    let (_, record) = embed_image(&image, &ck.params, &ck.meta.patch, &ck.meta.model, true)?;
    let record = record.expect("recording was requested");

    let map = rollout(&record, ck.meta.model.depth)?;
    let heatmap_path = out.join("heatmap.ppm");
    export_heatmap(&map.class_row, &image, &ck.meta.patch, &heatmap_path)?;

    let distances = mean_attention_distance(&record, &ck.meta.patch)?;
    let csv_path = out.join("distances.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    distances.write_csv(&mut csv).map_err(|e| Error::io(&csv_path, e))?;

    if map.degenerate {
        println!("note: class token attended only to itself; heatmap is uninformative");
    }
    println!("wrote {} and {}", heatmap_path.display(), csv_path.display());
    Ok(())
}

fn cmd_analyze(flags: &Flags) -> Result<()> {
    let ck_path = require(&flags.checkpoint, "--checkpoint")?;
    let image_path = require(&flags.image, "--image")?;
    let precision = flags.precision.unwrap_or(peek_meta(&ck_path)?.precision);
    match precision {
        Precision::F32 => analyze_typed::<f32>(flags, &ck_path, &image_path),
        Precision::F64 => analyze_typed::<f64>(flags, &ck_path, &image_path),
    }
}

// ── profile ──────────────────────────────────────────────────────────────

fn format_params(n: u64) -> String {
    if n >= 1_000_000 {
        format!("{:.1} M", n as f64 / 1e6)
    } else {
        n.to_string()
    }
}

fn format_macs(n: u64) -> String {
    if n >= 1_000_000_000 {
        format!("{:.1} G", n as f64 / 1e9)
    } else if n >= 1_000_000 {
        format!("{:.1} M", n as f64 / 1e6)
    } else {
        n.to_string()
    }
}

fn cmd_profile(flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let head_classes = match &cfg.data {
        DataSource::Synthetic { identities, .. } => *identities,
        DataSource::Manifest(path) => {
            if flags.include_head {
                load_manifest(path)?.iter().map(|e| e.label + 1).max().unwrap_or(0)
            } else {
                0
            }
        }
    };
    let p = profile(&cfg.model, &cfg.patch, head_classes, flags.include_head);
    let name = flags
        .preset
        .clone()
        .or_else(|| flags.config.as_ref().map(|p| p.display().to_string()))
        .unwrap_or_default();
    println!("{name}: {} params, {} MACs", format_params(p.param_count), format_macs(p.mac_count));
    println!(
        "  tokens: {} patches + 1 class; width {}, {} heads, depth {}, MLP {}",
        cfg.patch.num_patches(),
        cfg.model.dim,
        cfg.model.heads,
        cfg.model.depth,
        cfg.model.mlp_dim
    );
    if flags.include_head {
        println!("  classifier head over {head_classes} identities included");
    } else {
        println!("  backbone only; classifier head excluded");
    }
    println!(
        "  MAC convention: one forward pass at sequence length {}, counting the patch \
         projection, QKV and output projections, attention score and context products, \
         and both MLP layers",
        cfg.patch.num_patches() + 1
    );
    Ok(())
}

// ── bench ────────────────────────────────────────────────────────────────

fn bench_typed<S: Scalar>(cfg: &RunConfig) -> Result<()> {
    let mut probe = SyntheticDataset::new(cfg.seed, 1, 1, cfg.patch.image_side);
    probe.channels = cfg.patch.channels;
    let (image, _) = Dataset::<S>::sample(&probe, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::<S>::init(&cfg.patch, &cfg.model, &mut rng);

    embed_image(&image, &params, &cfg.patch, &cfg.model, false)?;
    let budget = std::time::Duration::from_secs(2);
    let start = Instant::now();
    let mut iters = 0usize;
    while iters < 5 && start.elapsed() < budget {
        embed_image(&image, &params, &cfg.patch, &cfg.model, false)?;
        iters += 1;
    }
    let per_image = start.elapsed().as_secs_f64() / iters as f64;
    println!(
        "{} embeddings in {:.3} s: {:.1} ms/image ({:.2} images/s, {} precision)",
        iters,
        start.elapsed().as_secs_f64(),
        per_image * 1e3,
        1.0 / per_image,
        S::PRECISION
    );
    Ok(())
}

fn cmd_bench(flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    match cfg.precision {
        Precision::F32 => bench_typed::<f32>(&cfg),
        Precision::F64 => bench_typed::<f64>(&cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(args: &[&str]) -> Vec<String> {
        args.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unknown_flags_and_commands_are_usage_errors() {
        let err = run(&strs(&["launch"])).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("launch"), "got: {err}");
        let err = parse_flags(&strs(&["--bogus"])).unwrap_err();
        assert!(err.to_string().contains("--bogus"), "got: {err}");
        let err = parse_flags(&strs(&["--seed"])).unwrap_err();
        assert!(err.to_string().contains("needs a value"), "got: {err}");
    }

    #[test]
    fn deterministic_mode_forces_one_thread() {
        let flags =
            parse_flags(&strs(&["--preset", "vit-p8s8", "--threads", "8", "--deterministic"]))
                .unwrap();
        let cfg = resolve_config(&flags).unwrap();
        assert_eq!(cfg.threads, 1);
    }

    #[test]
    fn config_and_preset_are_mutually_exclusive() {
        let flags = parse_flags(&strs(&["--preset", "vit-p8s8", "--config", "x.cfg"])).unwrap();
        let err = resolve_config(&flags).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("not both"), "got: {err}");
    }

    #[test]
    fn overrides_layer_onto_the_preset() {
        let flags = parse_flags(&strs(&["--preset", "vit-p10s8", "--seed", "7"])).unwrap();
        let cfg = resolve_config(&flags).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.patch.patch, 10);
    }

    #[test]
    fn missing_required_paths_name_the_flag() {
        let err = cmd_eval(&Flags { folds: 10, ..Flags::default() }).unwrap_err();
        assert!(err.to_string().contains("--checkpoint"), "got: {err}");
    }

    #[test]
    fn count_formatting_picks_sane_units() {
        assert_eq!(format_params(63_207_424), "63.2 M");
        assert_eq!(format_params(432), "432");
        assert_eq!(format_macs(13_210_000_000), "13.2 G");
        assert_eq!(format_macs(544), "544");
        assert_eq!(format_macs(8_400_000), "8.4 M");
    }
}
