//! Command-line front end: dataset synthesis, training, evaluation,
//! cross-validation, gradient self-checking, and parameter reporting.
//!
//! Progress goes to standard error; machine-readable `key = value` results
//! go to standard output. The exit code is 0 exactly when the command
//! succeeded.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use rgbdvit_core::encoder::load_checkpoint;
use rgbdvit_core::harness::{
    check_model_gradients, cross_validate, evaluate, report_parameters, train_fold,
    ExperimentConfig,
};
use rgbdvit_core::pipeline::{generate_synthetic, load_manifest, SyntheticSpec};
use rgbdvit_core::{DatasetManifest, ModelConfig};

/// Environment variable consulted when `--out` is not given to `train`/`cv`.
const RUN_DIR_VAR: &str = "RGBDVIT_RUN_DIR";

#[derive(Parser)]
#[command(
    name = "rgbdvit",
    version,
    about = "RGB-D facial expression transformer at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB-D expression dataset.
    Synth {
        /// Directory to create the dataset in.
        #[arg(long)]
        out: PathBuf,
        /// Number of distinct subjects.
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        /// Total samples per expression class.
        #[arg(long = "per-class", default_value_t = 40)]
        per_class: usize,
        /// Fraction of samples rendered with a misleading appearance.
        #[arg(long = "noise-frac", default_value_t = 0.1)]
        noise_frac: f64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model on every sample of a manifest.
    Train {
        /// Experiment config file (key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest file.
        #[arg(long)]
        manifest: PathBuf,
        /// Run directory for config snapshot, metrics, logs, and checkpoint.
        /// Falls back to $RGBDVIT_RUN_DIR; with neither, nothing is written.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config file's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override one config key, e.g. --set epochs=5. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Optional directory for the confusion matrix and summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated subject-disjoint K-fold cross-validation.
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Number of folds.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Worker threads for independent splits.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Run directory. Falls back to $RGBDVIT_RUN_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Compare analytic gradients against finite differences.
    CheckGrad {
        /// Architecture to audit: "tiny" or "small".
        #[arg(long, default_value = "tiny")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Report parameter counts for every fusion mode.
    Params {
        /// Optional experiment config file; defaults to the standard model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth {
            out,
            subjects,
            per_class,
            noise_frac,
            size,
            seed,
        } => cmd_synth(&out, subjects, per_class, noise_frac, size, seed),
        Command::Train {
            config,
            manifest,
            out,
            seed,
            set,
        } => cmd_train(&config, &manifest, out, seed, &set),
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => cmd_eval(&checkpoint, &manifest, out),
        Command::Cv {
            config,
            manifest,
            k,
            repeats,
            jobs,
            out,
            seed,
            set,
        } => cmd_cv(&config, &manifest, k, repeats, jobs, out, seed, &set),
        Command::CheckGrad { size, seed, tol } => cmd_check_grad(&size, seed, tol),
        Command::Params { config, set } => cmd_params(config.as_deref(), &set),
    }
}

/// Split repeated `--set key=value` flags into pairs.
fn parse_overrides(set: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    set.iter()
        .map(|entry| match entry.split_once('=') {
            Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
            None => bail!("--set expects KEY=VALUE, got '{entry}'"),
        })
        .collect()
}

/// Load the experiment config and apply --seed/--set on top of it.
fn effective_config(
    path: &Path,
    seed: Option<u64>,
    set: &[String],
) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_file(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let overrides = parse_overrides(set)?;
    config.apply_overrides(&overrides)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn run_dir_or_env(out: Option<PathBuf>) -> Option<PathBuf> {
    out.or_else(|| std::env::var_os(RUN_DIR_VAR).map(PathBuf::from))
}

fn load_dataset(path: &Path) -> anyhow::Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn cmd_synth(
    out: &Path,
    subjects: usize,
    per_class: usize,
    noise_frac: f64,
    size: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        num_subjects: subjects,
        samples_per_class: per_class,
        noise_fraction: noise_frac,
        image_size: size,
        seed,
    };
    let manifest = generate_synthetic(out, &spec)?;
    let noisy = manifest.records().iter().filter(|r| r.noisy).count();
    println!("samples = {}", manifest.records().len());
    println!("noisy = {noisy}");
    println!("subjects = {}", manifest.subjects().len());
    println!("manifest = {}", out.join("manifest.tsv").display());
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    manifest_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    set: &[String],
) -> anyhow::Result<()> {
    let config = effective_config(config_path, seed, set)?;
    let manifest = load_dataset(manifest_path)?;
    let run_dir = run_dir_or_env(out);
    eprintln!(
        "training on {} samples for {} epochs",
        manifest.records().len(),
        config.epochs
    );
    let epochs = config.epochs;
    let outcome = train_fold(&manifest, &config, run_dir.as_deref(), &mut |m| {
        eprintln!(
            "epoch {}/{epochs}  loss {:.4}  accuracy {:.4}  relabels {}",
            m.epoch, m.mean_loss, m.train_accuracy, m.relabels
        );
    })?;
    println!("samples = {}", manifest.records().len());
    println!("epochs = {epochs}");
    if let Some(last) = outcome.metrics.last() {
        println!("final_loss = {}", last.mean_loss);
        println!("final_train_accuracy = {}", last.train_accuracy);
    }
    println!("relabels_total = {}", outcome.relabel_events.len());
    if let Some(dir) = run_dir {
        println!("checkpoint = {}", dir.join("model.ckpt").display());
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, manifest_path: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let (model, params) = load_checkpoint(checkpoint)?;
    let manifest = load_dataset(manifest_path)?;
    eprintln!(
        "evaluating {} samples at image size {}",
        manifest.records().len(),
        model.image_size
    );
    let (matrix, accuracy) = evaluate(&params, &manifest, &model)?;
    println!("samples = {}", matrix.total());
    println!("accuracy = {accuracy}");
    for (class, acc) in matrix.per_class_accuracy().iter().enumerate() {
        match acc {
            Some(a) => println!("class_{class}_accuracy = {a}"),
            None => println!("class_{class}_accuracy = -"),
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        matrix.write_tsv(&dir.join("confusion.tsv"))?;
        std::fs::write(
            dir.join("summary.txt"),
            format!("samples = {}\naccuracy = {accuracy}\n", matrix.total()),
        )
        .with_context(|| format!("writing summary in {}", dir.display()))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_cv(
    config_path: &Path,
    manifest_path: &Path,
    k: usize,
    repeats: usize,
    jobs: usize,
    out: Option<PathBuf>,
    seed: Option<u64>,
    set: &[String],
) -> anyhow::Result<()> {
    let config = effective_config(config_path, seed, set)?;
    let manifest = load_dataset(manifest_path)?;
    let run_dir = run_dir_or_env(out);
    eprintln!(
        "{repeats} x {k}-fold cross-validation over {} subjects on {jobs} worker(s)",
        manifest.subjects().len()
    );
    let outcome = cross_validate(
        &manifest,
        &config,
        k,
        repeats,
        jobs,
        run_dir.as_deref(),
        &mut |s| {
            eprintln!(
                "repeat {} fold {}  accuracy {:.4} on {} samples",
                s.repeat, s.fold, s.accuracy, s.test_samples
            );
        },
    )?;
    println!("splits = {}", outcome.splits.len());
    println!("mean_accuracy = {}", outcome.mean_accuracy);
    println!("stddev = {}", outcome.stddev);
    for (class, acc) in outcome.aggregate.per_class_accuracy().iter().enumerate() {
        match acc {
            Some(a) => println!("class_{class}_accuracy = {a}"),
            None => println!("class_{class}_accuracy = -"),
        }
    }
    Ok(())
}

fn cmd_check_grad(size: &str, seed: u64, tol: f64) -> anyhow::Result<()> {
    let config = match size {
        "tiny" => ModelConfig::tiny(),
        "small" => ModelConfig::small(),
        other => bail!("unknown --size '{other}' (expected tiny or small)"),
    };
    eprintln!("checking every parameter gradient of the {size} config");
    let report = check_model_gradients(&config, seed)?;
    println!("size = {size}");
    println!("checked = {}", report.checked);
    println!("max_rel_error = {}", report.max_rel_error);
    println!("worst_group = {}", report.worst_group);
    println!("worst_index = {}", report.worst_index);
    println!("analytic = {}", report.analytic);
    println!("numeric = {}", report.numeric);
    if report.max_rel_error > tol {
        bail!(
            "gradient check failed: relative error {} at {}[{}] exceeds {tol}",
            report.max_rel_error,
            report.worst_group,
            report.worst_index
        );
    }
    Ok(())
}

fn cmd_params(config_path: Option<&Path>, set: &[String]) -> anyhow::Result<()> {
    let model = match config_path {
        Some(path) => effective_config(path, None, set)?.model,
        None => {
            let mut config = ExperimentConfig::default();
            config.apply_overrides(&parse_overrides(set)?)?;
            config.model
        }
    };
    let table = report_parameters(&model);
    for (mode, count) in &table {
        println!("{}_total = {}", mode.as_str(), count.total);
    }
    let total = |name: &str| {
        table
            .iter()
            .find(|(m, _)| m.as_str() == name)
            .map(|(_, c)| c.total)
            .expect("all modes reported")
    };
    println!(
        "alternative_minus_rgb_only = {}",
        total("alternative") - total("rgb_only")
    );
    println!(
        "naive_minus_rgb_only = {}",
        total("naive") - total("rgb_only")
    );
    Ok(())
}
