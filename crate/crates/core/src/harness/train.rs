//! Experiment orchestration: single-fold training with the relabeling
//! filter in the loop, deterministic evaluation, repeated subject-disjoint
//! cross-validation, and a finite-difference audit of the model gradients.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use super::{make_folds, ConfusionMatrix, ExperimentConfig, OptimizerState};
use crate::encoder::{
    classify, classify_traced, count_parameters, save_checkpoint, EncoderParams, FusionMode,
    ModelConfig, ParamCount,
};
use crate::error::Error;
use crate::filter::{apply_filter_epoch, merge_predictions, LabelState, RelabelEvent};
use crate::fusion::embed_input;
use crate::pipeline::{augment, DatasetManifest};
use crate::tensor::Tape;
use crate::Result;

/// Column header of the per-epoch metrics file written into a run directory.
pub const METRICS_HEADER: &str = "epoch\tmean_loss\ttrain_accuracy\trelabels";
/// Column header of the relabel audit log; rows come from
/// [`RelabelEvent::audit_line`].
pub const RELABEL_HEADER: &str = "epoch\tsample_id\told_label\tnew_label\tp_max\tp_gt";
/// Column header of the per-split accuracy table written by cross-validation.
pub const SPLITS_HEADER: &str = "repeat\tfold\taccuracy\ttest_samples";

/// Telemetry for one finished training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Training loss averaged over every sample seen this epoch.
    pub mean_loss: f64,
    /// Share of training samples whose merged prediction matched the
    /// annotated main class (not the possibly-relabeled target).
    pub train_accuracy: f64,
    /// Number of label changes applied at the end of this epoch.
    pub relabels: usize,
}

/// Everything a single training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Final per-sample label bookkeeping, in manifest order.
    pub label_states: Vec<LabelState>,
    /// Every label change across all epochs, in the order applied.
    pub relabel_events: Vec<RelabelEvent>,
    pub metrics: Vec<EpochMetrics>,
}

/// Accuracy of one train/test split within a cross-validation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    /// 0-based repeat index.
    pub repeat: usize,
    /// 0-based fold index used as the test set.
    pub fold: usize,
    pub accuracy: f64,
    pub test_samples: usize,
}

/// Aggregate result of repeated K-fold cross-validation.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    /// One entry per (repeat, fold), sorted by repeat then fold.
    pub splits: Vec<SplitResult>,
    /// Arithmetic mean of the per-split accuracies.
    pub mean_accuracy: f64,
    /// Population standard deviation of the per-split accuracies.
    pub stddev: f64,
    /// Confusion counts pooled over every split.
    pub aggregate: ConfusionMatrix,
}

/// Result of comparing analytic gradients against central finite
/// differences over every parameter coordinate of a model.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of coordinates checked.
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter group and flat index of the worst coordinate.
    pub worst_group: String,
    pub worst_index: usize,
    /// Analytic and numeric derivative at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
}

/// Numerically stable softmax used for the relabeling filter's inputs.
fn prob_vector(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display(), e))
}

/// Open files written incrementally during a training run.
struct RunFiles {
    dir: PathBuf,
    metrics: fs::File,
    relabel: fs::File,
}

impl RunFiles {
    fn create(dir: &Path, config: &ExperimentConfig) -> Result<RunFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
        write_text(&dir.join("config.txt"), &config.to_kv_lines())?;
        let open = |name: &str, header: &str| -> Result<fs::File> {
            let path = dir.join(name);
            let mut file = fs::File::create(&path).map_err(|e| Error::io(path.display(), e))?;
            writeln!(file, "{header}").map_err(|e| Error::io(path.display(), e))?;
            Ok(file)
        };
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            metrics: open("metrics.tsv", METRICS_HEADER)?,
            relabel: open("relabel_log.tsv", RELABEL_HEADER)?,
        })
    }

    fn append_metrics(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(
            self.metrics,
            "{}\t{:.6}\t{:.6}\t{}",
            m.epoch, m.mean_loss, m.train_accuracy, m.relabels
        )
        .map_err(|e| Error::io(self.dir.join("metrics.tsv").display(), e))
    }

    fn append_relabels(&mut self, events: &[RelabelEvent]) -> Result<()> {
        for event in events {
            writeln!(self.relabel, "{}", event.audit_line())
                .map_err(|e| Error::io(self.dir.join("relabel_log.tsv").display(), e))?;
        }
        Ok(())
    }
}

/// Pull the gradient of every parameter group off the tape, in the same
/// order as [`EncoderParams::groups`].
fn collect_grads(tape: &Tape, params: &EncoderParams, vars: &[crate::tensor::Var]) -> Vec<Vec<f64>> {
    params
        .groups()
        .iter()
        .zip(vars)
        .map(|((_, tensor), &var)| match tape.grad(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor.data().len()],
        })
        .collect()
}

/// Train one model on one training set.
///
/// Runs `config.epochs` epochs of shuffled mini-batches. The loss is mean
/// cross-entropy over the batch against each sample's *current* label, and
/// after every epoch at or past `config.sf_start_epoch` the relabeling
/// filter is applied to the probabilities gathered during that epoch.
///
/// All randomness (initialization, shuffling, augmentation, dropout)
/// derives from `config.seed`, so identical inputs give bitwise-identical
/// results. With `run_dir` set, the run writes `config.txt`, `metrics.tsv`,
/// `relabel_log.tsv`, and a final `model.ckpt` there. `on_epoch` is invoked
/// after each epoch for progress reporting.
pub fn train_fold(
    manifest: &DatasetManifest,
    config: &ExperimentConfig,
    run_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if manifest.records().is_empty() {
        return Err(Error::Bookkeeping {
            reason: "cannot train on an empty manifest".into(),
        });
    }

    // One master stream fixes the whole run; initialization and the
    // training-time draws get independent substreams so that e.g. changing
    // the epoch count cannot perturb the initial parameters.
    let mut master = StdRng::seed_from_u64(config.seed);
    let init_seed: u64 = master.gen();
    let train_seed: u64 = master.gen();
    let mut params = EncoderParams::init(&config.model, &mut StdRng::seed_from_u64(init_seed))?;
    let mut rng = StdRng::seed_from_u64(train_seed);

    let pairs = manifest.load_all(config.model.image_size)?;
    let mut states: Vec<LabelState> = manifest
        .records()
        .iter()
        .map(|r| LabelState::new(r.sample_id.clone(), r.expression))
        .collect::<Result<_>>()?;

    let mut files = match run_dir {
        Some(dir) => Some(RunFiles::create(dir, config)?),
        None => None,
    };

    let mut optimizer = OptimizerState::new(&params);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut all_events = Vec::new();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);

        let mut probs = vec![Vec::new(); pairs.len()];
        let mut loss_sum = 0.0;
        let mut correct = 0usize;

        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let flat_vars = vars.flat();
            let mut loss_acc = None;
            for &i in batch {
                let pair = if config.augment.enabled {
                    augment(&pairs[i], &config.augment, &mut rng)?
                } else {
                    pairs[i].clone()
                };
                let seq = embed_input(&mut tape, &pair, &vars, &config.model)?;
                let logits = if config.model.dropout > 0.0 {
                    classify_traced(&mut tape, seq, &vars, &config.model, Some(&mut rng), None)?
                } else {
                    classify(&mut tape, seq, &vars, &config.model)?
                };
                let logit_values = tape.value(logits).data().to_vec();
                probs[i] = prob_vector(&logit_values);
                let pred = merge_predictions(&logit_values, config.model.num_subclasses)?;
                if pred == pairs[i].expression {
                    correct += 1;
                }
                let loss = tape.cross_entropy(logits, states[i].current_label)?;
                loss_acc = Some(match loss_acc {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let mean = tape.scale(loss_acc.expect("batches are non-empty"), 1.0 / batch.len() as f64);
            let batch_loss = tape.value(mean).item()?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch loss is {batch_loss}"),
                });
            }
            loss_sum += batch_loss * batch.len() as f64;
            tape.backward(mean)?;
            let grads = collect_grads(&tape, &params, &flat_vars);
            optimizer.step(&mut params, &grads, &config.optimizer)?;
        }

        let events = apply_filter_epoch(
            &mut states,
            &probs,
            config.model.delta,
            epoch,
            config.sf_start_epoch,
        )?;
        let epoch_metrics = EpochMetrics {
            epoch,
            mean_loss: loss_sum / pairs.len() as f64,
            train_accuracy: correct as f64 / pairs.len() as f64,
            relabels: events.len(),
        };
        if let Some(f) = files.as_mut() {
            f.append_metrics(&epoch_metrics)?;
            f.append_relabels(&events)?;
        }
        on_epoch(&epoch_metrics);
        metrics.push(epoch_metrics);
        all_events.extend(events);
    }

    if let Some(f) = files.as_ref() {
        save_checkpoint(&f.dir.join("model.ckpt"), &config.model, &params)?;
    }

    Ok(TrainOutcome {
        params,
        label_states: states,
        relabel_events: all_events,
        metrics,
    })
}

/// Evaluate trained parameters on a test set.
///
/// No augmentation and no dropout are applied, predictions go through
/// [`merge_predictions`], and the matrix rows are the annotated main
/// classes. Deterministic: evaluating twice yields identical matrices.
pub fn evaluate(
    params: &EncoderParams,
    manifest: &DatasetManifest,
    config: &ModelConfig,
) -> Result<(ConfusionMatrix, f64)> {
    config.validate()?;
    if manifest.records().is_empty() {
        return Err(Error::Bookkeeping {
            reason: "cannot evaluate an empty manifest".into(),
        });
    }
    let mut matrix = ConfusionMatrix::new();
    for record in manifest.records() {
        let pair = manifest.load_pair(record, config.image_size)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let seq = embed_input(&mut tape, &pair, &vars, config)?;
        let logits = classify(&mut tape, seq, &vars, config)?;
        let pred = merge_predictions(tape.value(logits).data(), config.num_subclasses)?;
        matrix.record(record.expression, pred)?;
    }
    let accuracy = matrix.accuracy();
    Ok((matrix, accuracy))
}

/// Mix a base seed with a repeat/fold coordinate so every split trains
/// with a distinct but reproducible stream.
fn split_seed(base: u64, repeat: usize, fold: usize) -> u64 {
    base ^ (repeat as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (fold as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn fold_seed(base: u64, repeat: usize) -> u64 {
    base ^ (repeat as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// One unit of cross-validation work: train on `train`, score on `test`.
struct SplitJob {
    repeat: usize,
    fold: usize,
    train: DatasetManifest,
    test: DatasetManifest,
    config: ExperimentConfig,
    dir: Option<PathBuf>,
}

fn run_split(job: &SplitJob) -> Result<(SplitResult, ConfusionMatrix)> {
    let outcome = train_fold(&job.train, &job.config, job.dir.as_deref(), &mut |_| {})?;
    let (matrix, accuracy) = evaluate(&outcome.params, &job.test, &job.config.model)?;
    Ok((
        SplitResult {
            repeat: job.repeat,
            fold: job.fold,
            accuracy,
            test_samples: matrix.total() as usize,
        },
        matrix,
    ))
}

/// Repeated subject-disjoint K-fold cross-validation.
///
/// Each repeat draws a fresh fold assignment from `config.seed` and the
/// repeat index; each split trains from scratch with its own derived seed.
/// Splits are independent and run on `jobs` worker threads when `jobs > 1`.
/// With `run_dir` set, the run writes the base `config.txt`, one `splits.tsv`
/// row per split (accuracy printed exactly), per-split run directories under
/// `splits/`, the pooled confusion matrix, and a `summary.txt`. `on_split`
/// is invoked as splits finish, in completion order.
pub fn cross_validate(
    manifest: &DatasetManifest,
    config: &ExperimentConfig,
    k: usize,
    repeats: usize,
    jobs: usize,
    run_dir: Option<&Path>,
    on_split: &mut dyn FnMut(&SplitResult),
) -> Result<CvOutcome> {
    config.validate()?;
    if repeats == 0 {
        return Err(Error::Config {
            problems: vec!["repeats must be at least 1".into()],
        });
    }
    if k < 2 {
        return Err(Error::Config {
            problems: vec!["cross-validation needs at least 2 folds".into()],
        });
    }
    let subjects = manifest.subjects();

    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
        write_text(&dir.join("config.txt"), &config.to_kv_lines())?;
    }

    // Lay out every split up front so workers only compute.
    let mut jobs_pending = Vec::new();
    for repeat in 0..repeats {
        let mut rng = StdRng::seed_from_u64(fold_seed(config.seed, repeat));
        let plan = make_folds(&subjects, k, &mut rng)?;
        for fold in 0..k {
            let (train_subjects, test_subjects) = plan.split(fold);
            for s in &test_subjects {
                if train_subjects.contains(s) {
                    return Err(Error::Bookkeeping {
                        reason: format!("subject {s} appears in both train and test"),
                    });
                }
            }
            let train = manifest.restricted_to(&train_subjects);
            let test = manifest.restricted_to(&test_subjects);
            let mut split_config = config.clone();
            split_config.seed = split_seed(config.seed, repeat, fold);
            let dir = run_dir.map(|d| d.join(format!("splits/r{repeat:02}_f{fold:02}")));
            jobs_pending.push(SplitJob {
                repeat,
                fold,
                train,
                test,
                config: split_config,
                dir,
            });
        }
    }

    let mut splits = Vec::with_capacity(jobs_pending.len());
    let mut aggregate = ConfusionMatrix::new();
    if jobs > 1 {
        let queue = Mutex::new(jobs_pending);
        let (sender, receiver) = mpsc::channel::<Result<(SplitResult, ConfusionMatrix)>>();
        let workers = jobs.min(repeats * k);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let sender = sender.clone();
                let queue = &queue;
                scope.spawn(move || loop {
                    let job = queue.lock().expect("queue lock").pop();
                    match job {
                        Some(job) => {
                            if sender.send(run_split(&job)).is_err() {
                                return;
                            }
                        }
                        None => return,
                    }
                });
            }
            drop(sender);
            for result in receiver {
                let (split, matrix) = result?;
                on_split(&split);
                aggregate.merge(&matrix);
                splits.push(split);
            }
            Ok::<(), Error>(())
        })?;
    } else {
        for job in &jobs_pending {
            let (split, matrix) = run_split(job)?;
            on_split(&split);
            aggregate.merge(&matrix);
            splits.push(split);
        }
    }
    splits.sort_by_key(|s| (s.repeat, s.fold));

    let n = splits.len() as f64;
    let mean_accuracy = splits.iter().map(|s| s.accuracy).sum::<f64>() / n;
    let variance = splits
        .iter()
        .map(|s| (s.accuracy - mean_accuracy).powi(2))
        .sum::<f64>()
        / n;
    let stddev = variance.sqrt();

    if let Some(dir) = run_dir {
        // Accuracies are printed with f64's shortest round-trip formatting,
        // so recomputing the mean from this file reproduces it exactly.
        let mut table = String::from(SPLITS_HEADER);
        table.push('\n');
        for s in &splits {
            table.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                s.repeat, s.fold, s.accuracy, s.test_samples
            ));
        }
        write_text(&dir.join("splits.tsv"), &table)?;
        aggregate.write_tsv(&dir.join("aggregate_confusion.tsv"))?;

        let mut summary = String::new();
        summary.push_str(&format!("splits = {}\n", splits.len()));
        summary.push_str(&format!("mean_accuracy = {mean_accuracy}\n"));
        summary.push_str(&format!("stddev = {stddev}\n"));
        for (class, acc) in aggregate.per_class_accuracy().iter().enumerate() {
            match acc {
                Some(a) => summary.push_str(&format!("class_{class}_accuracy = {a}\n")),
                None => summary.push_str(&format!("class_{class}_accuracy = -\n")),
            }
        }
        write_text(&dir.join("summary.txt"), &summary)?;
    }

    Ok(CvOutcome {
        splits,
        mean_accuracy,
        stddev,
        aggregate,
    })
}

/// Compare every analytic parameter gradient against central finite
/// differences on one random input.
///
/// The numeric derivative Richardson-extrapolates central differences at
/// steps h and h/2 (h = 1e-5), canceling the h² truncation term; layer
/// normalization over low-variance rows otherwise makes that term visible
/// at init scale. Relative error is |a − fd| / max(|a|, |fd|, 1e-5). The
/// 1e-5 floor sits an order of magnitude above the quotient's roundoff
/// noise: the loss itself carries O(1e-15) relative error, so a central
/// difference over 2h = 2e-5 is only trustworthy to ~1e-10 absolute, and
/// gradients smaller than the floor are therefore held to a 1e-9 absolute
/// bound rather than an unattainable relative one. Requires dropout = 0 so
/// the loss is a deterministic function of the parameters.
pub fn check_model_gradients(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    config.validate()?;
    if config.dropout != 0.0 {
        return Err(Error::Config {
            problems: vec!["gradient checking requires dropout = 0".into()],
        });
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut params = EncoderParams::init(config, &mut rng)?;
    let pair = crate::fusion::ImagePair::random(&mut rng, config.image_size);
    let label = rng.gen_range(0..config.head_width());

    let loss_value = |params: &EncoderParams| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let seq = embed_input(&mut tape, &pair, &vars, config)?;
        let logits = classify(&mut tape, seq, &vars, config)?;
        let loss = tape.cross_entropy(logits, label)?;
        tape.value(loss).item()
    };

    // Analytic pass: one backward sweep gives every gradient at once.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let flat_vars = vars.flat();
        let seq = embed_input(&mut tape, &pair, &vars, config)?;
        let logits = classify(&mut tape, seq, &vars, config)?;
        let loss = tape.cross_entropy(logits, label)?;
        tape.backward(loss)?;
        collect_grads(&tape, &params, &flat_vars)
    };
    let group_names: Vec<String> = params.groups().iter().map(|(n, _)| n.clone()).collect();

    let h = 1e-5;
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_group: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (g, name) in group_names.iter().enumerate() {
        let len = analytic[g].len();
        for idx in 0..len {
            let original = params.groups()[g].1.data()[idx];
            let mut central = |step: f64| -> Result<f64> {
                params.groups_mut()[g].1.data_mut()[idx] = original + step;
                let plus = loss_value(&params)?;
                params.groups_mut()[g].1.data_mut()[idx] = original - step;
                let minus = loss_value(&params)?;
                params.groups_mut()[g].1.data_mut()[idx] = original;
                Ok((plus - minus) / (2.0 * step))
            };
            let coarse = central(h)?;
            let fine = central(h / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic[g][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_group = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Parameter counts for one architecture under every fusion mode.
pub fn report_parameters(config: &ModelConfig) -> Vec<(FusionMode, ParamCount)> {
    [
        FusionMode::Alternative,
        FusionMode::Naive,
        FusionMode::RgbOnly,
        FusionMode::DepthOnly,
    ]
    .iter()
    .map(|&mode| {
        let mut c = config.clone();
        c.fusion_mode = mode;
        (mode, count_parameters(&c))
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::load_checkpoint;
    use crate::pipeline::{generate_synthetic, AugmentationConfig, SyntheticSpec};
    use tempfile::TempDir;

    fn micro_dataset(dir: &Path) -> DatasetManifest {
        let spec = SyntheticSpec {
            num_subjects: 2,
            samples_per_class: 4,
            noise_fraction: 0.0,
            image_size: 16,
            seed: 9,
        };
        generate_synthetic(dir, &spec).unwrap()
    }

    fn micro_experiment() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.model = ModelConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
            num_subclasses: 1,
            delta: 0.4,
            fusion_mode: FusionMode::Alternative,
            dropout: 0.0,
        };
        config.optimizer.learning_rate = 3e-3;
        config.augment = AugmentationConfig::disabled();
        config.batch_size = 8;
        config.epochs = 2;
        config.sf_start_epoch = 100;
        config.seed = 7;
        config
    }

    fn assert_params_equal(a: &EncoderParams, b: &EncoderParams) {
        for ((name_a, ta), (name_b, tb)) in a.groups().iter().zip(b.groups().iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(ta.data(), tb.data(), "group {name_a} differs");
        }
    }

    #[test]
    fn zero_epochs_and_zero_lr_both_freeze_parameters() {
        let dir = TempDir::new().unwrap();
        let manifest = micro_dataset(dir.path());

        let mut zero_epochs = micro_experiment();
        zero_epochs.epochs = 0;
        let baseline = train_fold(&manifest, &zero_epochs, None, &mut |_| {}).unwrap();
        assert!(baseline.metrics.is_empty());
        assert!(baseline.relabel_events.is_empty());

        let mut zero_lr = micro_experiment();
        zero_lr.optimizer.learning_rate = 0.0;
        let frozen = train_fold(&manifest, &zero_lr, None, &mut |_| {}).unwrap();
        assert_eq!(frozen.metrics.len(), 2);
        assert_params_equal(&baseline.params, &frozen.params);
    }

    #[test]
    fn training_twice_is_bitwise_reproducible() {
        let dir = TempDir::new().unwrap();
        let manifest = micro_dataset(dir.path());
        let config = micro_experiment();
        let a = train_fold(&manifest, &config, None, &mut |_| {}).unwrap();
        let b = train_fold(&manifest, &config, None, &mut |_| {}).unwrap();
        assert_params_equal(&a.params, &b.params);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn training_loss_halves_on_a_micro_dataset() {
        let dir = TempDir::new().unwrap();
        let manifest = micro_dataset(dir.path());
        let mut config = micro_experiment();
        config.epochs = 60;
        config.optimizer.learning_rate = 1e-2;
        let mut seen = 0;
        let outcome = train_fold(&manifest, &config, None, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 60);
        let first = outcome.metrics.first().unwrap().mean_loss;
        let last = outcome.metrics.last().unwrap().mean_loss;
        assert!(
            last < 0.5 * first,
            "loss should at least halve: first {first}, last {last}"
        );
    }

    #[test]
    fn divergence_is_reported_as_an_error() {
        let dir = TempDir::new().unwrap();
        let manifest = micro_dataset(dir.path());
        let mut config = micro_experiment();
        config.optimizer.learning_rate = 1e6;
        config.epochs = 30;
        let err = train_fold(&manifest, &config, None, &mut |_| {});
        assert!(err.is_err(), "a 1e6 learning rate must blow up");
    }

    #[test]
    fn run_directory_holds_config_metrics_log_and_checkpoint() {
        let data = TempDir::new().unwrap();
        let manifest = micro_dataset(data.path());
        let mut config = micro_experiment();
        config.sf_start_epoch = 1;
        let run = TempDir::new().unwrap();
        let run_dir = run.path().join("run");
        let outcome = train_fold(&manifest, &config, Some(&run_dir), &mut |_| {}).unwrap();

        let parsed = ExperimentConfig::from_file(&run_dir.join("config.txt")).unwrap();
        assert_eq!(parsed, config);

        let metrics = fs::read_to_string(run_dir.join("metrics.tsv")).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 1 + config.epochs);

        let log = fs::read_to_string(run_dir.join("relabel_log.tsv")).unwrap();
        let log_lines: Vec<&str> = log.lines().collect();
        assert_eq!(log_lines[0], RELABEL_HEADER);
        assert_eq!(log_lines.len(), 1 + outcome.relabel_events.len());

        let (loaded_config, loaded_params) = load_checkpoint(&run_dir.join("model.ckpt")).unwrap();
        assert_eq!(loaded_config, config.model);
        assert_params_equal(&loaded_params, &outcome.params);
    }

    #[test]
    fn evaluate_is_deterministic_and_counts_every_sample() {
        let dir = TempDir::new().unwrap();
        let manifest = micro_dataset(dir.path());
        let config = micro_experiment();
        let mut rng = StdRng::seed_from_u64(3);
        let params = EncoderParams::init(&config.model, &mut rng).unwrap();
        let (m1, a1) = evaluate(&params, &manifest, &config.model).unwrap();
        let (m2, a2) = evaluate(&params, &manifest, &config.model).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(a1, a2);
        assert_eq!(m1.total(), manifest.records().len() as u64);
        assert_eq!(a1, m1.correct() as f64 / m1.total() as f64);
    }

    #[test]
    fn evaluate_rejects_an_empty_manifest() {
        let dir = TempDir::new().unwrap();
        let manifest = micro_dataset(dir.path());
        let config = micro_experiment();
        let mut rng = StdRng::seed_from_u64(3);
        let params = EncoderParams::init(&config.model, &mut rng).unwrap();
        let empty = manifest.restricted_to(&[]);
        assert!(evaluate(&params, &empty, &config.model).is_err());
    }

    #[test]
    fn cross_validation_mean_matches_its_own_splits() {
        let data = TempDir::new().unwrap();
        let manifest = micro_dataset(data.path());
        let mut config = micro_experiment();
        config.epochs = 0;
        let run = TempDir::new().unwrap();
        let run_dir = run.path().join("cv");
        let mut announced = 0;
        let outcome = cross_validate(
            &manifest,
            &config,
            2,
            2,
            1,
            Some(&run_dir),
            &mut |_| announced += 1,
        )
        .unwrap();

        assert_eq!(outcome.splits.len(), 4);
        assert_eq!(announced, 4);
        let manual: f64 =
            outcome.splits.iter().map(|s| s.accuracy).sum::<f64>() / outcome.splits.len() as f64;
        assert!((outcome.mean_accuracy - manual).abs() < 1e-15);
        // Every repeat tests each sample exactly once.
        assert_eq!(
            outcome.aggregate.total(),
            2 * manifest.records().len() as u64
        );

        // The stored table reproduces the reported accuracies exactly.
        let table = fs::read_to_string(run_dir.join("splits.tsv")).unwrap();
        let mut from_file = Vec::new();
        for line in table.lines().skip(1) {
            let fields: Vec<&str> = line.split('\t').collect();
            from_file.push(fields[2].parse::<f64>().unwrap());
        }
        let stored: Vec<f64> = outcome.splits.iter().map(|s| s.accuracy).collect();
        assert_eq!(from_file, stored);
        assert!(run_dir.join("aggregate_confusion.tsv").exists());
        assert!(run_dir.join("summary.txt").exists());
    }

    #[test]
    fn cross_validation_parallel_matches_serial() {
        let data = TempDir::new().unwrap();
        let manifest = micro_dataset(data.path());
        let mut config = micro_experiment();
        config.epochs = 1;
        let serial = cross_validate(&manifest, &config, 2, 1, 1, None, &mut |_| {}).unwrap();
        let parallel = cross_validate(&manifest, &config, 2, 1, 2, None, &mut |_| {}).unwrap();
        assert_eq!(serial.splits, parallel.splits);
        assert_eq!(serial.mean_accuracy, parallel.mean_accuracy);
        assert_eq!(serial.aggregate, parallel.aggregate);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut config = micro_experiment().model;
        config.num_subclasses = 0;
        let report = check_model_gradients(&config, 11).unwrap();
        assert!(report.checked > 1000);
        assert!(
            report.max_rel_error <= 1e-4,
            "worst {} at {}[{}]: analytic {} vs numeric {}",
            report.max_rel_error,
            report.worst_group,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }

    #[test]
    fn parameter_report_shows_the_single_branch_deltas() {
        let config = ModelConfig::default();
        let table = report_parameters(&config);
        let total = |mode: FusionMode| {
            table
                .iter()
                .find(|(m, _)| *m == mode)
                .map(|(_, c)| c.total)
                .unwrap()
        };
        let per_projection = config.patch_dim() * config.embed_dim + config.embed_dim;
        assert_eq!(
            total(FusionMode::Alternative) - total(FusionMode::RgbOnly),
            2 * per_projection
        );
        assert_eq!(
            total(FusionMode::Naive) - total(FusionMode::RgbOnly),
            per_projection
        );
        assert_eq!(total(FusionMode::RgbOnly), total(FusionMode::DepthOnly));
    }
}
