//! Command implementations.

use crate::config::{build_dataset, parse_config, parse_synthetic};
use std::path::{Path, PathBuf};
use svdl::compression::{
    apply_pruning, compression_rate, count_active_neurons, count_nonconstant_gates,
    load_checkpoint, save_checkpoint, structure_report, Checkpoint, PrunedModel,
};
use svdl::data::load_classification_tsv;
use svdl::inference::{benchmark, compile, BENCH_TSV_HEADER};
use svdl::sparse_lstm::{Model, ModelVariant, Task};
use svdl::training::{evaluate_classification, evaluate_lm, train, Dataset, TaskData};
use svdl::{format_sig6, Error, Result};

pub fn cmd_train(config_path: &str) -> Result<()> {
    let mut run = parse_config(Path::new(config_path))?;
    let dataset = build_dataset(&mut run)?;
    let summary = train(&run.train, &dataset, &run.out_dir)?;
    if let Some(vocab) = &dataset.vocab {
        vocab.write_to(&run.out_dir.join("vocab.txt"))?;
    }
    println!(
        "trained {} {} for {} epochs: best val metric {} at epoch {}",
        run.train.task.name(),
        run.train.variant.name(),
        run.train.epochs,
        format_sig6(summary.best_val_metric),
        summary.best_epoch
    );
    println!(
        "wrote {} {} {}",
        summary.metrics_path.display(),
        summary.best_path.display(),
        summary.final_path.display()
    );
    Ok(())
}

/// Prune a checkpoint and emit the pruned checkpoint plus the structure
/// reports; prints the summary row.
pub fn cmd_prune(ckpt_path: &str, tau: Option<f64>, out_dir: &str) -> Result<()> {
    let ckpt = load_checkpoint(Path::new(ckpt_path))?;
    let tau = tau.unwrap_or(ckpt.config.tau);
    let pruned = apply_pruning(&ckpt.model, tau, ckpt.config.strict_neuron_rule);
    let out = PathBuf::from(out_dir);
    std::fs::create_dir_all(&out)?;

    let pruned_ckpt = Checkpoint {
        config: ckpt.config.clone(),
        model: pruned.model.clone(),
        rng: ckpt.rng.clone(),
        vocab: ckpt.vocab.clone(),
        best_val_metric: ckpt.best_val_metric,
        prune: Some(pruned.info),
        masks: pruned.masks.clone(),
    };
    save_checkpoint(&pruned_ckpt, &out.join("pruned.ckpt"))?;
    structure_report(&pruned, ckpt.best_val_metric, &out)?;

    let report = compression_rate(&pruned);
    let (n_in, n_hid) = count_active_neurons(&pruned);
    let (n_gates, _) = count_nonconstant_gates(&pruned);
    println!(
        "{}\t{}\t{}\t{}-{}\t{}",
        pruned.model.variant.name(),
        ckpt.best_val_metric.map_or_else(|| "-".into(), format_sig6),
        format_sig6(report.rate),
        n_in,
        n_hid,
        n_gates
    );
    Ok(())
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classification => "accuracy",
        Task::CharLm => "bits_per_char",
        Task::WordLm => "perplexity",
    }
}

/// Build the evaluation token stream / example set for a data source.
fn eval_data(ckpt: &Checkpoint, source: &str, split: Option<&str>) -> Result<TaskData> {
    if parse_synthetic(source)?.is_some() {
        // Regenerate the synthetic task from the checkpoint's own config.
        let mut run = crate::config::RunConfig {
            train: ckpt.config.clone(),
            data_train: source.to_string(),
            data_valid: source.to_string(),
            data_test: source.to_string(),
            out_dir: PathBuf::from("."),
            explicit_vocab: true,
        };
        let dataset = build_dataset(&mut run)?;
        if run.train.vocab_size != ckpt.config.vocab_size
            || run.train.classes != ckpt.config.classes
        {
            return Err(Error::Dimension(format!(
                "synthetic data dimensions ({} tokens, {} classes) do not match checkpoint ({}, {})",
                run.train.vocab_size, run.train.classes,
                ckpt.config.vocab_size, ckpt.config.classes
            )));
        }
        return Ok(match (dataset.data, split.unwrap_or("test")) {
            (TaskData::Classification { train, .. }, "train") => TaskData::Classification {
                train: train.clone(),
                val: train.clone(),
                test: train,
            },
            (TaskData::Classification { val, .. }, "val") => TaskData::Classification {
                train: val.clone(),
                val: val.clone(),
                test: val,
            },
            (TaskData::Classification { test, .. }, _) => TaskData::Classification {
                train: test.clone(),
                val: test.clone(),
                test,
            },
            (TaskData::Lm { train, .. }, "train") => TaskData::Lm {
                train: train.clone(),
                val: train.clone(),
                test: train,
            },
            (TaskData::Lm { val, .. }, "val") => TaskData::Lm {
                train: val.clone(),
                val: val.clone(),
                test: val,
            },
            (TaskData::Lm { test, .. }, _) => TaskData::Lm {
                train: test.clone(),
                val: test.clone(),
                test,
            },
        });
    }

    // File-based evaluation requires the checkpoint's vocabulary.
    let vocab = ckpt.vocab.as_ref().ok_or_else(|| {
        Error::Data("checkpoint holds no vocabulary; evaluate on its synthetic spec".into())
    })?;
    match ckpt.config.task {
        Task::Classification => {
            let set = load_classification_tsv(Path::new(source), vocab)?;
            if set.n_classes > ckpt.config.classes {
                return Err(Error::Dimension(format!(
                    "data has {} classes, checkpoint was trained with {}",
                    set.n_classes, ckpt.config.classes
                )));
            }
            Ok(TaskData::Classification {
                train: set.clone(),
                val: set.clone(),
                test: set,
            })
        }
        Task::CharLm => {
            let raw = std::fs::read_to_string(source)
                .map_err(|e| Error::Data(format!("{source}: {e}")))?;
            let ids = vocab.encode_chars(&raw).map_err(|e| {
                Error::Dimension(format!("text does not fit checkpoint vocabulary: {e}"))
            })?;
            Ok(TaskData::Lm {
                train: ids.clone(),
                val: ids.clone(),
                test: ids,
            })
        }
        Task::WordLm => {
            let raw = std::fs::read_to_string(source)
                .map_err(|e| Error::Data(format!("{source}: {e}")))?;
            let ids = vocab.encode_words(&svdl::data::tokenize_words(&raw));
            Ok(TaskData::Lm {
                train: ids.clone(),
                val: ids.clone(),
                test: ids,
            })
        }
    }
}

pub fn cmd_eval(
    ckpt_path: &str,
    data_source: &str,
    split: Option<&str>,
    task_override: Option<&str>,
) -> Result<()> {
    let ckpt = load_checkpoint(Path::new(ckpt_path))?;
    if let Some(t) = task_override {
        let requested =
            Task::parse(t).ok_or_else(|| Error::Config(format!("unknown task {t:?}")))?;
        if requested != ckpt.config.task {
            return Err(Error::Dimension(format!(
                "checkpoint task is {}, requested {}",
                ckpt.config.task.name(),
                requested.name()
            )));
        }
    }
    let data = eval_data(&ckpt, data_source, split)?;
    let mut model = ckpt.model.clone();
    let metrics = match &data {
        TaskData::Classification { test, .. } => evaluate_classification(&mut model, test)?,
        TaskData::Lm { test, .. } => evaluate_lm(&mut model, test, 512)?,
    };
    println!(
        "{}\t{}",
        metric_name(ckpt.config.task),
        format_sig6(metrics.metric)
    );
    Ok(())
}

pub fn cmd_bench(ckpt_path: &str, seq_len: usize, repeats: usize) -> Result<()> {
    if repeats < 10 {
        return Err(Error::Config(format!(
            "--repeats must be at least 10, got {repeats}"
        )));
    }
    let ckpt = load_checkpoint(Path::new(ckpt_path))?;
    if ckpt.prune.is_none() {
        return Err(svdl::CheckpointError::NotPruned.into());
    }
    let pruned: PrunedModel = ckpt.to_pruned()?;
    let compiled = compile(&pruned);
    let report = benchmark(&pruned, &compiled, seq_len, repeats)?;
    let label = Path::new(ckpt_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ckpt".into());
    println!("{BENCH_TSV_HEADER}");
    println!("{}", report.tsv_row(&label));
    Ok(())
}

/// Train all four variants on one config and write a combined `table.tsv`
/// (Method, Quality, Compression, Neurons x-h, Gates). Quality for
/// classification is test accuracy in percent; LM tasks report
/// bits-per-char / perplexity. SparseVD variants are pruned at the config
/// threshold before evaluation.
pub fn cmd_sweep(config_path: &str) -> Result<()> {
    let base = parse_config(Path::new(config_path))?;
    let sweep_dir = base.out_dir.clone();
    std::fs::create_dir_all(&sweep_dir)?;

    let mut table = String::from("Method\tQuality\tCompression\tNeurons x-h\tGates\n");
    for variant in ModelVariant::ALL {
        let mut run = parse_config(Path::new(config_path))?;
        run.train.variant = variant;
        run.out_dir = sweep_dir.join(variant.name().to_lowercase());
        let dataset = build_dataset(&mut run)?;
        let summary = train(&run.train, &dataset, &run.out_dir)?;
        eprintln!(
            "sweep: {} done (best val {})",
            variant.name(),
            format_sig6(summary.best_val_metric)
        );

        let best = load_checkpoint(&summary.best_path)?;
        let (quality_model, pruned) = if variant == ModelVariant::Baseline {
            (
                best.model.clone(),
                apply_pruning(&best.model, run.train.tau, run.train.strict_neuron_rule),
            )
        } else {
            let pruned = apply_pruning(&best.model, run.train.tau, run.train.strict_neuron_rule);
            save_checkpoint(
                &Checkpoint {
                    config: best.config.clone(),
                    model: pruned.model.clone(),
                    rng: best.rng.clone(),
                    vocab: best.vocab.clone(),
                    best_val_metric: best.best_val_metric,
                    prune: Some(pruned.info),
                    masks: pruned.masks.clone(),
                },
                &run.out_dir.join("pruned.ckpt"),
            )?;
            structure_report(&pruned, best.best_val_metric, &run.out_dir)?;
            (pruned.model.clone(), pruned)
        };

        let quality = eval_quality(quality_model, &dataset)?;
        let report = compression_rate(&pruned);
        let (n_in, n_hid) = count_active_neurons(&pruned);
        let (n_gates, _) = count_nonconstant_gates(&pruned);
        let quality_str = match run.train.task {
            Task::Classification => format_sig6(quality * 100.0),
            _ => format_sig6(quality),
        };
        table.push_str(&format!(
            "{}\t{}\t{}\t{}-{}\t{}\n",
            variant.name(),
            quality_str,
            format_sig6(report.rate),
            n_in,
            n_hid,
            n_gates
        ));
    }
    let table_path = sweep_dir.join("table.tsv");
    std::fs::write(&table_path, table)?;
    println!("wrote {}", table_path.display());
    Ok(())
}

fn eval_quality(mut model: Model, dataset: &Dataset) -> Result<f64> {
    Ok(match &dataset.data {
        TaskData::Classification { test, .. } => evaluate_classification(&mut model, test)?.metric,
        TaskData::Lm { test, .. } => evaluate_lm(&mut model, test, 512)?.metric,
    })
}
