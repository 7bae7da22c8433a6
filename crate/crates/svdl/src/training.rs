//! ELBO training: objective assembly, Adam, gradient clipping, model
//! initialization, and the epoch loop with validation-based checkpointing.
//!
//! The minimized objective for a minibatch of `B` of `N` observations is
//!
//! ```text
//! (N / B) * sum_batch nll(y | x, drawn params) + kl_scale * sum_params KL
//! ```
//!
//! with one reparameterized weight draw per minibatch (switchable to one per
//! sequence). Classification counts observations as labeled sequences; the
//! language-model tasks count every next-token prediction consumed per epoch.

use crate::compression::{apply_pruning, compression_rate, save_checkpoint, Checkpoint, PruneInfo};
use crate::data::{ClassificationSet, LmBatch, LmBatchStream, Vocabulary};
use crate::numerics::{softmax_cross_entropy_f64, Rng};
use crate::sparse_lstm::{Model, ModelDims, ModelVariant, Task};
use crate::variational::{NoiseMode, ParamSet};
use crate::{format_sig6, Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Full hyperparameter record. Serialized into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub variant: ModelVariant,
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
    /// Signal-to-noise pruning threshold (used for the per-epoch compression
    /// column and as the default for pruning).
    pub tau: f64,
    pub seed: u64,
    /// Linear KL warm-up over this many epochs; 0 keeps `kl_scale = 1`.
    pub kl_warmup_epochs: usize,
    /// Unroll length for LM batching.
    pub unroll: usize,
    /// Redraw posterior noise per sequence instead of per minibatch.
    pub per_sequence_noise: bool,
    /// Hidden neurons must also have a nonzero producing row to count as
    /// active (see the compression module).
    pub strict_neuron_rule: bool,
}

impl TrainConfig {
    /// Per-task defaults: classification lr 5e-4 / batch 128; char LM lr 2e-3
    /// / batch 64 / clip 1 / unroll 100; word LM lr 2e-3 / batch 32 /
    /// clip 10 / unroll 35.
    pub fn for_task(task: Task) -> TrainConfig {
        let common = TrainConfig {
            task,
            variant: ModelVariant::Wgn,
            vocab_size: 0,
            emb_dim: 300,
            hidden: 128,
            classes: 2,
            lr: 0.0,
            batch_size: 0,
            epochs: 0,
            clip: None,
            tau: 0.05,
            seed: 1,
            kl_warmup_epochs: 0,
            unroll: 0,
            per_sequence_noise: false,
            strict_neuron_rule: false,
        };
        match task {
            Task::Classification => TrainConfig {
                vocab_size: 20_000,
                lr: 0.0005,
                batch_size: 128,
                epochs: 150,
                ..common
            },
            Task::CharLm => TrainConfig {
                vocab_size: 0, // every distinct character
                hidden: 1000,
                lr: 0.002,
                batch_size: 64,
                epochs: 250,
                clip: Some(1.0),
                unroll: 100,
                ..common
            },
            Task::WordLm => TrainConfig {
                vocab_size: 10_000,
                hidden: 256,
                lr: 0.002,
                batch_size: 32,
                epochs: 150,
                clip: Some(10.0),
                unroll: 35,
                ..common
            },
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.vocab_size,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            classes: self.classes,
        }
    }

    fn kl_scale(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Rows-or-columns orthonormal matrix via modified Gram-Schmidt on a
/// Gaussian draw (whichever dimension is smaller gets orthonormalized).
fn orthogonal_init(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f32> {
    let transpose = rows > cols;
    let (n, m) = if transpose {
        (cols, rows)
    } else {
        (rows, cols)
    };
    // n <= m: orthonormalize the n rows of an n x m Gaussian matrix.
    let mut g: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| rng.normal()).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = g[i].iter().zip(&g[j]).map(|(&a, &b)| a * b).sum();
            for k in 0..m {
                g[i][k] -= dot * g[j][k];
            }
        }
        let norm: f64 = g[i].iter().map(|&v| v * v).sum::<f64>().sqrt();
        // A Gaussian row is never numerically degenerate at these sizes.
        for v in &mut g[i] {
            *v /= norm;
        }
    }
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = if transpose { g[c][r] } else { g[r][c] };
            out[r * cols + c] = v as f32;
        }
    }
    out
}

fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f32> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols)
        .map(|_| rng.uniform_range(-limit, limit) as f32)
        .collect()
}

/// Build and initialize a model: biases zero, log-sigmas -3, group variables
/// 1 (all from construction); hidden-to-hidden matrices orthogonal, and for
/// the LM tasks every matrix orthogonal, the rest Glorot uniform.
pub fn init_model(config: &TrainConfig, rng: &mut Rng) -> Model {
    let mut model = Model::new(config.variant, config.task, config.dims());
    let all_orthogonal = config.task.is_lm();

    if let Some(emb) = &mut model.embedding {
        let (v, d) = (emb.vocab(), emb.dim());
        emb.table
            .values_mut()
            .copy_from_slice(&glorot_uniform(v, d, rng));
    }
    let (h, d) = (model.cell.hidden(), model.cell.input_dim());
    for g in 0..4 {
        let init = if all_orthogonal {
            orthogonal_init(h, d, rng)
        } else {
            glorot_uniform(h, d, rng)
        };
        model.cell.wx[g].values_mut().copy_from_slice(&init);
    }
    for g in 0..4 {
        model.cell.wh[g]
            .values_mut()
            .copy_from_slice(&orthogonal_init(h, h, rng));
    }
    let k = model.output.classes();
    let init = if all_orthogonal {
        orthogonal_init(k, h, rng)
    } else {
        glorot_uniform(k, h, rng)
    };
    model.output.w.values_mut().copy_from_slice(&init);

    model.refresh_all();
    model
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction; moments accumulate in f64 per trainable array.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: Vec<Slot>,
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: Vec::new(),
        }
    }

    /// One update over every trainable array of `model`, consuming the
    /// accumulated gradients (which are left untouched; call `zero_grads`
    /// before the next pass).
    pub fn step<M: ParamSet + ?Sized>(&mut self, model: &mut M) {
        if self.slots.is_empty() {
            let mut sizes = Vec::new();
            model.for_each_param(&mut |p| {
                for _ in 0..p.n_arrays() {
                    sizes.push(p.len());
                }
            });
            self.slots = sizes
                .into_iter()
                .map(|n| Slot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);

        let mut slot_idx = 0;
        let slots = &mut self.slots;
        model.for_each_param_mut(&mut |p| {
            for k in 0..p.n_arrays() {
                let slot = &mut slots[slot_idx];
                slot_idx += 1;
                let (values, grads) = p.array_mut(k);
                for i in 0..values.len() {
                    let g = grads[i];
                    slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                    slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    values[i] = (values[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
                }
            }
        });
    }
}

/// Global-norm gradient clipping: if the L2 norm over every gradient exceeds
/// `threshold`, scale them all by `threshold / norm`. Returns the pre-clip
/// norm.
pub fn clip_gradients<M: ParamSet + ?Sized>(model: &mut M, threshold: f64) -> f64 {
    let mut sq = 0.0f64;
    model.for_each_param(&mut |p| {
        for k in 0..p.n_arrays() {
            for &g in p.grad(k) {
                sq += g * g;
            }
        }
    });
    let norm = sq.sqrt();
    if norm > threshold && norm > 0.0 {
        let factor = threshold / norm;
        model.for_each_param_mut(&mut |p| p.scale_grads(factor));
    }
    norm
}

// ---------------------------------------------------------------------------
// ELBO minibatches
// ---------------------------------------------------------------------------

/// Per-batch loss breakdown. `loss = scale * nll_sum + kl_scale * kl`.
#[derive(Debug, Clone, Copy)]
pub struct ElboBreakdown {
    pub loss: f64,
    pub nll_sum: f64,
    pub n_pred: usize,
    pub kl: f64,
    pub kl_scale: f64,
    pub scale: f64,
    pub n_correct: usize,
}

impl ElboBreakdown {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.n_pred.max(1) as f64
    }
}

fn nonfinite_diagnostics(model: &Model) -> String {
    let mut bad = Vec::new();
    model.for_each_param(&mut |p| {
        if p.values().iter().any(|v| !v.is_finite()) || p.realized().iter().any(|v| !v.is_finite())
        {
            bad.push(p.name().to_string());
        }
    });
    if bad.is_empty() {
        "no tensor holds non-finite values (loss overflow)".to_string()
    } else {
        format!("non-finite tensors: {}", bad.join(", "))
    }
}

fn check_finite(model: &Model, loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite {
            context: format!("{what}; {}", nonfinite_diagnostics(model)),
        })
    }
}

/// ELBO over a classification minibatch. Expects the sampling event to have
/// happened already (or deterministic realizations to be fresh); accumulates
/// gradients when `with_grad`.
pub fn elbo_classification_batch(
    model: &mut Model,
    batch: &[(Vec<u32>, u32)],
    n_total: usize,
    kl_scale: f64,
    with_grad: bool,
) -> Result<ElboBreakdown> {
    let scale = n_total as f64 / batch.len().max(1) as f64;
    let mut nll_sum = 0.0;
    let mut n_correct = 0;
    for (tokens, label) in batch {
        let fwd = model.forward(tokens, None)?;
        let logits = &fwd.logits[0];
        let (nll, dlogits) = softmax_cross_entropy_f64(logits, *label as usize);
        nll_sum += nll;
        if argmax(logits) == *label as usize {
            n_correct += 1;
        }
        if with_grad {
            let scaled: Vec<f64> = dlogits.iter().map(|&g| g * scale).collect();
            model.backward(&fwd, &[scaled])?;
        }
    }
    let kl = model.kl_total();
    if with_grad && kl_scale != 0.0 {
        model.add_kl_grads(kl_scale);
    }
    let loss = check_finite(
        model,
        scale * nll_sum + kl_scale * kl,
        "classification elbo",
    )?;
    Ok(ElboBreakdown {
        loss,
        nll_sum,
        n_pred: batch.len(),
        kl,
        kl_scale,
        scale,
        n_correct,
    })
}

/// Carried per-lane LM state, detached between minibatches.
#[derive(Debug, Clone)]
pub struct LaneStates {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

impl LaneStates {
    pub fn zeros(lanes: usize, hidden: usize) -> LaneStates {
        LaneStates {
            h: vec![vec![0.0; hidden]; lanes],
            c: vec![vec![0.0; hidden]; lanes],
        }
    }

    pub fn reset(&mut self) {
        for v in self.h.iter_mut().chain(self.c.iter_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// ELBO over one LM minibatch; every lane runs from its carried state, and
/// the final states are written back (no gradient crosses the boundary).
pub fn elbo_lm_batch(
    model: &mut Model,
    batch: &LmBatch,
    states: &mut LaneStates,
    n_total: usize,
    kl_scale: f64,
    with_grad: bool,
) -> Result<ElboBreakdown> {
    if !batch.carry {
        states.reset();
    }
    let mut n_pred = 0;
    for lane in &batch.inputs {
        n_pred += lane.len();
    }
    let scale = n_total as f64 / n_pred.max(1) as f64;

    let mut nll_sum = 0.0;
    let mut n_correct = 0;
    for (lane, (inputs, targets)) in batch.inputs.iter().zip(&batch.targets).enumerate() {
        let fwd = model.forward(inputs, Some((&states.h[lane], &states.c[lane])))?;
        let mut dlogits = Vec::with_capacity(inputs.len());
        for (t, target) in targets.iter().enumerate() {
            let (nll, dl) = softmax_cross_entropy_f64(&fwd.logits[t], *target as usize);
            nll_sum += nll;
            if argmax(&fwd.logits[t]) == *target as usize {
                n_correct += 1;
            }
            if with_grad {
                dlogits.push(dl.iter().map(|&g| g * scale).collect::<Vec<f64>>());
            }
        }
        states.h[lane] = fwd
            .lstm
            .h_seq
            .last()
            .cloned()
            .unwrap_or_else(|| states.h[lane].clone());
        states.c[lane] = fwd.lstm.c_final.clone();
        if with_grad {
            model.backward(&fwd, &dlogits)?;
        }
    }
    let kl = model.kl_total();
    if with_grad && kl_scale != 0.0 {
        model.add_kl_grads(kl_scale);
    }
    let loss = check_finite(model, scale * nll_sum + kl_scale * kl, "lm elbo")?;
    Ok(ElboBreakdown {
        loss,
        nll_sum,
        n_pred,
        kl,
        kl_scale,
        scale,
        n_correct,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Mean NLL plus the task metric (accuracy, bits-per-char, or perplexity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub nll: f64,
    pub metric: f64,
}

/// Convert a mean NLL into the task's headline metric.
pub fn task_metric(task: Task, mean_nll: f64, accuracy: f64) -> f64 {
    match task {
        Task::Classification => accuracy,
        Task::CharLm => mean_nll / std::f64::consts::LN_2,
        Task::WordLm => mean_nll.exp(),
    }
}

/// Whether `a` is at least as good a metric value as `b` for the task.
/// Ties count as improvement so the best checkpoint prefers later epochs:
/// at equal validation quality the later model is the sparser one.
pub fn metric_improved(task: Task, a: f64, b: f64) -> bool {
    match task {
        Task::Classification => a >= b,
        Task::CharLm | Task::WordLm => a <= b,
    }
}

/// Deterministic-mode evaluation of a classification set.
pub fn evaluate_classification(model: &mut Model, set: &ClassificationSet) -> Result<EvalMetrics> {
    if set.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut rng = Rng::from_seed(0);
    model.draw_all(NoiseMode::Deterministic, &mut rng);
    let mut nll_sum = 0.0;
    let mut correct = 0usize;
    for (tokens, label) in &set.examples {
        let fwd = model.forward(tokens, None)?;
        let (nll, _) = softmax_cross_entropy_f64(&fwd.logits[0], *label as usize);
        nll_sum += nll;
        if argmax(&fwd.logits[0]) == *label as usize {
            correct += 1;
        }
    }
    let nll = nll_sum / set.len() as f64;
    let accuracy = correct as f64 / set.len() as f64;
    Ok(EvalMetrics {
        nll,
        metric: task_metric(Task::Classification, nll, accuracy),
    })
}

/// Deterministic-mode evaluation of an LM corpus as one unbroken pass
/// (chunked internally with exact state carrying, which changes nothing).
pub fn evaluate_lm(model: &mut Model, ids: &[u32], chunk: usize) -> Result<EvalMetrics> {
    if ids.len() < 2 {
        return Err(Error::Data(
            "LM evaluation needs at least two tokens".into(),
        ));
    }
    let mut rng = Rng::from_seed(0);
    model.draw_all(NoiseMode::Deterministic, &mut rng);
    let hidden = model.dims.hidden;
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut nll_sum = 0.0;
    let mut n_pred = 0usize;
    let chunk = chunk.max(1);
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + chunk).min(ids.len() - 1);
        let inputs = &ids[start..end];
        let fwd = model.forward(inputs, Some((&h, &c)))?;
        for (t, &target) in ids[start + 1..end + 1].iter().enumerate() {
            let (nll, _) = softmax_cross_entropy_f64(&fwd.logits[t], target as usize);
            nll_sum += nll;
            n_pred += 1;
        }
        h = fwd.lstm.h_seq.last().cloned().unwrap_or(h);
        c = fwd.lstm.c_final.clone();
        start = end;
    }
    let nll = nll_sum / n_pred as f64;
    Ok(EvalMetrics {
        nll,
        metric: task_metric(model.task, nll, 0.0),
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Task-appropriate dataset splits.
#[derive(Debug, Clone)]
pub enum TaskData {
    Classification {
        train: ClassificationSet,
        val: ClassificationSet,
        test: ClassificationSet,
    },
    Lm {
        train: Vec<u32>,
        val: Vec<u32>,
        test: Vec<u32>,
    },
}

/// Dataset plus the vocabulary the ids were encoded with (None for synthetic
/// id-level tasks).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub data: TaskData,
    pub vocab: Option<Vocabulary>,
}

/// Output artifact paths and the best validation result of a run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub final_val_metric: f64,
    pub metrics_path: PathBuf,
    pub best_path: PathBuf,
    pub final_path: PathBuf,
}

/// Train a model per config, writing `metrics.tsv`, `best.ckpt`, and
/// `final.ckpt` under `out_dir`.
///
/// The metric log gets two rows per epoch (train and val) in the format
/// `epoch\tsplit\tnll\tkl\tmetric\tcompression` with 6-significant-digit
/// floats. On numeric divergence the run aborts with the last good
/// checkpoint retained on disk.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainSummary> {
    validate(config, dataset)?;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.tsv");
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");

    let mut metrics_file = std::fs::File::create(&metrics_path)?;
    writeln!(metrics_file, "epoch\tsplit\tnll\tkl\tmetric\tcompression")?;

    let mut rng = Rng::from_seed(config.seed);
    let mut model = init_model(config, &mut rng);
    let mut adam = Adam::new(config.lr);
    let noise_mode = NoiseMode::Sampled;

    let mut best: Option<(usize, f64)> = None;
    let mut last_val_metric = f64::NAN;

    for epoch in 0..config.epochs {
        let kl_scale = config.kl_scale(epoch);
        let mut train_nll_sum = 0.0;
        let mut train_pred = 0usize;
        let mut train_correct = 0usize;

        match &dataset.data {
            TaskData::Classification { train, .. } => {
                let mut order: Vec<usize> = (0..train.len()).collect();
                rng.shuffle(&mut order);
                let n_total = train.len();
                for chunk in order.chunks(config.batch_size.max(1)) {
                    let batch: Vec<(Vec<u32>, u32)> =
                        chunk.iter().map(|&i| train.examples[i].clone()).collect();
                    model.zero_grads();
                    if !config.per_sequence_noise {
                        model.draw_all(noise_mode, &mut rng);
                        let b =
                            elbo_classification_batch(&mut model, &batch, n_total, kl_scale, true)?;
                        train_nll_sum += b.nll_sum;
                        train_pred += b.n_pred;
                        train_correct += b.n_correct;
                    } else {
                        // One sampling event per sequence; gradients still
                        // accumulate over the whole batch.
                        for ex in &batch {
                            model.draw_all(noise_mode, &mut rng);
                            let one = std::slice::from_ref(ex);
                            let b = elbo_classification_batch(&mut model, one, n_total, 0.0, true)?;
                            train_nll_sum += b.nll_sum;
                            train_pred += b.n_pred;
                            train_correct += b.n_correct;
                        }
                        // KL once per batch, scaled as in the batched path.
                        model.add_kl_grads(kl_scale * batch.len() as f64);
                        let factor = 1.0 / batch.len().max(1) as f64;
                        model.for_each_param_mut(&mut |p| p.scale_grads(factor));
                    }
                    if let Some(threshold) = config.clip {
                        clip_gradients(&mut model, threshold);
                    }
                    adam.step(&mut model);
                }
            }
            TaskData::Lm { train, .. } => {
                let stream = LmBatchStream::new(train.clone(), config.batch_size, config.unroll)?;
                let n_total = stream.predictions_per_epoch();
                let mut states = LaneStates::zeros(config.batch_size, config.hidden);
                for batch in stream.batches() {
                    model.zero_grads();
                    model.draw_all(noise_mode, &mut rng);
                    let b =
                        elbo_lm_batch(&mut model, &batch, &mut states, n_total, kl_scale, true)?;
                    train_nll_sum += b.nll_sum;
                    train_pred += b.n_pred;
                    train_correct += b.n_correct;
                    if let Some(threshold) = config.clip {
                        clip_gradients(&mut model, threshold);
                    }
                    adam.step(&mut model);
                }
            }
        }

        // Validation in deterministic mode, plus the structural metrics.
        let val = match &dataset.data {
            TaskData::Classification { val, .. } => evaluate_classification(&mut model, val)?,
            TaskData::Lm { val, .. } => evaluate_lm(&mut model, val, 512)?,
        };
        last_val_metric = val.metric;
        let kl_now = model.kl_total();
        let pruned = apply_pruning(&model, config.tau, config.strict_neuron_rule);
        let compression = compression_rate(&pruned).rate;

        let train_nll = train_nll_sum / train_pred.max(1) as f64;
        let train_acc = train_correct as f64 / train_pred.max(1) as f64;
        let train_metric = task_metric(config.task, train_nll, train_acc);
        write_metric_row(
            &mut metrics_file,
            epoch + 1,
            "train",
            train_nll,
            kl_now,
            train_metric,
            compression,
        )?;
        write_metric_row(
            &mut metrics_file,
            epoch + 1,
            "val",
            val.nll,
            kl_now,
            val.metric,
            compression,
        )?;

        let improved = match best {
            None => true,
            Some((_, prev)) => metric_improved(config.task, val.metric, prev),
        };
        if improved {
            best = Some((epoch + 1, val.metric));
            let ckpt = checkpoint_of(config, &model, &rng, dataset, Some(val.metric));
            save_checkpoint(&ckpt, &best_path)?;
        }
    }

    let (best_epoch, best_val_metric) = best.unwrap_or((0, last_val_metric));
    let ckpt = checkpoint_of(config, &model, &rng, dataset, best.map(|(_, m)| m));
    save_checkpoint(&ckpt, &final_path)?;
    if best.is_none() {
        // Zero-epoch run: make both artifacts exist.
        save_checkpoint(&ckpt, &best_path)?;
    }

    Ok(TrainSummary {
        best_val_metric,
        best_epoch,
        final_val_metric: last_val_metric,
        metrics_path,
        best_path,
        final_path,
    })
}

fn checkpoint_of(
    config: &TrainConfig,
    model: &Model,
    rng: &Rng,
    dataset: &Dataset,
    best_val_metric: Option<f64>,
) -> Checkpoint {
    Checkpoint {
        config: config.clone(),
        model: model.clone(),
        rng: rng.state(),
        vocab: dataset.vocab.clone(),
        best_val_metric,
        prune: None::<PruneInfo>,
        masks: Default::default(),
    }
}

fn write_metric_row(
    file: &mut std::fs::File,
    epoch: usize,
    split: &str,
    nll: f64,
    kl: f64,
    metric: f64,
    compression: f64,
) -> Result<()> {
    writeln!(
        file,
        "{epoch}\t{split}\t{}\t{}\t{}\t{}",
        format_sig6(nll),
        format_sig6(kl),
        format_sig6(metric),
        format_sig6(compression)
    )?;
    Ok(())
}

fn validate(config: &TrainConfig, dataset: &Dataset) -> Result<()> {
    match (&dataset.data, config.task) {
        (TaskData::Classification { train, val, test }, Task::Classification) => {
            if train.is_empty() || val.is_empty() || test.is_empty() {
                return Err(Error::Config("empty classification split".into()));
            }
            for set in [train, val, test] {
                for (seq, label) in &set.examples {
                    if *label as usize >= config.classes {
                        return Err(Error::Config(format!(
                            "label {label} outside configured classes {}",
                            config.classes
                        )));
                    }
                    if seq.iter().any(|&id| id as usize >= config.vocab_size) {
                        return Err(Error::Config(format!(
                            "token id outside configured vocabulary {}",
                            config.vocab_size
                        )));
                    }
                }
            }
            Ok(())
        }
        (TaskData::Lm { train, val, test }, t) if t.is_lm() => {
            if train.is_empty() || val.is_empty() || test.is_empty() {
                return Err(Error::Config("empty LM split".into()));
            }
            Ok(())
        }
        _ => Err(Error::Config("dataset kind does not match task".into())),
    }
}
