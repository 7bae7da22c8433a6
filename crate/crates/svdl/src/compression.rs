//! Pruning, structural analysis, checkpoint serialization, and reports.
//!
//! Pruning zeroes every variational tensor entry whose posterior
//! signal-to-noise ratio falls below the threshold (ties kept). Structure is
//! then derived with factor-zero semantics: an effective weight
//! `w * z_col * z_row` counts as zero exactly when any factor is zero, so a
//! weight sitting in a removed row or column is zero no matter its own value.
//!
//! Checkpoint format: magic `SVDL`, little-endian u32 version, u64 manifest
//! length, UTF-8 JSON manifest (config, rng state, vocabulary, tensor
//! directory), then raw little-endian f32 payloads in manifest order with
//! masks bit-packed LSB-first. Writes are atomic (temp file + rename) and
//! save -> load -> save is byte-identical.

use crate::data::Vocabulary;
use crate::numerics::{sigmoid, RngState};
use crate::sparse_lstm::{Model, GATE_G, GATE_NAMES};
use crate::training::TrainConfig;
use crate::variational::{Param, ParamSet, Shape};
use crate::{format_sig6, CheckpointError, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

/// How a pruned model was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneInfo {
    pub tau: f64,
    /// Hidden neurons must also have a producing row to count as active.
    pub strict: bool,
}

/// Constancy of one gate component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateStatus {
    NonConstant,
    /// The component equals `activation(bias)` for every input.
    Constant {
        value: f64,
    },
}

/// Per-gate, per-hidden-unit constancy map.
#[derive(Debug, Clone)]
pub struct GateStructure {
    /// Indexed `[gate][unit]`, gate order (i, f, g, o).
    pub status: [Vec<GateStatus>; 4],
}

impl GateStructure {
    pub fn hidden(&self) -> usize {
        self.status[0].len()
    }

    pub fn n_nonconstant(&self) -> usize {
        self.status
            .iter()
            .flat_map(|g| g.iter())
            .filter(|s| matches!(s, GateStatus::NonConstant))
            .count()
    }

    pub fn total(&self) -> usize {
        4 * self.hidden()
    }
}

/// SNR histogram of one tensor: 20 log-spaced bins over [1e-10, 1e10], with
/// out-of-range values clamped into the edge bins.
#[derive(Debug, Clone)]
pub struct SnrHistogram {
    pub tensor: String,
    pub counts: [u64; SNR_BINS],
}

pub const SNR_BINS: usize = 20;

fn snr_bin(snr: f64) -> usize {
    if snr.is_nan() || snr <= 1e-10 {
        return 0;
    }
    let k = snr.log10().floor() as i64 + 10;
    k.clamp(0, SNR_BINS as i64 - 1) as usize
}

/// Deterministic means with keep-masks applied, plus the structural facts
/// derived from them. The embedded model has only plain parameters; its
/// deterministic forward is the pruned forward.
#[derive(Debug, Clone)]
pub struct PrunedModel {
    pub model: Model,
    pub masks: BTreeMap<String, Vec<bool>>,
    pub info: PruneInfo,
    pub gates: GateStructure,
    /// Active input neurons: vocabulary entries for classification, input
    /// dimensions for language modeling.
    pub active_input: Vec<usize>,
    pub active_hidden: Vec<usize>,
    pub snr_hists: Vec<SnrHistogram>,
}

/// Prune at threshold `tau`: every variational tensor becomes its mean with
/// sub-threshold entries zeroed; the original model is untouched.
pub fn apply_pruning(model: &Model, tau: f64, strict: bool) -> PrunedModel {
    let mut pruned = model.clone();
    let mut masks = BTreeMap::new();
    let mut snr_hists = Vec::new();

    pruned.for_each_param_mut(&mut |p| {
        if let Param::Variational(v) = p {
            let mut hist = SnrHistogram {
                tensor: v.name().to_string(),
                counts: [0; SNR_BINS],
            };
            for s in v.snr() {
                hist.counts[snr_bin(s)] += 1;
            }
            snr_hists.push(hist);

            let mask = v.prune_mask(tau);
            let name = v.name().to_string();
            let shape = v.shape();
            let mut values: Vec<f32> = v.mean().to_vec();
            for (val, &keep) in values.iter_mut().zip(&mask) {
                if !keep {
                    *val = 0.0;
                }
            }
            let mut plain = Param::plain(name.clone(), shape);
            plain.values_mut().copy_from_slice(&values);
            masks.insert(name, mask);
            *p = plain;
        }
    });
    pruned.refresh_all();

    let info = PruneInfo { tau, strict };
    finish_pruned(pruned, masks, info, snr_hists)
}

fn finish_pruned(
    model: Model,
    masks: BTreeMap<String, Vec<bool>>,
    info: PruneInfo,
    snr_hists: Vec<SnrHistogram>,
) -> PrunedModel {
    let gates = derive_gate_structure(&model);
    let active_hidden = derive_active_hidden(&model, &gates, info.strict);
    let active_input = derive_active_input(&model);
    PrunedModel {
        model,
        masks,
        info,
        gates,
        active_input,
        active_hidden,
        snr_hists,
    }
}

fn vals(p: &Param) -> &[f32] {
    p.values()
}

fn opt_vals(p: &Option<Param>) -> Option<&[f32]> {
    p.as_ref().map(|q| q.values())
}

fn nz(x: f32) -> bool {
    x != 0.0
}

/// Factor test for one z vector: zero means the whole row/column is removed;
/// an absent vector behaves as all-ones.
fn z_live(z: Option<&[f32]>, idx: usize) -> bool {
    z.is_none_or(|zv| nz(zv[idx]))
}

/// Gate component `(G, j)` is constant iff `z^G[j]` is zero (pruned) or row
/// `j` of the effective `[W^x_G | W^h_G]` is entirely zero; its value is the
/// activation of the bias.
fn derive_gate_structure(model: &Model) -> GateStructure {
    let cell = &model.cell;
    let h = cell.hidden();
    let d = cell.input_dim();
    let zx = opt_vals(&cell.zx);
    let zh = opt_vals(&cell.zh);

    let status = std::array::from_fn(|g| {
        let zg = opt_vals(&cell.zg[g]);
        let wx = vals(&cell.wx[g]);
        let wh = vals(&cell.wh[g]);
        let bias = vals(&cell.bias[g]);
        (0..h)
            .map(|j| {
                let row_live = z_live(zg, j)
                    && ((0..d).any(|c| nz(wx[j * d + c]) && z_live(zx, c))
                        || (0..h).any(|c| nz(wh[j * h + c]) && z_live(zh, c)));
                if row_live {
                    GateStatus::NonConstant
                } else {
                    let b = bias[j] as f64;
                    let value = if g == GATE_G { b.tanh() } else { sigmoid(b) };
                    GateStatus::Constant { value }
                }
            })
            .collect()
    });
    GateStructure { status }
}

/// Hidden neuron `j` is active iff `z^h[j]` (when present) is unpruned and
/// its output is consumed: column `j` of some effective recurrent matrix or
/// of the output matrix holds a nonzero. The strict rule additionally
/// requires a nonzero producing row.
fn derive_active_hidden(model: &Model, _gates: &GateStructure, strict: bool) -> Vec<usize> {
    let cell = &model.cell;
    let h = cell.hidden();
    let d = cell.input_dim();
    let zx = opt_vals(&cell.zx);
    let zh = opt_vals(&cell.zh);
    let wout = vals(&model.output.w);
    let k = model.output.classes();

    (0..h)
        .filter(|&j| {
            if !z_live(zh, j) {
                return false;
            }
            let consumed_by_cell = (0..4).any(|g| {
                let zg = opt_vals(&cell.zg[g]);
                let wh = vals(&cell.wh[g]);
                (0..h).any(|r| nz(wh[r * h + j]) && z_live(zg, r))
            });
            let consumed_by_output = (0..k).any(|kk| nz(wout[kk * h + j]));
            let mut active = consumed_by_cell || consumed_by_output;
            if strict && active {
                let produces = (0..4).any(|g| {
                    let zg = opt_vals(&cell.zg[g]);
                    if !z_live(zg, j) {
                        return false;
                    }
                    let wx = vals(&cell.wx[g]);
                    let wh = vals(&cell.wh[g]);
                    (0..d).any(|c| nz(wx[j * d + c]) && z_live(zx, c))
                        || (0..h).any(|c| nz(wh[j * h + c]) && z_live(zh, c))
                });
                active = produces;
            }
            active
        })
        .collect()
}

/// Input neurons: vocabulary entries (via the embedding) for classification,
/// LSTM input dimensions (via the `W^x` columns) for language modeling.
fn derive_active_input(model: &Model) -> Vec<usize> {
    match &model.embedding {
        Some(emb) => {
            let zv = opt_vals(&emb.z_vocab);
            let table = vals(&emb.table);
            let d = emb.dim();
            (0..emb.vocab())
                .filter(|&v| z_live(zv, v) && (0..d).any(|c| nz(table[v * d + c])))
                .collect()
        }
        None => {
            let cell = &model.cell;
            let d = cell.input_dim();
            let h = cell.hidden();
            let zx = opt_vals(&cell.zx);
            (0..d)
                .filter(|&c| {
                    z_live(zx, c)
                        && (0..4).any(|g| {
                            let zg = opt_vals(&cell.zg[g]);
                            let wx = vals(&cell.wx[g]);
                            (0..h).any(|r| nz(wx[r * d + c]) && z_live(zg, r))
                        })
                })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Counting
// ---------------------------------------------------------------------------

/// Per-tensor entry counts feeding the compression rate.
#[derive(Debug, Clone)]
pub struct LayerCount {
    pub name: String,
    pub total: u64,
    pub nonzero: u64,
}

/// `|w| / |w != 0|` over every individually sparsified weight tensor
/// (embedding, the eight gate matrices, the output matrix). Biases and the
/// group variables themselves are excluded; group-variable zeros propagate
/// into the per-entry effective values.
#[derive(Debug, Clone)]
pub struct CompressionReport {
    pub total: u64,
    pub nonzero: u64,
    pub rate: f64,
    /// Set when every entry is effectively zero (rate reported as total/1).
    pub saturated: bool,
    pub per_layer: Vec<LayerCount>,
}

pub fn compression_rate(pruned: &PrunedModel) -> CompressionReport {
    let model = &pruned.model;
    let cell = &model.cell;
    let mut per_layer = Vec::new();

    if let Some(emb) = &model.embedding {
        let zv = opt_vals(&emb.z_vocab);
        let table = vals(&emb.table);
        let d = emb.dim();
        let mut nonzero = 0u64;
        for v in 0..emb.vocab() {
            for c in 0..d {
                if nz(table[v * d + c]) && z_live(zv, v) {
                    nonzero += 1;
                }
            }
        }
        per_layer.push(LayerCount {
            name: "embedding.table".into(),
            total: (emb.vocab() * d) as u64,
            nonzero,
        });
    }

    let h = cell.hidden();
    let d = cell.input_dim();
    let zx = opt_vals(&cell.zx);
    let zh = opt_vals(&cell.zh);
    for g in 0..4 {
        let zg = opt_vals(&cell.zg[g]);
        let wx = vals(&cell.wx[g]);
        let mut nonzero = 0u64;
        for r in 0..h {
            for c in 0..d {
                if nz(wx[r * d + c]) && z_live(zx, c) && z_live(zg, r) {
                    nonzero += 1;
                }
            }
        }
        per_layer.push(LayerCount {
            name: format!("lstm.wx.{}", GATE_NAMES[g]),
            total: (h * d) as u64,
            nonzero,
        });

        let wh = vals(&cell.wh[g]);
        let mut nonzero = 0u64;
        for r in 0..h {
            for c in 0..h {
                if nz(wh[r * h + c]) && z_live(zh, c) && z_live(zg, r) {
                    nonzero += 1;
                }
            }
        }
        per_layer.push(LayerCount {
            name: format!("lstm.wh.{}", GATE_NAMES[g]),
            total: (h * h) as u64,
            nonzero,
        });
    }

    let wout = vals(&model.output.w);
    let k = model.output.classes();
    per_layer.push(LayerCount {
        name: "output.w".into(),
        total: (k * h) as u64,
        nonzero: wout.iter().filter(|&&w| nz(w)).count() as u64,
    });

    let total: u64 = per_layer.iter().map(|l| l.total).sum();
    let nonzero: u64 = per_layer.iter().map(|l| l.nonzero).sum();
    let saturated = nonzero == 0;
    let rate = total as f64 / nonzero.max(1) as f64;
    CompressionReport {
        total,
        nonzero,
        rate,
        saturated,
        per_layer,
    }
}

/// (active input neurons, active hidden neurons).
pub fn count_active_neurons(pruned: &PrunedModel) -> (usize, usize) {
    (pruned.active_input.len(), pruned.active_hidden.len())
}

/// Number of non-constant gate components (out of `4 * hidden`).
pub fn count_nonconstant_gates(pruned: &PrunedModel) -> (usize, &GateStructure) {
    (pruned.gates.n_nonconstant(), &pruned.gates)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CKPT_MAGIC: [u8; 4] = *b"SVDL";
pub const CKPT_VERSION: u32 = 1;

/// Everything a run needs to resume or evaluate: config, parameters, rng
/// state, vocabulary, and (for pruned models) the keep-masks.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub rng: RngState,
    pub vocab: Option<Vocabulary>,
    pub best_val_metric: Option<f64>,
    pub prune: Option<PruneInfo>,
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl Checkpoint {
    /// Reassemble a [`PrunedModel`] (derived facts recomputed). Errors if the
    /// checkpoint was not pruned.
    pub fn to_pruned(&self) -> Result<PrunedModel> {
        let info = self.prune.ok_or(CheckpointError::NotPruned)?;
        Ok(finish_pruned(
            self.model.clone(),
            self.masks.clone(),
            info,
            Vec::new(),
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    rng: RngState,
    vocab: Option<VocabManifest>,
    best_val_metric: Option<f64>,
    pruned: Option<PruneInfo>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct VocabManifest {
    tokens: Vec<String>,
    unk: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    /// Element count (not bytes).
    len: u64,
}

fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_mask(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Serialize a checkpoint; the write is atomic (temp file then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();

    let push_tensor = |tensors: &mut Vec<TensorEntry>,
                       payload: &mut Vec<u8>,
                       name: String,
                       dtype: &str,
                       shape: &Shape,
                       bytes: Vec<u8>,
                       len: usize| {
        tensors.push(TensorEntry {
            name,
            dtype: dtype.to_string(),
            shape: shape.dims(),
            offset: payload.len() as u64,
            len: len as u64,
        });
        payload.extend_from_slice(&bytes);
    };

    ckpt.model.for_each_param(&mut |p| {
        let shape = p.shape();
        match p {
            Param::Plain(q) => {
                let bytes: Vec<u8> = q.value().iter().flat_map(|v| v.to_le_bytes()).collect();
                push_tensor(
                    &mut tensors,
                    &mut payload,
                    q.name().to_string(),
                    "f32",
                    &shape,
                    bytes,
                    q.value().len(),
                );
            }
            Param::Variational(v) => {
                let mean_bytes: Vec<u8> = v.mean().iter().flat_map(|x| x.to_le_bytes()).collect();
                push_tensor(
                    &mut tensors,
                    &mut payload,
                    format!("{}.mean", v.name()),
                    "f32",
                    &shape,
                    mean_bytes,
                    v.len(),
                );
                let ls_bytes: Vec<u8> =
                    v.log_sigma().iter().flat_map(|x| x.to_le_bytes()).collect();
                push_tensor(
                    &mut tensors,
                    &mut payload,
                    format!("{}.log_sigma", v.name()),
                    "f32",
                    &shape,
                    ls_bytes,
                    v.len(),
                );
            }
        }
        if let Some(mask) = ckpt.masks.get(p.name()) {
            push_tensor(
                &mut tensors,
                &mut payload,
                format!("{}.mask", p.name()),
                "mask",
                &shape,
                pack_mask(mask),
                mask.len(),
            );
        }
    });

    let manifest = Manifest {
        version: CKPT_VERSION,
        config: ckpt.config.clone(),
        rng: ckpt.rng.clone(),
        vocab: ckpt.vocab.as_ref().map(|v| VocabManifest {
            tokens: v.tokens().to_vec(),
            unk: v.unk(),
        }),
        best_val_metric: ckpt.best_val_metric,
        pruned: ckpt.prune,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(CheckpointError::Manifest(e.to_string())))?;

    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len());
    bytes.extend_from_slice(&CKPT_MAGIC);
    bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parse and validate a checkpoint file, reconstructing the model.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("missing header".into()).into());
    }
    if bytes[0..4] != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: CKPT_VERSION,
        }
        .into());
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(CheckpointError::Truncated("manifest extends past end of file".into()).into());
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let payload = &bytes[16 + manifest_len..];

    // The tensor directory must tile the payload exactly, in order.
    let mut cursor = 0u64;
    for t in &manifest.tensors {
        if t.offset != cursor {
            return Err(CheckpointError::ManifestMismatch(format!(
                "tensor {} at offset {} (expected {})",
                t.name, t.offset, cursor
            ))
            .into());
        }
        let byte_len = match t.dtype.as_str() {
            "f32" => t.len * 4,
            "mask" => t.len.div_ceil(8),
            other => {
                return Err(CheckpointError::Manifest(format!(
                    "tensor {}: unknown dtype {other:?}",
                    t.name
                ))
                .into())
            }
        };
        cursor += byte_len;
    }
    if cursor != payload.len() as u64 {
        return Err(CheckpointError::ManifestMismatch(format!(
            "manifest declares {cursor} payload bytes, file holds {}",
            payload.len()
        ))
        .into());
    }

    // Rebuild the model skeleton and fill it in manifest order.
    let config = manifest.config;
    let mut model = Model::new(config.variant, config.task, config.dims());
    if manifest.pruned.is_some() {
        // A pruned checkpoint stores deterministic means only.
        model.for_each_param_mut(&mut |p| {
            if p.is_variational() {
                let mut plain = Param::plain(p.name().to_string(), p.shape());
                plain.refresh();
                *p = plain;
            }
        });
    }

    let mut entries = manifest.tensors.iter();
    let mut masks = BTreeMap::new();
    let mut failure: Option<Error> = None;
    let read_f32 = |t: &TensorEntry| -> Vec<f32> {
        let start = t.offset as usize;
        payload[start..start + t.len as usize * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };

    model.for_each_param_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        let shape_dims = p.shape().dims();
        let mut expect = |want: String, dtype: &str| -> std::result::Result<TensorEntry, Error> {
            match entries.next() {
                Some(t) if t.name == want && t.dtype == dtype && t.shape == shape_dims => {
                    Ok(TensorEntry {
                        name: t.name.clone(),
                        dtype: t.dtype.clone(),
                        shape: t.shape.clone(),
                        offset: t.offset,
                        len: t.len,
                    })
                }
                Some(t) => Err(CheckpointError::ManifestMismatch(format!(
                    "expected tensor {want} ({dtype}), found {} ({})",
                    t.name, t.dtype
                ))
                .into()),
                None => {
                    Err(CheckpointError::ManifestMismatch(format!("missing tensor {want}")).into())
                }
            }
        };
        let result = (|| -> Result<()> {
            match p {
                Param::Plain(q) => {
                    let t = expect(q.name().to_string(), "f32")?;
                    q.value_mut().copy_from_slice(&read_f32(&t));
                }
                Param::Variational(v) => {
                    let tm = expect(format!("{}.mean", v.name()), "f32")?;
                    let tl = expect(format!("{}.log_sigma", v.name()), "f32")?;
                    v.mean_mut().copy_from_slice(&read_f32(&tm));
                    v.log_sigma_mut().copy_from_slice(&read_f32(&tl));
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            failure = Some(e);
            return;
        }
        // An optional mask rides along with its tensor.
        if manifest.pruned.is_some() {
            let mask_name = format!("{}.mask", p.name());
            if let Some(t) = entries.clone().next() {
                if t.name == mask_name {
                    let t = entries.next().unwrap();
                    let start = t.offset as usize;
                    let end = start + (t.len as usize).div_ceil(8);
                    masks.insert(
                        p.name().to_string(),
                        unpack_mask(&payload[start..end], t.len as usize),
                    );
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(t) = entries.next() {
        return Err(CheckpointError::ManifestMismatch(format!(
            "unexpected extra tensor {}",
            t.name
        ))
        .into());
    }
    model.refresh_all();

    let vocab = manifest
        .vocab
        .map(|v| Vocabulary::from_tokens(v.tokens, v.unk));
    Ok(Checkpoint {
        config,
        model,
        rng: manifest.rng,
        vocab,
        best_val_metric: manifest.best_val_metric,
        prune: manifest.pruned,
        masks,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Write `summary.tsv`, `gates.csv`, and `snr_hist.tsv` under `dir`.
///
/// `summary.tsv` holds one row in the quantitative-table schema (variant,
/// metric, compression, neurons x-h, gates); `metric` is the stored best
/// validation metric when available. `gates.csv` lists every gate component
/// with its constancy and constant value. `snr_hist.tsv` bins each
/// variational tensor's SNR into 20 log-spaced bins.
pub fn structure_report(pruned: &PrunedModel, metric: Option<f64>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let report = compression_rate(pruned);
    let (n_in, n_hid) = count_active_neurons(pruned);
    let (n_gates, gates) = count_nonconstant_gates(pruned);

    let mut summary = String::from("variant\tmetric\tcompression\tneurons\tgates\n");
    summary.push_str(&format!(
        "{}\t{}\t{}\t{}-{}\t{}\n",
        pruned.model.variant.name(),
        metric.map_or_else(|| "-".to_string(), format_sig6),
        format_sig6(report.rate),
        n_in,
        n_hid,
        n_gates
    ));
    std::fs::write(dir.join("summary.tsv"), summary)?;

    let mut gates_csv = String::from("gate,unit,constant,value\n");
    for g in 0..4 {
        for (j, status) in gates.status[g].iter().enumerate() {
            match status {
                GateStatus::NonConstant => {
                    gates_csv.push_str(&format!("{},{},false,\n", GATE_NAMES[g], j));
                }
                GateStatus::Constant { value } => {
                    gates_csv.push_str(&format!(
                        "{},{},true,{}\n",
                        GATE_NAMES[g],
                        j,
                        format_sig6(*value)
                    ));
                }
            }
        }
    }
    std::fs::write(dir.join("gates.csv"), gates_csv)?;

    let mut hist = String::from("tensor\tbin_lo\tbin_hi\tcount\n");
    for h in &pruned.snr_hists {
        for (k, &count) in h.counts.iter().enumerate() {
            let lo = 10f64.powi(k as i32 - 10);
            let hi = 10f64.powi(k as i32 - 9);
            hist.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                h.tensor,
                format_sig6(lo),
                format_sig6(hi),
                count
            ));
        }
    }
    std::fs::write(dir.join("snr_hist.tsv"), hist)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::sparse_lstm::test_support::randomize;
    use crate::sparse_lstm::{ModelDims, ModelVariant, Task, GATE_F};
    use crate::training::TrainConfig;
    use crate::variational::NoiseMode;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 9,
            emb_dim: 4,
            hidden: 5,
            classes: 2,
        }
    }

    fn random_model(variant: ModelVariant, seed: u64) -> Model {
        let mut model = Model::new(variant, Task::Classification, dims());
        let mut rng = Rng::from_seed(seed);
        randomize(&mut model, &mut rng, 0.6);
        // Spread log-sigmas so pruning at tau = 0.05 actually bites.
        model.for_each_param_mut(&mut |p| {
            if let Some(v) = p.as_variational_mut() {
                for l in v.log_sigma_mut() {
                    *l = rng.uniform_range(-3.0, 1.5) as f32;
                }
            }
        });
        model.refresh_all();
        model
    }

    fn det_logits(model: &mut Model, tokens: &[u32]) -> Vec<f64> {
        model.forward_deterministic(tokens, None).unwrap().logits[0].clone()
    }

    #[test]
    fn tau_zero_prunes_nothing_and_preserves_forward() {
        let mut model = random_model(ModelVariant::Wgn, 1);
        let pruned = apply_pruning(&model, 0.0, false);
        assert!(pruned.masks.values().all(|m| m.iter().all(|&k| k)));
        let tokens = [1u32, 4, 7, 2];
        let a = det_logits(&mut model, &tokens);
        let mut pm = pruned.model.clone();
        let b = det_logits(&mut pm, &tokens);
        assert_eq!(a, b);
    }

    #[test]
    fn tau_infinity_zeroes_every_variational_tensor() {
        let model = random_model(ModelVariant::Wgn, 2);
        let pruned = apply_pruning(&model, f64::INFINITY, false);
        assert!(pruned.masks.values().all(|m| m.iter().all(|&k| !k)));
        pruned.model.for_each_param(&mut |p| {
            if pruned.masks.contains_key(p.name()) {
                assert!(p.values().iter().all(|&v| v == 0.0), "{}", p.name());
            }
        });
        // Forward is driven by biases alone and still runs.
        let mut pm = pruned.model.clone();
        let logits = det_logits(&mut pm, &[0, 3]);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pruned_forward_equals_masked_dense_oracle_exactly() {
        for seed in [3u64, 4, 5] {
            let model = random_model(ModelVariant::Wgn, seed);
            let tau = 0.05;
            let pruned = apply_pruning(&model, tau, false);

            // Oracle: manually zero sub-threshold entries on a dense clone.
            let mut oracle = model.clone();
            oracle.for_each_param_mut(&mut |p| {
                if let Some(v) = p.as_variational_mut() {
                    let snr = v.snr();
                    for (i, s) in snr.iter().enumerate() {
                        if *s < tau {
                            v.mean_mut()[i] = 0.0;
                        }
                    }
                }
            });

            let tokens = [2u32, 8, 5, 1, 6];
            let mut pm = pruned.model.clone();
            let a = det_logits(&mut pm, &tokens);
            let b = det_logits(&mut oracle, &tokens);
            assert_eq!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn compression_rate_unpruned_is_one() {
        let model = random_model(ModelVariant::Wgn, 6);
        let pruned = apply_pruning(&model, 0.0, false);
        let report = compression_rate(&pruned);
        assert_eq!(report.total, report.nonzero);
        assert_eq!(report.rate, 1.0);
        assert!(!report.saturated);
    }

    #[test]
    fn compression_rate_half_zero_is_two() {
        // Even-sized tensors so "half" is exact.
        let mut model = Model::new(
            ModelVariant::W,
            Task::Classification,
            ModelDims {
                vocab: 8,
                emb_dim: 4,
                hidden: 4,
                classes: 2,
            },
        );
        let mut rng = Rng::from_seed(7);
        randomize(&mut model, &mut rng, 0.6);
        // Zero out every second entry of every counted tensor by hand.
        model.for_each_param_mut(&mut |p| {
            let group = p.as_variational().map(|v| v.is_group()).unwrap_or(false);
            let counted = !group
                && p.name() != "lstm.b.i"
                && !p.name().starts_with("lstm.b.")
                && p.name() != "output.b";
            if counted {
                let vals = p.values_mut();
                for i in (0..vals.len()).step_by(2) {
                    vals[i] = 0.0;
                }
                // Make sure the odd entries are nonzero.
                for i in (1..vals.len()).step_by(2) {
                    if vals[i] == 0.0 {
                        vals[i] = 0.5;
                    }
                }
            }
        });
        model.refresh_all();
        let pruned = apply_pruning(&model, 0.0, false);
        let report = compression_rate(&pruned);
        // Every counted tensor here has an even element count.
        assert_eq!(report.nonzero * 2, report.total);
        assert_eq!(report.rate, 2.0);
    }

    /// Independent brute-force recount of the effective-nonzero rule.
    fn brute_force_counts(pruned: &PrunedModel) -> (u64, u64) {
        let model = &pruned.model;
        let cell = &model.cell;
        let h = cell.hidden();
        let d = cell.input_dim();
        let get = |p: &Option<Param>, i: usize| -> f64 {
            p.as_ref().map_or(1.0, |q| q.values()[i] as f64)
        };
        let mut total = 0u64;
        let mut nonzero = 0u64;
        if let Some(emb) = &model.embedding {
            for v in 0..emb.vocab() {
                for c in 0..emb.dim() {
                    total += 1;
                    let w = emb.table.values()[v * emb.dim() + c] as f64;
                    if w != 0.0 && get(&emb.z_vocab, v) != 0.0 {
                        nonzero += 1;
                    }
                }
            }
        }
        for g in 0..4 {
            for r in 0..h {
                for c in 0..d {
                    total += 1;
                    let w = cell.wx[g].values()[r * d + c] as f64;
                    if w != 0.0 && get(&cell.zx, c) != 0.0 && get(&cell.zg[g], r) != 0.0 {
                        nonzero += 1;
                    }
                }
                for c in 0..h {
                    total += 1;
                    let w = cell.wh[g].values()[r * h + c] as f64;
                    if w != 0.0 && get(&cell.zh, c) != 0.0 && get(&cell.zg[g], r) != 0.0 {
                        nonzero += 1;
                    }
                }
            }
        }
        for &w in model.output.w.values() {
            total += 1;
            if w != 0.0 {
                nonzero += 1;
            }
        }
        (total, nonzero)
    }

    #[test]
    fn compression_counts_match_brute_force() {
        for seed in 10..16u64 {
            let model = random_model(ModelVariant::Wgn, seed);
            let pruned = apply_pruning(&model, 0.05, false);
            let report = compression_rate(&pruned);
            let (total, nonzero) = brute_force_counts(&pruned);
            assert_eq!(report.total, total, "seed {seed}");
            assert_eq!(report.nonzero, nonzero, "seed {seed}");
        }
    }

    #[test]
    fn neuron_counts_unpruned_and_zh_rule() {
        let model = random_model(ModelVariant::Wgn, 20);
        let pruned = apply_pruning(&model, 0.0, false);
        assert_eq!(count_active_neurons(&pruned), (9, 5));

        // Zeroing z^h[2] makes hidden neuron 2 inactive regardless of weights.
        let mut model = random_model(ModelVariant::Wgn, 21);
        model.cell.zh.as_mut().unwrap().values_mut()[2] = 0.0;
        model.refresh_all();
        let pruned = apply_pruning(&model, 0.0, false);
        assert!(!pruned.active_hidden.contains(&2));
    }

    #[test]
    fn gate_counts_and_constant_values() {
        let mut model = random_model(ModelVariant::Wgn, 22);
        let pruned = apply_pruning(&model, 0.0, false);
        let (n, _) = count_nonconstant_gates(&pruned);
        assert_eq!(n, 4 * 5);

        // z^f[3] = 0 with b_f[3] = 0 pins (f, 3) at 0.5.
        model.cell.zg[GATE_F].as_mut().unwrap().values_mut()[3] = 0.0;
        model.cell.bias[GATE_F].values_mut()[3] = 0.0;
        // z^f[1] = 0 with a large bias reports an always-open gate.
        model.cell.zg[GATE_F].as_mut().unwrap().values_mut()[1] = 0.0;
        model.cell.bias[GATE_F].values_mut()[1] = 12.0;
        model.refresh_all();
        let pruned = apply_pruning(&model, 0.0, false);
        let (n, gates) = count_nonconstant_gates(&pruned);
        assert_eq!(n, 4 * 5 - 2);
        match gates.status[GATE_F][3] {
            GateStatus::Constant { value } => assert!((value - 0.5).abs() < 1e-12),
            _ => panic!("expected constant"),
        }
        match gates.status[GATE_F][1] {
            GateStatus::Constant { value } => {
                assert!((value - sigmoid(12.0)).abs() < 1e-12);
                assert!(value > 0.99999);
            }
            _ => panic!("expected constant"),
        }
    }

    #[test]
    fn counts_are_monotone_in_tau() {
        let model = random_model(ModelVariant::Wgn, 23);
        let mut prev_nonzero = u64::MAX;
        let mut prev_neurons = usize::MAX;
        let mut prev_gates = usize::MAX;
        for tau in [0.0, 0.01, 0.05, 0.2, 1.0, 10.0, f64::INFINITY] {
            let pruned = apply_pruning(&model, tau, false);
            let report = compression_rate(&pruned);
            let (n_in, n_hid) = count_active_neurons(&pruned);
            let (n_gates, _) = count_nonconstant_gates(&pruned);
            assert!(report.nonzero <= prev_nonzero);
            assert!(n_in + n_hid <= prev_neurons);
            assert!(n_gates <= prev_gates);
            prev_nonzero = report.nonzero;
            prev_neurons = n_in + n_hid;
            prev_gates = n_gates;
        }
    }

    #[test]
    fn constant_gate_report_matches_actual_traces() {
        let model = random_model(ModelVariant::Wgn, 24);
        let pruned = apply_pruning(&model, 0.3, false);
        let mut pm = pruned.model.clone();
        let mut rng = Rng::from_seed(99);
        pm.draw_all(NoiseMode::Deterministic, &mut rng);
        for trial in 0..3 {
            let tokens: Vec<u32> = (0..8).map(|_| rng.below(9) as u32).collect();
            let fwd = pm.forward(&tokens, None).unwrap();
            for g in 0..4 {
                for (j, status) in pruned.gates.status[g].iter().enumerate() {
                    if let GateStatus::Constant { value } = status {
                        for step in &fwd.lstm.steps {
                            assert!(
                                (step.gates[g][j] - value).abs() < 1e-6,
                                "trial {trial} gate {g} unit {j}"
                            );
                        }
                    }
                }
            }
        }
    }

    fn checkpoint_fixture(seed: u64) -> Checkpoint {
        let mut cfg = TrainConfig::for_task(Task::Classification);
        cfg.vocab_size = 9;
        cfg.emb_dim = 4;
        cfg.hidden = 5;
        cfg.classes = 2;
        cfg.variant = ModelVariant::Wgn;
        let model = random_model(ModelVariant::Wgn, seed);
        Checkpoint {
            config: cfg,
            model,
            rng: Rng::from_seed(seed).state(),
            vocab: Some(Vocabulary::from_tokens(
                (0..9).map(|i| format!("t{i}")).collect(),
                None,
            )),
            best_val_metric: Some(0.875),
            prune: None,
            masks: BTreeMap::new(),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = checkpoint_fixture(30);
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // And the parameters match bit for bit.
        assert_eq!(ckpt.model.flat_params(), loaded.model.flat_params());
        assert_eq!(loaded.best_val_metric, Some(0.875));
        assert_eq!(loaded.vocab.as_ref().unwrap().len(), 9);
    }

    #[test]
    fn pruned_checkpoint_round_trip_keeps_masks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pruned.ckpt");
        let fixture = checkpoint_fixture(31);
        let pruned = apply_pruning(&fixture.model, 0.05, false);
        let ckpt = Checkpoint {
            model: pruned.model.clone(),
            prune: Some(pruned.info),
            masks: pruned.masks.clone(),
            ..fixture
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.masks, pruned.masks);
        let rebuilt = loaded.to_pruned().unwrap();
        assert_eq!(rebuilt.active_hidden, pruned.active_hidden);
        assert_eq!(rebuilt.gates.n_nonconstant(), pruned.gates.n_nonconstant());
    }

    #[test]
    fn checkpoint_error_taxonomy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&checkpoint_fixture(32), &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));

        // Unsupported version.
        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::Version { .. }))
        ));

        // Header truncation.
        std::fs::write(&path, &good[..10]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));

        // Payload shorter than the manifest declares.
        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::ManifestMismatch(_)))
        ));
    }

    #[test]
    fn structure_report_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = random_model(ModelVariant::Wgn, 40);
        // Unpruned: every gate non-constant.
        let pruned = apply_pruning(&model, 0.0, false);
        structure_report(&pruned, Some(0.9), dir.path()).unwrap();
        let gates = std::fs::read_to_string(dir.path().join("gates.csv")).unwrap();
        let rows: Vec<&str> = gates.lines().skip(1).collect();
        assert_eq!(rows.len(), 4 * 5);
        assert!(rows.iter().all(|r| r.contains(",false,")));

        // The worked constant-gate example shows up as `f,3,true,0.5`.
        model.cell.zg[GATE_F].as_mut().unwrap().values_mut()[3] = 0.0;
        model.cell.bias[GATE_F].values_mut()[3] = 0.0;
        model.refresh_all();
        let pruned = apply_pruning(&model, 0.0, false);
        structure_report(&pruned, None, dir.path()).unwrap();
        let gates = std::fs::read_to_string(dir.path().join("gates.csv")).unwrap();
        assert!(gates.lines().any(|r| r == "f,3,true,0.5"), "{gates}");

        // Summary compression field re-parses to the computed rate.
        let summary = std::fs::read_to_string(dir.path().join("summary.tsv")).unwrap();
        let row = summary.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split('\t').collect();
        let reparsed: f64 = fields[2].parse().unwrap();
        let rate = compression_rate(&pruned).rate;
        assert!((reparsed - rate).abs() / rate < 1e-5);
        assert_eq!(fields[1], "-");

        // SNR histogram covers every variational tensor with 20 bins each.
        let hist = std::fs::read_to_string(dir.path().join("snr_hist.tsv")).unwrap();
        let n_rows = hist.lines().count() - 1;
        assert_eq!(n_rows % SNR_BINS, 0);
        assert_eq!(n_rows / SNR_BINS, pruned.snr_hists.len());
        let total: u64 = hist
            .lines()
            .skip(1)
            .map(|r| r.rsplit('\t').next().unwrap().parse::<u64>().unwrap())
            .sum();
        let expected: usize = pruned.masks.values().map(|m| m.len()).sum();
        assert_eq!(total as usize, expected);
    }
}
