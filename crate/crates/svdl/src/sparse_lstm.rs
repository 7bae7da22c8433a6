//! Group-variable LSTM with embedding and output heads.
//!
//! One recurrent layer whose gate preactivations are
//!
//! ```text
//! pre_G = (W^h_G (h_{t-1} * z^h) + W^x_G (x_t * z^x)) * z^G + b_G
//! ```
//!
//! for gates G in {i, f, g, o}, then the usual cell update
//! `c_t = f * c_{t-1} + i * g`, `h_t = o * tanh(c_t)`. The multiplicative
//! group variables `z^x`, `z^h` (neurons) and `z^i`, `z^f`, `z^g`, `z^o`
//! (gate preactivations) are optional variational parameters; an absent
//! vector behaves as all-ones. Zeroing `z^G[j]` makes gate component
//! `(G, j)` constant at `activation(b_G[j])` for every input.
//!
//! Parameters are stored in `f32`; all forward/backward arithmetic runs in
//! `f64` so analytic gradients can be verified against central differences
//! at tight tolerances.

use crate::numerics::{sigmoid, Array2, Rng};
use crate::variational::{NoiseMode, Param, ParamSet, Shape};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Gate order used everywhere, including serialized layouts.
pub const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];
pub const GATE_I: usize = 0;
pub const GATE_F: usize = 1;
pub const GATE_G: usize = 2;
pub const GATE_O: usize = 3;

/// Which tensors carry posteriors and which group variables exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    /// No variational parameters anywhere.
    Baseline,
    /// Weights variational, no group variables.
    W,
    /// Adds neuron variables `z^x`, `z^h` (and the vocabulary multiplier for
    /// classification). `z^x` is omitted for language modeling.
    WN,
    /// Adds the gate/information-flow variables `z^i`, `z^f`, `z^g`, `z^o`.
    Wgn,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Baseline,
        ModelVariant::W,
        ModelVariant::WN,
        ModelVariant::Wgn,
    ];

    pub fn parse(s: &str) -> Option<ModelVariant> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Some(ModelVariant::Baseline),
            "w" => Some(ModelVariant::W),
            "wn" | "w+n" => Some(ModelVariant::WN),
            "wgn" | "w+g+n" => Some(ModelVariant::Wgn),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "Baseline",
            ModelVariant::W => "W",
            ModelVariant::WN => "WN",
            ModelVariant::Wgn => "WGN",
        }
    }

    fn weights_variational(self) -> bool {
        !matches!(self, ModelVariant::Baseline)
    }

    fn has_neuron_vars(self) -> bool {
        matches!(self, ModelVariant::WN | ModelVariant::Wgn)
    }

    fn has_gate_vars(self) -> bool {
        matches!(self, ModelVariant::Wgn)
    }
}

/// Task family; decides the head, the input encoding, and which group
/// variables make sense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Next-character prediction, one-hot input, per-timestep logits.
    CharLm,
    /// Next-word prediction, one-hot input, per-timestep logits.
    WordLm,
    /// Sequence classification via an embedding layer and a last-timestep
    /// dense head.
    Classification,
}

impl Task {
    pub fn parse(s: &str) -> Option<Task> {
        match s.to_ascii_lowercase().as_str() {
            "charlm" | "char_lm" | "char" => Some(Task::CharLm),
            "wordlm" | "word_lm" | "word" => Some(Task::WordLm),
            "classification" | "class" => Some(Task::Classification),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::CharLm => "charlm",
            Task::WordLm => "wordlm",
            Task::Classification => "classification",
        }
    }

    pub fn is_lm(self) -> bool {
        matches!(self, Task::CharLm | Task::WordLm)
    }
}

/// Model dimensions. For language modeling the LSTM input is the one-hot
/// vocabulary and the output size equals the vocabulary; `emb_dim` and
/// `classes` only matter for classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn lstm_input(&self, task: Task) -> usize {
        if task.is_lm() {
            self.vocab
        } else {
            self.emb_dim
        }
    }

    pub fn output_classes(&self, task: Task) -> usize {
        if task.is_lm() {
            self.vocab
        } else {
            self.classes
        }
    }
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

/// One recurrent layer: 8 gate matrices, 4 biases, and the optional group
/// vectors.
#[derive(Debug, Clone)]
pub struct SparseLstm {
    input_dim: usize,
    hidden: usize,
    pub wx: [Param; 4],
    pub wh: [Param; 4],
    pub bias: [Param; 4],
    pub zx: Option<Param>,
    pub zh: Option<Param>,
    pub zg: [Option<Param>; 4],
}

impl SparseLstm {
    pub fn new(input_dim: usize, hidden: usize, variant: ModelVariant, task: Task) -> Self {
        let wvar = variant.weights_variational();
        let mat = |name: String, rows, cols| -> Param {
            let shape = Shape::Matrix { rows, cols };
            if wvar {
                Param::variational(name, shape, false)
            } else {
                Param::plain(name, shape)
            }
        };
        let gvec = |name: String, len| Param::variational(name, Shape::Vector { len }, true);

        let wx =
            std::array::from_fn(|g| mat(format!("lstm.wx.{}", GATE_NAMES[g]), hidden, input_dim));
        let wh = std::array::from_fn(|g| mat(format!("lstm.wh.{}", GATE_NAMES[g]), hidden, hidden));
        let bias = std::array::from_fn(|g| {
            Param::plain(
                format!("lstm.b.{}", GATE_NAMES[g]),
                Shape::Vector { len: hidden },
            )
        });

        let has_zx = variant.has_neuron_vars() && !task.is_lm();
        let zx = has_zx.then(|| gvec("lstm.zx".into(), input_dim));
        let zh = variant
            .has_neuron_vars()
            .then(|| gvec("lstm.zh".into(), hidden));
        let zg = std::array::from_fn(|g| {
            variant
                .has_gate_vars()
                .then(|| gvec(format!("lstm.z.{}", GATE_NAMES[g]), hidden))
        });

        SparseLstm {
            input_dim,
            hidden,
            wx,
            wh,
            bias,
            zx,
            zh,
            zg,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Run the cell over a sequence, recording everything the backward pass
    /// needs. `h0`/`c0` are usually zero unless carried LM state is supplied.
    pub fn forward(&self, x_seq: &[Vec<f64>], h0: &[f64], c0: &[f64]) -> Result<LstmTrace> {
        let d = self.input_dim;
        let h = self.hidden;
        if h0.len() != h || c0.len() != h {
            return Err(Error::Shape {
                op: "lstm_forward",
                detail: format!("state size {} vs hidden {}", h0.len(), h),
            });
        }
        let mut steps = Vec::with_capacity(x_seq.len());
        let mut h_seq = Vec::with_capacity(x_seq.len());
        let mut h_prev = h0.to_vec();
        let mut c_prev = c0.to_vec();

        for (t, x) in x_seq.iter().enumerate() {
            if x.len() != d {
                return Err(Error::Shape {
                    op: "lstm_forward",
                    detail: format!("input size {} vs expected {} at timestep {t}", x.len(), d),
                });
            }
            let x_masked = match &self.zx {
                Some(z) => mul_elem(x, z.realized()),
                None => x.clone(),
            };
            let h_masked = match &self.zh {
                Some(z) => mul_elem(&h_prev, z.realized()),
                None => h_prev.clone(),
            };

            let mut a: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; h]);
            let mut gates: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; h]);
            for g in 0..4 {
                matvec_acc(self.wx[g].realized(), h, d, &x_masked, &mut a[g]);
                matvec_acc(self.wh[g].realized(), h, h, &h_masked, &mut a[g]);
                let b = self.bias[g].realized();
                let zg = self.zg[g].as_ref().map(|z| z.realized());
                for j in 0..h {
                    let pre = match zg {
                        Some(z) => a[g][j] * z[j] + b[j],
                        None => a[g][j] + b[j],
                    };
                    gates[g][j] = if g == GATE_G {
                        pre.tanh()
                    } else {
                        sigmoid(pre)
                    };
                }
            }

            let mut c = vec![0.0; h];
            let mut tanh_c = vec![0.0; h];
            let mut h_t = vec![0.0; h];
            for j in 0..h {
                c[j] = gates[GATE_F][j] * c_prev[j] + gates[GATE_I][j] * gates[GATE_G][j];
                tanh_c[j] = c[j].tanh();
                h_t[j] = gates[GATE_O][j] * tanh_c[j];
            }
            if h_t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("lstm forward at timestep {t}"),
                });
            }

            steps.push(StepCache {
                x: x.clone(),
                x_masked,
                h_prev: h_prev.clone(),
                h_masked,
                a,
                gates,
                c_prev: c_prev.clone(),
                tanh_c,
            });
            h_prev = h_t.clone();
            c_prev = c.clone();
            h_seq.push(h_t);
        }

        Ok(LstmTrace {
            steps,
            h_seq,
            c_final: c_prev,
        })
    }

    /// Backpropagation through time. `grad_h_seq[t]` is the upstream
    /// gradient on `h_t`; gradients accumulate into every weight mean,
    /// log-sigma, bias, and group variable. Returns the gradients on the
    /// inputs (for the embedding layer).
    pub fn backward(
        &mut self,
        trace: &LstmTrace,
        grad_h_seq: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        let d = self.input_dim;
        let h = self.hidden;
        if grad_h_seq.len() != trace.steps.len() {
            return Err(Error::State(format!(
                "backward got {} upstream gradients for {} cached timesteps",
                grad_h_seq.len(),
                trace.steps.len()
            )));
        }

        let mut dx_seq = vec![vec![0.0; d]; trace.steps.len()];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];

        // Scratch reused across timesteps.
        let mut dpre: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; h]);
        let mut da = vec![0.0; h];
        let mut tmp = vec![0.0; h];

        for t in (0..trace.steps.len()).rev() {
            let step = &trace.steps[t];
            let up = &grad_h_seq[t];
            if up.len() != h {
                return Err(Error::Shape {
                    op: "lstm_backward",
                    detail: format!("upstream gradient size {} vs hidden {h}", up.len()),
                });
            }

            let gi = &step.gates[GATE_I];
            let gf = &step.gates[GATE_F];
            let gg = &step.gates[GATE_G];
            let go = &step.gates[GATE_O];

            for j in 0..h {
                let dh = up[j] + dh_next[j];
                let tc = step.tanh_c[j];
                let dc = dc_next[j] + dh * go[j] * (1.0 - tc * tc);
                let d_o = dh * tc;
                let d_i = dc * gg[j];
                let d_f = dc * step.c_prev[j];
                let d_g = dc * gi[j];
                dpre[GATE_I][j] = d_i * gi[j] * (1.0 - gi[j]);
                dpre[GATE_F][j] = d_f * gf[j] * (1.0 - gf[j]);
                dpre[GATE_G][j] = d_g * (1.0 - gg[j] * gg[j]);
                dpre[GATE_O][j] = d_o * go[j] * (1.0 - go[j]);
                dc_next[j] = dc * gf[j];
            }

            let mut dxm = vec![0.0; d];
            let mut dhm = vec![0.0; h];
            for g in 0..4 {
                // da = dpre * z^G; dz^G += dpre * a.
                match &self.zg[g] {
                    Some(z) => {
                        let zr = z.realized();
                        for j in 0..h {
                            da[j] = dpre[g][j] * zr[j];
                            tmp[j] = dpre[g][j] * step.a[g][j];
                        }
                    }
                    None => da.copy_from_slice(&dpre[g]),
                }
                if let Some(z) = self.zg[g].as_mut() {
                    z.accumulate_grad(&tmp);
                }
                self.bias[g].accumulate_grad(&dpre[g]);
                self.wx[g].accumulate_outer(&da, &step.x_masked);
                self.wh[g].accumulate_outer(&da, &step.h_masked);
                matvec_t_acc(self.wx[g].realized(), h, d, &da, &mut dxm);
                matvec_t_acc(self.wh[g].realized(), h, h, &da, &mut dhm);
            }

            match &mut self.zx {
                Some(z) => {
                    let mut dz = vec![0.0; d];
                    {
                        let zr = z.realized();
                        for k in 0..d {
                            dz[k] = dxm[k] * step.x[k];
                            dx_seq[t][k] = dxm[k] * zr[k];
                        }
                    }
                    z.accumulate_grad(&dz);
                }
                None => dx_seq[t].copy_from_slice(&dxm),
            }
            match &mut self.zh {
                Some(z) => {
                    let mut dz = vec![0.0; h];
                    {
                        let zr = z.realized();
                        for j in 0..h {
                            dz[j] = dhm[j] * step.h_prev[j];
                            dh_next[j] = dhm[j] * zr[j];
                        }
                    }
                    z.accumulate_grad(&dz);
                }
                None => dh_next.copy_from_slice(&dhm),
            }
        }
        Ok(dx_seq)
    }

    /// Dense matrices built from posterior means such that a plain LSTM on
    /// them reproduces this layer's deterministic forward:
    /// `w_hat^h_G[r][c] = mean(W^h_G)[r][c] * mean(z^h)[c] * mean(z^G)[r]`
    /// (with `z^x` in place of `z^h` for the input matrices).
    pub fn effective_weights(&self) -> EffectiveWeights {
        let h = self.hidden;
        let d = self.input_dim;
        let zx = self.zx.as_ref().map(|z| z.values());
        let zh = self.zh.as_ref().map(|z| z.values());
        let mut wx = Vec::with_capacity(4);
        let mut wh = Vec::with_capacity(4);
        for g in 0..4 {
            let zg = self.zg[g].as_ref().map(|z| z.values());
            let row_scale = |r: usize| zg.map_or(1.0, |z| z[r] as f64);
            let wxm = self.wx[g].values();
            wx.push(Array2::from_fn(h, d, |r, c| {
                let col = zx.map_or(1.0, |z| z[c] as f64);
                (wxm[r * d + c] as f64 * col * row_scale(r)) as f32
            }));
            let whm = self.wh[g].values();
            wh.push(Array2::from_fn(h, h, |r, c| {
                let col = zh.map_or(1.0, |z| z[c] as f64);
                (whm[r * h + c] as f64 * col * row_scale(r)) as f32
            }));
        }
        EffectiveWeights {
            wx: wx.try_into().unwrap(),
            wh: wh.try_into().unwrap(),
        }
    }
}

impl ParamSet for SparseLstm {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        for p in &self.wx {
            f(p);
        }
        for p in &self.wh {
            f(p);
        }
        for p in &self.bias {
            f(p);
        }
        if let Some(p) = &self.zx {
            f(p);
        }
        if let Some(p) = &self.zh {
            f(p);
        }
        for p in self.zg.iter().flatten() {
            f(p);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in &mut self.wx {
            f(p);
        }
        for p in &mut self.wh {
            f(p);
        }
        for p in &mut self.bias {
            f(p);
        }
        if let Some(p) = &mut self.zx {
            f(p);
        }
        if let Some(p) = &mut self.zh {
            f(p);
        }
        for p in self.zg.iter_mut().flatten() {
            f(p);
        }
    }
}

/// Per-gate effective (factorized) weight matrices.
pub struct EffectiveWeights {
    pub wx: [Array2; 4],
    pub wh: [Array2; 4],
}

/// Everything one timestep's backward pass needs.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub x_masked: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub h_masked: Vec<f64>,
    /// Pre-`z^G` gate products `W^x x_m + W^h h_m`.
    pub a: [Vec<f64>; 4],
    /// Activated gate values, order (i, f, g, o).
    pub gates: [Vec<f64>; 4],
    pub c_prev: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// Forward record of one sequence.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    pub steps: Vec<StepCache>,
    pub h_seq: Vec<Vec<f64>>,
    pub c_final: Vec<f64>,
}

impl LstmTrace {
    pub fn h_final(&self) -> Option<&[f64]> {
        self.h_seq.last().map(|h| h.as_slice())
    }
}

// ---------------------------------------------------------------------------
// Embedding and output layers
// ---------------------------------------------------------------------------

/// Token embedding with an optional per-vocabulary-entry multiplier.
#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    vocab: usize,
    dim: usize,
    pub table: Param,
    pub z_vocab: Option<Param>,
}

impl EmbeddingLayer {
    pub fn new(vocab: usize, dim: usize, variant: ModelVariant) -> Self {
        let shape = Shape::Matrix {
            rows: vocab,
            cols: dim,
        };
        let table = if variant.weights_variational() {
            Param::variational("embedding.table", shape, false)
        } else {
            Param::plain("embedding.table", shape)
        };
        let z_vocab = variant
            .has_neuron_vars()
            .then(|| Param::variational("embedding.z_vocab", Shape::Vector { len: vocab }, true));
        EmbeddingLayer {
            vocab,
            dim,
            table,
            z_vocab,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row lookup; with a vocabulary multiplier, row `v` is scaled by
    /// `z_vocab[v]`.
    pub fn forward(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
        let table = self.table.realized();
        let z = self.z_vocab.as_ref().map(|z| z.realized());
        ids.iter()
            .map(|&id| {
                let v = id as usize;
                if v >= self.vocab {
                    return Err(Error::Index {
                        what: "vocabulary id",
                        index: v,
                        size: self.vocab,
                    });
                }
                let row = &table[v * self.dim..(v + 1) * self.dim];
                let scale = z.map_or(1.0, |z| z[v]);
                Ok(row.iter().map(|&w| w * scale).collect())
            })
            .collect()
    }

    /// Gradients accumulate only into rows touched by `ids`.
    pub fn backward(&mut self, ids: &[u32], dx_seq: &[Vec<f64>]) {
        debug_assert_eq!(ids.len(), dx_seq.len());
        for (&id, dx) in ids.iter().zip(dx_seq) {
            let v = id as usize;
            let start = v * self.dim;
            match &mut self.z_vocab {
                Some(z) => {
                    let scale = z.realized()[v];
                    let row: Vec<f64> = self.table.realized()[start..start + self.dim].to_vec();
                    let drow: Vec<f64> = dx.iter().map(|&d| d * scale).collect();
                    let dz: f64 = dx.iter().zip(&row).map(|(&d, &w)| d * w).sum();
                    self.table.accumulate_range(start, &drow);
                    z.accumulate_range(v, &[dz]);
                }
                None => self.table.accumulate_range(start, dx),
            }
        }
    }
}

impl ParamSet for EmbeddingLayer {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.table);
        if let Some(z) = &self.z_vocab {
            f(z);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.table);
        if let Some(z) = &mut self.z_vocab {
            f(z);
        }
    }
}

/// Dense projection from the hidden state to logits.
#[derive(Debug, Clone)]
pub struct OutputLayer {
    classes: usize,
    hidden: usize,
    pub w: Param,
    pub b: Param,
}

impl OutputLayer {
    pub fn new(classes: usize, hidden: usize, variant: ModelVariant) -> Self {
        let shape = Shape::Matrix {
            rows: classes,
            cols: hidden,
        };
        let w = if variant.weights_variational() {
            Param::variational("output.w", shape, false)
        } else {
            Param::plain("output.w", shape)
        };
        let b = Param::plain("output.b", Shape::Vector { len: classes });
        OutputLayer {
            classes,
            hidden,
            w,
            b,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.hidden {
            return Err(Error::Shape {
                op: "output_forward",
                detail: format!("hidden size {} vs expected {}", h.len(), self.hidden),
            });
        }
        let mut logits = self.b.realized().to_vec();
        matvec_acc(self.w.realized(), self.classes, self.hidden, h, &mut logits);
        Ok(logits)
    }

    /// Accumulate weight/bias gradients and add the hidden-state gradient
    /// into `dh`.
    pub fn backward(&mut self, h: &[f64], dlogits: &[f64], dh: &mut [f64]) {
        self.w.accumulate_outer(dlogits, h);
        self.b.accumulate_grad(dlogits);
        matvec_t_acc(self.w.realized(), self.classes, self.hidden, dlogits, dh);
    }
}

impl ParamSet for OutputLayer {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.b);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

/// Embedding (classification only) + recurrent layer + output head.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: ModelVariant,
    pub task: Task,
    pub dims: ModelDims,
    pub embedding: Option<EmbeddingLayer>,
    pub cell: SparseLstm,
    pub output: OutputLayer,
}

/// Forward record for one token sequence.
pub struct Forward {
    pub tokens: Vec<u32>,
    pub x_seq: Vec<Vec<f64>>,
    pub lstm: LstmTrace,
    /// Per-timestep logits for LM; a single entry (last timestep) for
    /// classification.
    pub logits: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(variant: ModelVariant, task: Task, dims: ModelDims) -> Self {
        let embedding =
            (!task.is_lm()).then(|| EmbeddingLayer::new(dims.vocab, dims.emb_dim, variant));
        let cell = SparseLstm::new(dims.lstm_input(task), dims.hidden, variant, task);
        let output = OutputLayer::new(dims.output_classes(task), dims.hidden, variant);
        Model {
            variant,
            task,
            dims,
            embedding,
            cell,
            output,
        }
    }

    /// Encode tokens into LSTM inputs: embedding rows for classification,
    /// one-hot vectors for language modeling.
    fn encode(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        match &self.embedding {
            Some(emb) => emb.forward(tokens),
            None => tokens
                .iter()
                .map(|&id| {
                    let v = id as usize;
                    if v >= self.dims.vocab {
                        return Err(Error::Index {
                            what: "vocabulary id",
                            index: v,
                            size: self.dims.vocab,
                        });
                    }
                    let mut x = vec![0.0; self.dims.vocab];
                    x[v] = 1.0;
                    Ok(x)
                })
                .collect(),
        }
    }

    /// Forward one sequence from the given carried state (zeros if `None`).
    /// Uses whatever realization the last sampling event produced.
    pub fn forward(&self, tokens: &[u32], state: Option<(&[f64], &[f64])>) -> Result<Forward> {
        let h = self.dims.hidden;
        let zeros = vec![0.0; h];
        let (h0, c0) = state.unwrap_or((&zeros, &zeros));
        let x_seq = self.encode(tokens)?;
        let lstm = self.cell.forward(&x_seq, h0, c0)?;
        let logits = if self.task.is_lm() {
            lstm.h_seq
                .iter()
                .map(|ht| self.output.forward(ht))
                .collect::<Result<Vec<_>>>()?
        } else {
            match lstm.h_final() {
                Some(hf) => vec![self.output.forward(hf)?],
                None => return Err(Error::Data("classification sequence is empty".into())),
            }
        };
        Ok(Forward {
            tokens: tokens.to_vec(),
            x_seq,
            lstm,
            logits,
        })
    }

    /// Backward from per-logit gradients (same layout as `Forward::logits`).
    pub fn backward(&mut self, fwd: &Forward, dlogits: &[Vec<f64>]) -> Result<()> {
        if dlogits.len() != fwd.logits.len() {
            return Err(Error::State(format!(
                "got {} logit gradients for {} logit vectors",
                dlogits.len(),
                fwd.logits.len()
            )));
        }
        let t_len = fwd.lstm.steps.len();
        let h = self.dims.hidden;
        let mut grad_h_seq = vec![vec![0.0; h]; t_len];
        if self.task.is_lm() {
            for (t, dl) in dlogits.iter().enumerate() {
                self.output
                    .backward(&fwd.lstm.h_seq[t], dl, &mut grad_h_seq[t]);
            }
        } else {
            self.output.backward(
                fwd.lstm.h_final().expect("nonempty sequence"),
                &dlogits[0],
                &mut grad_h_seq[t_len - 1],
            );
        }
        let dx_seq = self.cell.backward(&fwd.lstm, &grad_h_seq)?;
        if let Some(emb) = &mut self.embedding {
            emb.backward(&fwd.tokens, &dx_seq);
        }
        Ok(())
    }

    /// Deterministic forward (posterior means, no noise) over a sequence.
    pub fn forward_deterministic(
        &mut self,
        tokens: &[u32],
        state: Option<(&[f64], &[f64])>,
    ) -> Result<Forward> {
        let mut rng = Rng::from_seed(0); // unused in deterministic mode
        self.draw_all(NoiseMode::Deterministic, &mut rng);
        self.forward(tokens, state)
    }
}

impl ParamSet for Model {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(emb) = &self.embedding {
            emb.for_each_param(f);
        }
        self.cell.for_each_param(f);
        self.output.for_each_param(f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(emb) = &mut self.embedding {
            emb.for_each_param_mut(f);
        }
        self.cell.for_each_param_mut(f);
        self.output.for_each_param_mut(f);
    }
}

// ---------------------------------------------------------------------------
// f64 slice helpers
// ---------------------------------------------------------------------------

fn mul_elem(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

/// `out[r] += sum_c w[r][c] * x[c]` for a row-major `rows x cols` matrix.
/// Zero input entries contribute nothing and are skipped, which makes
/// one-hot sequences cheap.
fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    let sparse = x.iter().filter(|&&v| v == 0.0).count() * 2 > cols;
    if sparse {
        for (c, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for r in 0..rows {
                out[r] += w[r * cols + c] * xv;
            }
        }
    } else {
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (c, &wv) in row.iter().enumerate() {
                acc += wv * x[c];
            }
            out[r] += acc;
        }
    }
}

/// `out[c] += sum_r w[r][c] * d[r]` (transpose application).
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, d: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(d.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        let dv = d[r];
        if dv == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (c, &wv) in row.iter().enumerate() {
            out[c] += wv * dv;
        }
    }
}
