//! Minimal dense-array substrate.
//!
//! Exactly the operations the model layers need, each with an analytic
//! gradient defined elsewhere, plus a finite-difference verifier used as the
//! gradient oracle throughout the test suites.
//!
//! Array elements are 32-bit floats; reductions accumulate in 64-bit. All
//! operations are pure and single-threaded, so results are identical across
//! runs and platforms.

use crate::{Error, Result};
use rand_core::{RngCore, SeedableRng};

// ---------------------------------------------------------------------------
// Arrays
// ---------------------------------------------------------------------------

/// Dense row-major matrix of `f32`. Shape is fixed at creation.
#[derive(Debug, Clone, PartialEq)]
pub struct Array2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Array2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major element vector.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Array2::from_vec",
                detail: format!(
                    "{}x{} needs {} elements, got {}",
                    rows,
                    cols,
                    rows * cols,
                    data.len()
                ),
            });
        }
        Ok(Array2 { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Array2 { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Matrix product with 64-bit accumulation, single-threaded.
    ///
    /// `C[i][j] = sum_l A[i][l] * B[l][j]`, summed in index order so the
    /// result is bit-reproducible.
    pub fn matmul(&self, rhs: &Array2) -> Result<Array2> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{}x{} * {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            });
        }
        let mut out = Array2::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            for j in 0..rhs.cols {
                let mut acc = 0.0f64;
                for (l, &a) in lhs_row.iter().enumerate() {
                    acc += a as f64 * rhs.get(l, j) as f64;
                }
                out.set(i, j, acc as f32);
            }
        }
        Ok(out)
    }

    /// Matrix-vector product with 64-bit accumulation.
    pub fn matvec(&self, x: &Array1) -> Result<Array1> {
        if self.cols != x.len() {
            return Err(Error::Shape {
                op: "matvec",
                detail: format!("{}x{} * vec[{}]", self.rows, self.cols, x.len()),
            });
        }
        let mut out = Array1::zeros(self.rows);
        for r in 0..self.rows {
            let mut acc = 0.0f64;
            for (c, &w) in self.row(r).iter().enumerate() {
                acc += w as f64 * x[c] as f64;
            }
            out[r] = acc as f32;
        }
        Ok(out)
    }
}

/// Dense vector of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array1 {
    data: Vec<f32>,
}

impl Array1 {
    pub fn zeros(len: usize) -> Self {
        Array1 {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Array1 { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

impl std::ops::Index<usize> for Array1 {
    type Output = f32;
    fn index(&self, i: usize) -> &f32 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Array1 {
    fn index_mut(&mut self, i: usize) -> &mut f32 {
        &mut self.data[i]
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Largest `f32` strictly below 1; activations saturate here so sigmoid stays
/// in (0, 1) and tanh in (-1, 1) for every finite input.
const SAT: f32 = 1.0 - f32::EPSILON / 2.0;

/// Numerically stable logistic function on `f64`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic function given its output `s`.
pub fn dsigmoid(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Derivative of tanh given its output `t`.
pub fn dtanh(t: f64) -> f64 {
    1.0 - t * t
}

/// Elementwise activation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    /// Apply to a scalar in `f64`, without the `f32` saturation clamp.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Elementwise map on an `f32` array, saturating so outputs stay inside
    /// the open interval ((0,1) for sigmoid, (-1,1) for tanh).
    pub fn apply(self, x: &Array1) -> Array1 {
        let data = x.as_slice().iter().map(|&v| self.apply_scalar(v)).collect();
        Array1::from_vec(data)
    }

    pub fn apply_scalar(self, v: f32) -> f32 {
        match self {
            Activation::Sigmoid => {
                let y = sigmoid(v as f64) as f32;
                y.clamp(f32::MIN_POSITIVE, SAT)
            }
            Activation::Tanh => {
                let y = (v as f64).tanh() as f32;
                y.clamp(-SAT, SAT)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Softmax + negative log-likelihood of `target`, with the gradient w.r.t.
/// the logits. Log-sum-exp uses max subtraction.
pub fn softmax_cross_entropy(logits: &Array1, target: usize) -> Result<(f64, Array1)> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "softmax target class",
            index: target,
            size: logits.len(),
        });
    }
    let z: Vec<f64> = logits.as_slice().iter().map(|&v| v as f64).collect();
    let (loss, grad) = softmax_cross_entropy_f64(&z, target);
    let grad32 = Array1::from_vec(grad.iter().map(|&g| g as f32).collect());
    Ok((loss, grad32))
}

/// 64-bit core shared by the public op and the training loss path.
pub(crate) fn softmax_cross_entropy_f64(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    debug_assert!(target < logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for &z in logits {
        sum += (z - max).exp();
    }
    let log_z = max + sum.ln();
    let loss = log_z - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - log_z).exp()).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

/// Seedable, platform-independent random generator (ChaCha8 core).
///
/// Identical seeds give identical draw sequences; the full state round-trips
/// through checkpoints via [`RngState`].
#[derive(Debug, Clone)]
pub struct Rng {
    inner: rand_chacha::ChaCha8Rng,
}

/// Serializable snapshot of an [`Rng`].
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub algo: String,
    /// 32 seed bytes, hex encoded.
    pub seed: String,
    /// Stream position, decimal u128.
    pub word_pos: String,
}

impl Rng {
    pub const ALGO: &'static str = "chacha8";

    pub fn from_seed(seed: u64) -> Self {
        Rng {
            inner: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free modulo is fine here: n is tiny relative to 2^64.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw (Box-Muller, no cached spare so the state is
    /// exactly the ChaCha position).
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }

    pub fn state(&self) -> RngState {
        let seed = self.inner.get_seed();
        RngState {
            algo: Self::ALGO.to_string(),
            seed: hex_encode(&seed),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn restore(state: &RngState) -> Result<Self> {
        if state.algo != Self::ALGO {
            return Err(Error::Config(format!(
                "unknown rng algorithm {:?}",
                state.algo
            )));
        }
        let bytes =
            hex_decode(&state.seed).ok_or_else(|| Error::Config("bad rng seed encoding".into()))?;
        if bytes.len() != 32 {
            return Err(Error::Config("rng seed must be 32 bytes".into()));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes);
        let mut inner = rand_chacha::ChaCha8Rng::from_seed(seed);
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| Error::Config("bad rng word position".into()))?;
        inner.set_word_pos(pos);
        Ok(Rng { inner })
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok())
        .collect()
}

/// Vector of i.i.d. standard normal draws.
pub fn gaussian_vec(rng: &mut Rng, len: usize) -> Array1 {
    Array1::from_vec((0..len).map(|_| rng.normal() as f32).collect())
}

/// Matrix of i.i.d. standard normal draws, filled row-major.
pub fn gaussian_mat(rng: &mut Rng, rows: usize, cols: usize) -> Array2 {
    let data = (0..rows * cols).map(|_| rng.normal() as f32).collect();
    Array2 { rows, cols, data }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function of `theta`.
///
/// Each coordinate is perturbed by `±eps` in `f32`; the quotient divides by
/// the step actually realized after rounding, which is what makes checks at
/// tight tolerances meaningful on a 32-bit parameter grid.
pub fn finite_diff_gradient<F>(mut f: F, theta: &[f32], eps: f32) -> Result<Vec<f64>>
where
    F: FnMut(&[f32]) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let base = theta[i];
        let plus = base + eps;
        let minus = base - eps;

        work[i] = plus;
        let f_plus = f(&work)?;
        work[i] = minus;
        let f_minus = f(&work)?;
        work[i] = base;

        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite_diff_gradient at coordinate {i}"),
            });
        }
        let h = plus as f64 - minus as f64;
        grad.push((f_plus - f_minus) / h);
    }
    Ok(grad)
}

/// Largest elementwise relative error between two gradient vectors,
/// `|a-b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
