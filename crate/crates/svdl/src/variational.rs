//! Variational parameter objects.
//!
//! Every sparsified tensor carries a fully factorized normal posterior
//! `N(m, sigma^2)` per element, trained against a log-uniform prior. The KL
//! divergence uses the standard cubic-sigmoid closed-form approximation for
//! that prior; pruning is by posterior signal-to-noise ratio `m^2 / sigma^2`.
//!
//! Parameters store their values in `f32` (the element type of record) and
//! do all arithmetic, including gradient accumulation, in `f64`.

use crate::numerics::{sigmoid, Rng};
use serde::{Deserialize, Serialize};

/// Log-uniform KL approximation constants.
const KL_K1: f64 = 0.63576;
const KL_K2: f64 = 1.87320;
const KL_K3: f64 = 1.48695;

/// `log alpha` is clamped to this symmetric range before evaluating the KL,
/// which also covers the `m = 0` case without a division fault.
pub const LOG_ALPHA_CLAMP: f64 = 20.0;

/// Initial `log sigma` for every variational tensor.
pub const INIT_LOG_SIGMA: f32 = -3.0;

/// Logical tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Matrix { rows: usize, cols: usize },
    Vector { len: usize },
}

impl Shape {
    pub fn count(&self) -> usize {
        match *self {
            Shape::Matrix { rows, cols } => rows * cols,
            Shape::Vector { len } => len,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Matrix { rows, cols } => vec![rows, cols],
            Shape::Vector { len } => vec![len],
        }
    }
}

/// Whether a forward pass draws posterior noise or uses the means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Reparameterized draw `m + sigma * eps`, one `eps` per sampling event.
    Sampled,
    /// Use the posterior means exactly; no randomness consumed.
    Deterministic,
}

/// One tensor with a factorized normal posterior.
///
/// `group = true` marks multiplicative z-variables (neuron, vocabulary, and
/// gate-preactivation multipliers) as opposed to individual weights.
#[derive(Debug, Clone)]
pub struct VariationalParam {
    name: String,
    shape: Shape,
    group: bool,
    mean: Vec<f32>,
    log_sigma: Vec<f32>,
    /// Noise of the last sampling event; empty in deterministic mode.
    noise: Vec<f64>,
    /// Cached realization `m + sigma * eps` (or `m`).
    realized: Vec<f64>,
    /// Cached `exp(log_sigma)`, maintained by `refresh` while noise is live
    /// (gradient accumulation is on the hot path and must not recompute it).
    sigma: Vec<f64>,
    grad_mean: Vec<f64>,
    grad_log_sigma: Vec<f64>,
}

impl VariationalParam {
    /// New posterior with `log sigma = -3` everywhere. Group variables start
    /// at the multiplicative identity (mean 1), weights at mean 0.
    pub fn new(name: impl Into<String>, shape: Shape, group: bool) -> Self {
        let n = shape.count();
        VariationalParam {
            name: name.into(),
            shape,
            group,
            mean: vec![if group { 1.0 } else { 0.0 }; n],
            log_sigma: vec![INIT_LOG_SIGMA; n],
            noise: Vec::new(),
            realized: vec![0.0; n],
            sigma: Vec::new(),
            grad_mean: vec![0.0; n],
            grad_log_sigma: vec![0.0; n],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn is_group(&self) -> bool {
        self.group
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn mean_mut(&mut self) -> &mut [f32] {
        &mut self.mean
    }

    pub fn log_sigma(&self) -> &[f32] {
        &self.log_sigma
    }

    pub fn log_sigma_mut(&mut self) -> &mut [f32] {
        &mut self.log_sigma
    }

    /// Draw (or clear) the noise for one sampling event and refresh the
    /// cached realization.
    pub fn draw(&mut self, mode: NoiseMode, rng: &mut Rng) {
        match mode {
            NoiseMode::Sampled => {
                self.noise.resize(self.mean.len(), 0.0);
                rng.fill_normal(&mut self.noise);
            }
            NoiseMode::Deterministic => self.noise.clear(),
        }
        self.refresh();
    }

    /// Recompute `realized` (and the sigma cache) from the current means,
    /// log-sigmas, and stored noise. Call after mutating parameters under
    /// fixed noise.
    pub fn refresh(&mut self) {
        if self.noise.is_empty() {
            self.sigma.clear();
            for (r, &m) in self.realized.iter_mut().zip(&self.mean) {
                *r = m as f64;
            }
        } else {
            self.sigma.resize(self.mean.len(), 0.0);
            for i in 0..self.mean.len() {
                let sigma = (self.log_sigma[i] as f64).exp();
                self.sigma[i] = sigma;
                self.realized[i] = self.mean[i] as f64 + sigma * self.noise[i];
            }
        }
    }

    /// The realization of the last sampling event.
    pub fn realized(&self) -> &[f64] {
        &self.realized
    }

    /// One reparameterized sample (draw + realize in one step).
    pub fn sample(&mut self, mode: NoiseMode, rng: &mut Rng) -> &[f64] {
        self.draw(mode, rng);
        self.realized()
    }

    /// Gradient of the realization w.r.t. mean and log-sigma: for
    /// `a = m + exp(L) * eps`, `d/dm = da` and `d/dL = da * eps * sigma`.
    pub fn accumulate_grad(&mut self, upstream: &[f64]) {
        debug_assert_eq!(upstream.len(), self.mean.len());
        if self.noise.is_empty() {
            for (g, &d) in self.grad_mean.iter_mut().zip(upstream) {
                *g += d;
            }
        } else {
            for i in 0..self.mean.len() {
                self.grad_mean[i] += upstream[i];
                self.grad_log_sigma[i] += upstream[i] * self.noise[i] * self.sigma[i];
            }
        }
    }

    /// Rank-1 update for matrix params: `grad[r][c] += dout[r] * input[c]`,
    /// with the reparameterization term for log-sigma. Zero inputs (one-hot
    /// sequences) are skipped.
    pub fn accumulate_outer(&mut self, dout: &[f64], input: &[f64]) {
        let cols = input.len();
        debug_assert_eq!(dout.len() * cols, self.mean.len());
        let sampled = !self.noise.is_empty();
        for (r, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let base = r * cols;
            for (c, &x) in input.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let i = base + c;
                let da = d * x;
                self.grad_mean[i] += da;
                if sampled {
                    self.grad_log_sigma[i] += da * self.noise[i] * self.sigma[i];
                }
            }
        }
    }

    /// Accumulate into a contiguous range (one embedding row, say).
    pub fn accumulate_range(&mut self, start: usize, upstream: &[f64]) {
        debug_assert!(start + upstream.len() <= self.mean.len());
        let sampled = !self.noise.is_empty();
        for (k, &d) in upstream.iter().enumerate() {
            let i = start + k;
            self.grad_mean[i] += d;
            if sampled {
                self.grad_log_sigma[i] += d * self.noise[i] * self.sigma[i];
            }
        }
    }

    /// Total KL from the posterior to the log-uniform prior, summed over
    /// elements.
    pub fn kl(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.mean.len() {
            total += kl_term(log_alpha(self.mean[i] as f64, self.log_sigma[i] as f64));
        }
        total
    }

    /// Accumulate `scale * dKL/d(mean, log sigma)` into the gradients.
    /// The clamp makes the KL constant outside the `log alpha` range, so
    /// those elements contribute zero gradient.
    pub fn add_kl_grad(&mut self, scale: f64) {
        for i in 0..self.mean.len() {
            let m = self.mean[i] as f64;
            let l = self.log_sigma[i] as f64;
            let raw = raw_log_alpha(m, l);
            if raw.abs() >= LOG_ALPHA_CLAMP {
                continue;
            }
            let d_u = kl_term_du(raw);
            // u = 2L - ln(m^2): du/dL = 2, du/dm = -2/m.
            self.grad_log_sigma[i] += scale * d_u * 2.0;
            self.grad_mean[i] += scale * d_u * (-2.0 / m);
        }
    }

    /// Elementwise signal-to-noise ratio `m^2 / sigma^2`.
    pub fn snr(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_sigma)
            .map(|(&m, &l)| {
                let m = m as f64;
                m * m * (-2.0 * l as f64).exp()
            })
            .collect()
    }

    /// Keep-mask at threshold `tau`: true iff `snr >= tau` (ties kept).
    pub fn prune_mask(&self, tau: f64) -> Vec<bool> {
        self.snr().into_iter().map(|s| s >= tau).collect()
    }

    pub fn grad_mean(&self) -> &[f64] {
        &self.grad_mean
    }

    pub fn grad_log_sigma(&self) -> &[f64] {
        &self.grad_log_sigma
    }

    pub fn zero_grad(&mut self) {
        self.grad_mean.iter_mut().for_each(|g| *g = 0.0);
        self.grad_log_sigma.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale_grads(&mut self, factor: f64) {
        self.grad_mean.iter_mut().for_each(|g| *g *= factor);
        self.grad_log_sigma.iter_mut().for_each(|g| *g *= factor);
    }
}

/// A deterministic (non-Bayesian) tensor: biases always, and every weight in
/// the baseline variant.
#[derive(Debug, Clone)]
pub struct PlainParam {
    name: String,
    shape: Shape,
    value: Vec<f32>,
    realized: Vec<f64>,
    grad: Vec<f64>,
}

impl PlainParam {
    pub fn new(name: impl Into<String>, shape: Shape) -> Self {
        let n = shape.count();
        PlainParam {
            name: name.into(),
            shape,
            value: vec![0.0; n],
            realized: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn value(&self) -> &[f32] {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut [f32] {
        &mut self.value
    }

    pub fn refresh(&mut self) {
        for (r, &v) in self.realized.iter_mut().zip(&self.value) {
            *r = v as f64;
        }
    }

    pub fn realized(&self) -> &[f64] {
        &self.realized
    }

    pub fn accumulate_grad(&mut self, upstream: &[f64]) {
        for (g, &d) in self.grad.iter_mut().zip(upstream) {
            *g += d;
        }
    }

    pub fn accumulate_outer(&mut self, dout: &[f64], input: &[f64]) {
        let cols = input.len();
        debug_assert_eq!(dout.len() * cols, self.value.len());
        for (r, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let base = r * cols;
            for (c, &x) in input.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                self.grad[base + c] += d * x;
            }
        }
    }

    pub fn accumulate_range(&mut self, start: usize, upstream: &[f64]) {
        for (k, &d) in upstream.iter().enumerate() {
            self.grad[start + k] += d;
        }
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale_grads(&mut self, factor: f64) {
        self.grad.iter_mut().for_each(|g| *g *= factor);
    }
}

/// Either kind of trainable tensor.
#[derive(Debug, Clone)]
pub enum Param {
    Plain(PlainParam),
    Variational(VariationalParam),
}

impl Param {
    pub fn plain(name: impl Into<String>, shape: Shape) -> Self {
        Param::Plain(PlainParam::new(name, shape))
    }

    pub fn variational(name: impl Into<String>, shape: Shape, group: bool) -> Self {
        Param::Variational(VariationalParam::new(name, shape, group))
    }

    pub fn name(&self) -> &str {
        match self {
            Param::Plain(p) => p.name(),
            Param::Variational(p) => p.name(),
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            Param::Plain(p) => p.shape(),
            Param::Variational(p) => p.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, Param::Variational(_))
    }

    pub fn as_variational(&self) -> Option<&VariationalParam> {
        match self {
            Param::Variational(p) => Some(p),
            Param::Plain(_) => None,
        }
    }

    pub fn as_variational_mut(&mut self) -> Option<&mut VariationalParam> {
        match self {
            Param::Variational(p) => Some(p),
            Param::Plain(_) => None,
        }
    }

    /// Current deterministic values: means for variational, values for plain.
    pub fn values(&self) -> &[f32] {
        match self {
            Param::Plain(p) => p.value(),
            Param::Variational(p) => p.mean(),
        }
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        match self {
            Param::Plain(p) => p.value_mut(),
            Param::Variational(p) => p.mean_mut(),
        }
    }

    pub fn draw(&mut self, mode: NoiseMode, rng: &mut Rng) {
        match self {
            Param::Plain(p) => p.refresh(),
            Param::Variational(p) => p.draw(mode, rng),
        }
    }

    pub fn refresh(&mut self) {
        match self {
            Param::Plain(p) => p.refresh(),
            Param::Variational(p) => p.refresh(),
        }
    }

    pub fn realized(&self) -> &[f64] {
        match self {
            Param::Plain(p) => p.realized(),
            Param::Variational(p) => p.realized(),
        }
    }

    pub fn accumulate_grad(&mut self, upstream: &[f64]) {
        match self {
            Param::Plain(p) => p.accumulate_grad(upstream),
            Param::Variational(p) => p.accumulate_grad(upstream),
        }
    }

    pub fn accumulate_outer(&mut self, dout: &[f64], input: &[f64]) {
        match self {
            Param::Plain(p) => p.accumulate_outer(dout, input),
            Param::Variational(p) => p.accumulate_outer(dout, input),
        }
    }

    pub fn accumulate_range(&mut self, start: usize, upstream: &[f64]) {
        match self {
            Param::Plain(p) => p.accumulate_range(start, upstream),
            Param::Variational(p) => p.accumulate_range(start, upstream),
        }
    }

    pub fn kl(&self) -> f64 {
        match self {
            Param::Plain(_) => 0.0,
            Param::Variational(p) => p.kl(),
        }
    }

    pub fn add_kl_grad(&mut self, scale: f64) {
        if let Param::Variational(p) = self {
            p.add_kl_grad(scale);
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            Param::Plain(p) => p.zero_grad(),
            Param::Variational(p) => p.zero_grad(),
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        match self {
            Param::Plain(p) => p.scale_grads(factor),
            Param::Variational(p) => p.scale_grads(factor),
        }
    }

    /// Number of trainable arrays (1 for plain, 2 for variational).
    pub fn n_arrays(&self) -> usize {
        match self {
            Param::Plain(_) => 1,
            Param::Variational(_) => 2,
        }
    }

    /// Mutable view of trainable array `k` with its gradient, for the
    /// optimizer. `k = 0` is the value/mean, `k = 1` the log-sigma.
    pub fn array_mut(&mut self, k: usize) -> (&mut [f32], &[f64]) {
        match self {
            Param::Plain(p) => {
                assert_eq!(k, 0);
                (&mut p.value, &p.grad)
            }
            Param::Variational(p) => match k {
                0 => (&mut p.mean, &p.grad_mean),
                1 => (&mut p.log_sigma, &p.grad_log_sigma),
                _ => panic!("variational param has 2 arrays"),
            },
        }
    }

    /// Gradient of trainable array `k`.
    pub fn grad(&self, k: usize) -> &[f64] {
        match self {
            Param::Plain(p) => {
                assert_eq!(k, 0);
                p.grad()
            }
            Param::Variational(p) => match k {
                0 => p.grad_mean(),
                1 => p.grad_log_sigma(),
                _ => panic!("variational param has 2 arrays"),
            },
        }
    }
}

/// Anything that owns an ordered collection of [`Param`]s.
///
/// Visit order is fixed per implementor, which pins the noise-draw sequence,
/// the optimizer slot layout, and the flattened-parameter layout used by the
/// finite-difference checks.
pub trait ParamSet {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// One sampling event for every parameter.
    fn draw_all(&mut self, mode: NoiseMode, rng: &mut Rng) {
        self.for_each_param_mut(&mut |p| p.draw(mode, rng));
    }

    /// Recompute realizations after parameter mutation under fixed noise.
    fn refresh_all(&mut self) {
        self.for_each_param_mut(&mut |p| p.refresh());
    }

    fn zero_grads(&mut self) {
        self.for_each_param_mut(&mut |p| p.zero_grad());
    }

    /// Sum of KL terms over every variational parameter.
    fn kl_total(&self) -> f64 {
        let mut total = 0.0;
        self.for_each_param(&mut |p| total += p.kl());
        total
    }

    fn add_kl_grads(&mut self, scale: f64) {
        self.for_each_param_mut(&mut |p| p.add_kl_grad(scale));
    }

    /// All trainable scalars (values/means then log-sigmas per parameter)
    /// concatenated in visit order.
    fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::new();
        self.for_each_param(&mut |p| {
            out.extend_from_slice(p.values());
            if let Some(v) = p.as_variational() {
                out.extend_from_slice(v.log_sigma());
            }
        });
        out
    }

    fn set_flat_params(&mut self, flat: &[f32]) {
        let mut cursor = 0;
        self.for_each_param_mut(&mut |p| {
            for k in 0..p.n_arrays() {
                let (vals, _) = p.array_mut(k);
                vals.copy_from_slice(&flat[cursor..cursor + vals.len()]);
                cursor += vals.len();
            }
        });
        assert_eq!(cursor, flat.len(), "flat parameter vector length mismatch");
    }

    /// Gradients in the same layout as [`ParamSet::flat_params`].
    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_param(&mut |p| {
            match p {
                Param::Plain(q) => out.extend_from_slice(q.grad()),
                Param::Variational(q) => {
                    out.extend_from_slice(q.grad_mean());
                    out.extend_from_slice(q.grad_log_sigma());
                }
            };
        });
        out
    }

    /// Names of each flattened block, for gradient-check diagnostics.
    fn flat_layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |p| {
            out.push((format!("{}.mean", p.name()), p.len()));
            if p.is_variational() {
                out.push((format!("{}.log_sigma", p.name()), p.len()));
            }
        });
        out
    }
}

// ---------------------------------------------------------------------------
// Log-uniform KL closed form
// ---------------------------------------------------------------------------

fn raw_log_alpha(m: f64, l: f64) -> f64 {
    let m2 = m * m;
    if m2 == 0.0 {
        f64::INFINITY
    } else {
        2.0 * l - m2.ln()
    }
}

fn log_alpha(m: f64, l: f64) -> f64 {
    raw_log_alpha(m, l).clamp(-LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP)
}

/// KL contribution of one element as a function of (clamped) `log alpha`:
/// `0.5 * ln(1 + 1/alpha) + k1 - k1 * sigmoid(k2 + k3 * log alpha)`.
pub fn kl_term(log_alpha: f64) -> f64 {
    let u = log_alpha.clamp(-LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP);
    0.5 * (-u).exp().ln_1p() + KL_K1 - KL_K1 * sigmoid(KL_K2 + KL_K3 * u)
}

/// d(kl_term)/d(log alpha), valid strictly inside the clamp range.
fn kl_term_du(u: f64) -> f64 {
    let s = sigmoid(KL_K2 + KL_K3 * u);
    -0.5 * sigmoid(-u) - KL_K1 * KL_K3 * s * (1.0 - s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, max_rel_error, Rng};
    use proptest::prelude::*;

    fn scalar_param(m: f32, l: f32) -> VariationalParam {
        let mut p = VariationalParam::new("p", Shape::Vector { len: 1 }, false);
        p.mean_mut()[0] = m;
        p.log_sigma_mut()[0] = l;
        p
    }

    #[test]
    fn init_log_sigma_is_minus_three() {
        let p = VariationalParam::new("w", Shape::Matrix { rows: 3, cols: 2 }, false);
        assert!(p.log_sigma().iter().all(|&l| l == -3.0));
    }

    #[test]
    fn sample_with_tiny_sigma_is_mean() {
        let mut p = scalar_param(1.25, -30.0);
        let mut rng = Rng::from_seed(0);
        let draw = p.sample(NoiseMode::Sampled, &mut rng)[0];
        assert!((draw - 1.25).abs() < 1e-6);
    }

    #[test]
    fn deterministic_sample_is_exactly_mean() {
        let mut p = scalar_param(0.75, 0.0);
        let mut rng = Rng::from_seed(0);
        let draw = p.sample(NoiseMode::Deterministic, &mut rng)[0];
        assert_eq!(draw, 0.75);
        // Idempotent and rng-independent.
        let again = p.sample(NoiseMode::Deterministic, &mut Rng::from_seed(77))[0];
        assert_eq!(again, 0.75);
    }

    #[test]
    fn sample_moments() {
        let mut p = scalar_param(2.0, 0.0);
        let mut rng = Rng::from_seed(21);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let x = p.sample(NoiseMode::Sampled, &mut rng)[0];
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
        assert!((std - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn kl_vanishes_at_upper_clamp() {
        assert!(kl_term(LOG_ALPHA_CLAMP).abs() < 1e-3);
    }

    #[test]
    fn kl_monotone_decreasing_and_nonnegative_on_grid() {
        let n = 20_000;
        let mut prev = f64::INFINITY;
        for k in 0..=n {
            let u = -LOG_ALPHA_CLAMP + 2.0 * LOG_ALPHA_CLAMP * k as f64 / n as f64;
            let v = kl_term(u);
            assert!(v <= prev + 1e-12, "not decreasing at log alpha {u}");
            assert!(v >= -1e-3, "below tolerance at log alpha {u}: {v}");
            prev = v;
        }
    }

    #[test]
    fn kl_handles_zero_mean() {
        let p = scalar_param(0.0, -1.0);
        // alpha -> infinity clamps; the KL there is ~0 and nothing faults.
        assert!(p.kl().abs() < 1e-3);
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        // Away from the clamp boundary.
        for &(m, l) in &[(0.5f32, -1.0f32), (1.5, -3.0), (-0.8, 0.5), (0.2, -2.0)] {
            let fd = finite_diff_gradient(
                |theta| {
                    let p = scalar_param(theta[0], theta[1]);
                    Ok(p.kl())
                },
                &[m, l],
                1e-4,
            )
            .unwrap();
            let mut p = scalar_param(m, l);
            p.add_kl_grad(1.0);
            let analytic = [p.grad_mean()[0], p.grad_log_sigma()[0]];
            assert!(
                max_rel_error(&analytic, &fd, 1e-8) < 1e-3,
                "m={m} l={l}: analytic {analytic:?} fd {fd:?}"
            );
        }
    }

    #[test]
    fn snr_values() {
        let mut p = VariationalParam::new("p", Shape::Vector { len: 3 }, false);
        p.mean_mut().copy_from_slice(&[0.0, 1.0, 0.5]);
        p.log_sigma_mut().copy_from_slice(&[-1.0, 0.0, -3.0]);
        let snr = p.snr();
        assert_eq!(snr[0], 0.0);
        assert!((snr[1] - 1.0).abs() < 1e-9);
        assert!((snr[2] - 0.25 * 6.0f64.exp()).abs() < 1e-4); // ~100.86
    }

    #[test]
    fn prune_mask_boundary_keeps_tie() {
        // snr = m^2 e^{-2L}; choose L so snr hits 0.04 / 0.05 / 0.06 exactly
        // enough for the comparison.
        let mut p = VariationalParam::new("p", Shape::Vector { len: 3 }, true);
        for (i, target) in [0.04f64, 0.05, 0.06].iter().enumerate() {
            p.mean_mut()[i] = 1.0;
            // snr = e^{-2L} = target -> L = -ln(target)/2
            p.log_sigma_mut()[i] = (-(target.ln()) / 2.0) as f32;
        }
        // f32 rounding of L moves snr slightly; force the middle one to be
        // an exact tie by comparing against its own snr.
        let snr = p.snr();
        let mask = p.prune_mask(snr[1]);
        assert_eq!(mask, vec![false, true, true]);
    }

    #[test]
    fn prune_mask_zero_tau_keeps_all() {
        let mut p = VariationalParam::new("p", Shape::Vector { len: 8 }, false);
        let mut rng = Rng::from_seed(5);
        for v in p.mean_mut() {
            *v = rng.normal() as f32;
        }
        assert!(p.prune_mask(0.0).iter().all(|&k| k));
    }

    #[test]
    fn prune_mask_matches_brute_force_recount() {
        let mut p = VariationalParam::new("p", Shape::Vector { len: 100 }, false);
        let mut rng = Rng::from_seed(9);
        for v in p.mean_mut() {
            *v = rng.normal() as f32;
        }
        for l in p.log_sigma_mut() {
            *l = rng.uniform_range(-4.0, 1.0) as f32;
        }
        let tau = 0.05;
        let kept = p.prune_mask(tau).iter().filter(|&&k| k).count();
        let mut recount = 0;
        for i in 0..p.len() {
            let m = p.mean()[i] as f64;
            let s2 = (2.0 * p.log_sigma()[i] as f64).exp();
            if m * m / s2 >= tau {
                recount += 1;
            }
        }
        assert_eq!(kept, recount);
    }

    proptest! {
        #[test]
        fn prune_mask_monotone_in_tau(
            seed in 0u64..1000,
            tau_lo in 0.0f64..1.0,
            bump in 0.0f64..5.0,
        ) {
            let mut p = VariationalParam::new("p", Shape::Vector { len: 32 }, false);
            let mut rng = crate::numerics::Rng::from_seed(seed);
            for v in p.mean_mut() { *v = rng.normal() as f32; }
            for l in p.log_sigma_mut() { *l = rng.uniform_range(-4.0, 1.0) as f32; }
            let tau_hi = tau_lo + bump;
            let keep_hi = p.prune_mask(tau_hi);
            let keep_lo = p.prune_mask(tau_lo);
            // Kept set at the higher threshold is a subset of the lower one.
            for i in 0..32 {
                prop_assert!(!keep_hi[i] || keep_lo[i]);
            }
        }

        #[test]
        fn kl_grad_is_zero_in_clamped_region(l in -30.0f32..-21.0) {
            // log alpha = 2L - ln(m^2) with m = 1 -> 2L < -40, well clamped.
            let mut p = scalar_param(1.0, l);
            p.add_kl_grad(1.0);
            prop_assert_eq!(p.grad_mean()[0], 0.0);
            prop_assert_eq!(p.grad_log_sigma()[0], 0.0);
        }
    }
}
