//! Bayesian sparsification of LSTM networks.
//!
//! Training puts a fully factorized normal posterior over every weight (and
//! optionally over multiplicative group variables attached to input neurons,
//! hidden neurons, and gate preactivations), optimizes the evidence lower
//! bound against a log-uniform prior, and prunes everything whose posterior
//! signal-to-noise ratio falls below a threshold. Pruned group variables make
//! whole gates constant, which the inference engine exploits by skipping
//! their matrix rows entirely.
//!
//! Module map:
//! - [`numerics`]: minimal dense-array substrate plus a finite-difference
//!   gradient verifier.
//! - [`variational`]: posterior parameters, log-uniform KL, SNR, prune masks.
//! - [`sparse_lstm`]: the group-variable LSTM layer with embedding and output
//!   heads, forward and analytic backward passes.
//! - [`training`]: ELBO assembly, Adam, gradient clipping, the train loop.
//! - [`compression`]: pruning, structural analysis, checkpoints, reports.
//! - [`inference`]: compiled forward pass that skips constant gates.
//! - [`data`]: corpora, vocabularies, batching, synthetic tasks.

pub mod compression;
pub mod data;
pub mod inference;
pub mod numerics;
pub mod sparse_lstm;
pub mod training;
pub mod variational;

mod fmt;

pub use fmt::format_sig6;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An index (class label, token id, ...) is out of range.
    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Forward/backward state mismatch (e.g. stale caches).
    #[error("state error: {0}")]
    State(String),

    /// Bad or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion problem.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint and data disagree on model dimensions.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Malformed checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distinct failure modes when reading a checkpoint file.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected \"SVDL\")")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("manifest/payload disagreement: {0}")]
    ManifestMismatch(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("checkpoint is not pruned")]
    NotPruned,
}

pub type Result<T> = std::result::Result<T, Error>;
