//! Desk-scale lab for compressing a toy image-to-sequence document reader.
//!
//! The pieces, bottom to top:
//!
//! - [`autodiff`]: dense f64 tensors, a reverse-mode tape, and a mask-aware
//!   Adam optimizer.
//! - [`tokenizer`]: fixed character vocabulary plus special and field tokens.
//! - [`metrics`]: field trees, tree edit distance, N-TED accuracy, field F1.
//! - [`docgen`]: deterministic synthetic documents for a reading task and a
//!   key-value extraction task.
//! - [`model`]: a small patch-encoder / token-decoder transformer with an
//!   optional adapter bridging mismatched widths.
//! - [`checkpoint`]: the `DNTH` container for weights and sparsity masks.
//! - [`prune`]: global magnitude pruning into a [`prune::MaskSet`].
//! - [`distill`]: teacher→student training with the sparsity constraint held
//!   through every update.
//! - [`cka`]: linear-kernel centered kernel alignment over captured layer
//!   activations.
//! - [`pipeline`]: the CLI commands tying the experiment matrix together.

pub mod autodiff;
pub mod checkpoint;
pub mod cka;
pub mod distill;
pub mod docgen;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod tokenizer;

/// Crate-wide error type.
///
/// `Contract` covers violated preconditions and shape mismatches (CLI exit
/// code 1); `Io` and `Format` cover filesystem and file-format problems
/// (exit code 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("closure is not deterministic: two forward passes disagree ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },
    #[error("degenerate representation: constant rows make the similarity undefined")]
    DegenerateRepresentation,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

impl Error {
    /// Process exit code for the CLI: 1 for contract errors, 2 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

/// Stable 64-bit mix used everywhere a sub-seed is derived from a master
/// seed. Written out so the derivation never depends on std hash internals.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ master;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
