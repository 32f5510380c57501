//! Jagged and deduplicated tensor encodings.
//!
//! A [`JaggedTensor`] stores a batch of variable-length ID lists as one `values`
//! buffer plus per-row start `offsets`. A [`Kjt`] keys one jagged tensor per
//! feature. An [`Ikjt`] stores only the unique rows of a feature group and an
//! `inverse_lookup` slice mapping every batch row to its unique row, so
//! duplicated lists are held once. [`PartialIkjt`] goes further for a single
//! feature and lets rows that are shifts of each other share one buffer.

mod jagged;
mod keyed;
mod model;
mod partial;
pub mod wire;

pub use jagged::{jagged_index_select, JaggedTensor};
pub use keyed::{
    build_ikjt, build_kjt, ikjt_to_kjt, measured_dedupe_factor, Ikjt, Kjt,
};
pub use model::{DedupeModel, WORTH_IT_DEDUPE_FACTOR};
pub use partial::{build_partial_ikjt, PartialIkjt};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dedup group")]
    EmptyGroup,

    #[error("invalid offsets at position {position}: {reason}")]
    InvalidOffsets { position: usize, reason: String },

    #[error("index {index} at position {position} is out of range for {rows} rows")]
    IndexOutOfRange {
        position: usize,
        index: usize,
        rows: usize,
    },

    #[error("invalid inverse lookup: {0}")]
    InvalidInverseLookup(String),

    #[error("invalid partial window {window} ({offset}, {length}) for buffer of {buffer_len}")]
    InvalidWindow {
        window: usize,
        offset: usize,
        length: usize,
        buffer_len: usize,
    },

    #[error("feature {key:?} has {actual} rows, expected {expected}")]
    RowCountMismatch {
        key: String,
        expected: usize,
        actual: usize,
    },

    #[error("duplicate feature key {0:?}")]
    DuplicateKey(String),

    #[error("feature {0:?} missing from baseline tensor")]
    KeyMismatch(String),

    #[error("model parameter {name} = {value} out of range ({expected})")]
    InvalidModelParameter {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("malformed tensor stream: {0}")]
    Decode(String),
}
