//! Session-aware feature deduplication for recommendation-model training pipelines.
//!
//! The crate covers the whole path a sparse feature takes from log to trainer:
//!
//! * [`datagen`] synthesizes session-centric impression logs and shards them.
//! * [`storage`] writes them into a striped, compressed columnar file, optionally
//!   clustered by session.
//! * [`reader`] fills, converts and preprocesses batches into jagged tensors, either
//!   as plain keyed jagged tensors or deduplicated inverse-keyed ones.
//! * [`trainer_sim`] runs the forward sparse path of one training iteration over
//!   simulated ranks, with byte and compute accounting for both encodings.
//! * [`characterize`] measures how much duplication a dataset actually contains.
//!
//! [`tensors`] holds the encodings themselves and the analytical dedupe model.

pub mod characterize;
pub mod datagen;
pub mod reader;
pub mod storage;
pub mod tensors;
pub mod trainer_sim;

pub use datagen::ImpressionRecord;
pub use tensors::{Ikjt, JaggedTensor, Kjt, PartialIkjt, TensorError};
