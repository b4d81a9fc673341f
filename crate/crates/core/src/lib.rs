//! KV-cache compression for a small decoder-only transformer.
//!
//! A context is encoded once into a per-layer key/value cache, a trained
//! scorer picks the token rows worth keeping, and a conditionally adapted
//! encoder packs information into those rows. The compressed cache is
//! distilled against the uncompressed one with a weighted mixture of forward
//! and reverse KL divergences, so that generation conditioned on the small
//! cache tracks generation conditioned on the full one. Training-free
//! heavy-hitter eviction is included as the comparison baseline.
//!
//! Crate layout follows the pipeline:
//!
//! * [`numerics`] — dense f32 tensors and a reverse-mode gradient tape
//! * [`config`] — model/architecture hyperparameters
//! * [`model`] — the transformer, KV caches, greedy decoding
//! * [`compressor`] — scorer, top-k selection, attention decay, adapters
//! * [`objective`] — forward/reverse KL distillation losses
//! * [`trainer`] — base-LM pretraining and adapter distillation
//! * [`baselines`] — heavy-hitter (H2) eviction, question-aware and not
//! * [`harness`] — synthetic corpora and retrieval/QA evaluation
//! * [`cachestore`] — binary cache files and training checkpoints

pub mod baselines;
pub mod cachestore;
pub mod compressor;
pub mod config;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod trainer;

pub use compressor::{AdapterSet, CompressedCache, SelectionPlan};
pub use config::{ModelConfig, RoutingMode};
pub use error::{KvdError, Result};
pub use model::{BaseParams, DecodeCache, KvCache};
pub use numerics::{Graph, NodeId, Tensor};
pub use trainer::{DistillExample, TrainConfig};
