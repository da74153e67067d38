//! Item embeddings from a small from-scratch language model, trained in
//! three stages (next-item fine-tuning, masked next-token prediction under
//! bidirectional attention, item-level contrastive learning) and consumed by
//! SASRec / GRU4Rec through a linear adapter.

pub mod config;
pub mod container;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod recommender;
pub mod rng;
pub mod synthetic;
pub mod train;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
