//! Self-attention recommender with switchable causality, local attention
//! windows, optional user embeddings and a tied output head.
//!
//! Vocabulary layout: id 0 is padding, `1..=n_items` are items and
//! `n_items + 1` is the mask token. Rows are left-padded so the last position
//! always holds the most recent item.

mod config;
mod mask;
mod network;

pub use config::{Causality, ModelConfig};
pub use mask::{build_attention_mask, AttentionMask};
pub use network::{apply_sse, left_pad, AttentionRecord, Batch, Encoded, Model};
