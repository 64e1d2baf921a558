//! Model configuration, parameter storage and the full scoring forward pass.

mod config;
mod forward;
mod params;

pub use config::{InputVariant, ModelConfig};
pub use forward::{encode_corpus_vectors, forward_row, score_row, NewsCache, RowOutput};
pub use params::{xavier_bound, Additive, Category, Encoder, Gru, Layout, ModelParams, Pin, SelfAttention, TextEncoder};

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        topic_vocab_size: 4,
        subtopic_vocab_size: 5,
        dim: 8,
        encoder_heads: 2,
        channels: 2,
        topic_dim: 3,
        attention_dim: 4,
        detector_projection: false,
        variant: InputVariant::Act,
    }
}
