//! Attention building blocks: multi-head attention, feed-forward layers,
//! spatial reduction of keys and the pooled-key block used by both the
//! intra-scale stages and the cross-scale fusing stages.

mod block;
mod ffn;
mod layers;
mod mha;
mod spatial;

pub use block::{block_attention_probs, fusing_layer, sra_block, AttentionBlock, BlockConfig};
pub use ffn::{feed_forward, FeedForward};
pub use layers::{LayerNorm, Linear, LAYER_NORM_EPS};
pub use mha::{multi_head_self_attention, AttentionConfig, AttentionTrace, MultiHeadAttention};
pub use spatial::{spatial_reduce, SpatialReduction};
