use rand::Rng;

use crate::attention::ffn::FeedForward;
use crate::attention::layers::LayerNorm;
use crate::attention::mha::{AttentionConfig, MultiHeadAttention};
use crate::attention::spatial::SpatialReduction;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};

/// Hyperparameters of a pre-norm attention block with pooled keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pool: usize,
    /// Total key scales seen by the block (predecessors + the block's own input).
    pub key_scales: usize,
    /// Feed the normalized query map to the key path instead of the raw map.
    pub normed_keys: bool,
}

/// Pre-norm block shared by intra-scale stages and fusing stages:
///
/// ```text
/// A  = x + Attn(Norm₁(x), SR(extra ∪ {x}), SR(extra ∪ {x}))
/// x* = A + FFN(Norm₂(A))
/// ```
///
/// With no extra keys this is the spatial-reduction self-attention block of
/// a normal stage; with previously fused maps as extra keys it is a fusing layer.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub cfg: BlockConfig,
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub sr: SpatialReduction,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        let attn_cfg = AttentionConfig::new(c, cfg.heads)?;
        Ok(AttentionBlock {
            cfg,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), attn_cfg, rng)?,
            sr: SpatialReduction::new(store, &format!("{name}.attn.sr"), c, cfg.key_scales, cfg.pool, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
            ffn: FeedForward::new(store, &format!("{name}.mlp"), c, cfg.mlp_ratio, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: &FeatureMap, extra_keys: &[FeatureMap]) -> Result<FeatureMap> {
        if x.channels != self.cfg.channels {
            return Err(Error::shape(
                "attention_block",
                format!("query has {} channels, block width is {}", x.channels, self.cfg.channels),
            ));
        }
        if let Some(k) = extra_keys.iter().find(|k| k.channels != self.cfg.channels) {
            return Err(Error::shape("attention_block", format!("key scale {} has {} channels", k.scale, k.channels)));
        }
        let normed = g.scoped("norm1", |g| self.norm1.forward(g, x.tokens))?;
        let own_key = if self.cfg.normed_keys { x.with_tokens(g, normed)? } else { *x };
        let mut keys: Vec<FeatureMap> = extra_keys.to_vec();
        keys.push(own_key);
        let kv = g.scoped("sr", |g| self.sr.forward(g, &keys))?;
        let attended = g.scoped("attn", |g| self.attn.forward(g, normed, kv, kv))?;
        let a = g.scoped("residual", |g| g.add(x.tokens, attended))?;
        let normed2 = g.scoped("norm2", |g| self.norm2.forward(g, a))?;
        let ff = g.scoped("ffn", |g| self.ffn.forward(g, normed2, Some(x.grid())))?;
        let out = g.scoped("residual", |g| g.add(a, ff))?;
        x.with_tokens(g, out)
    }
}

/// One fusing layer: the query scale `x_i` attends to the pooled union of
/// the previously fused maps and itself.
pub fn fusing_layer(g: &mut Graph, x_i: &FeatureMap, fused_prev: &[FeatureMap], block: &AttentionBlock) -> Result<FeatureMap> {
    block.forward(g, x_i, fused_prev)
}

/// One intra-scale block of a normal stage.
pub fn sra_block(g: &mut Graph, x: &FeatureMap, block: &AttentionBlock) -> Result<FeatureMap> {
    block.forward(g, x, &[])
}

/// Per-head attention probabilities of a block's query tokens over its
/// key tokens, each `[queries, keys]`.
pub fn block_attention_probs(g: &mut Graph, x: &FeatureMap, extra_keys: &[FeatureMap], block: &AttentionBlock) -> Result<Vec<Var>> {
    let normed = block.norm1.forward(g, x.tokens)?;
    let own_key = if block.cfg.normed_keys { x.with_tokens(g, normed)? } else { *x };
    let mut keys: Vec<FeatureMap> = extra_keys.to_vec();
    keys.push(own_key);
    let kv = block.sr.forward(g, &keys)?;
    Ok(block.attn.forward_traced(g, normed, kv, kv)?.probs)
}
