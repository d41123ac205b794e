//! Multi-head attention and a cross-scale fusing layer on random maps.
//!
//!     cargo run --release --example attention_ops

use d2etr::attention::{AttentionBlock, AttentionConfig, BlockConfig, MultiHeadAttention};
use d2etr::autodiff::{Graph, ParamStore};
use d2etr::backbone::FeatureMap;
use d2etr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> d2etr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();

    let mha = MultiHeadAttention::new(&mut store, "mha", AttentionConfig::new(16, 4)?, &mut rng)?;
    let mut g = Graph::new(&store);
    let q = g.constant(Tensor::randn(&[5, 16], 1.0, &mut rng))?;
    let kv = g.constant(Tensor::randn(&[12, 16], 1.0, &mut rng))?;
    let trace = mha.forward_traced(&mut g, q, kv, kv)?;
    println!("attention output {:?}, {} heads of {:?} probabilities", g.shape(trace.output), trace.probs.len(), g.shape(trace.probs[0]));
    let row: f64 = (0..12).map(|j| g.value(trace.probs[0]).at(&[0, j])).sum();
    println!("first probability row sums to {row:.12}");
    drop(g);

    // a fusing layer: the query map attends to itself and two finer predecessors,
    // each pooled to a 2x2 grid before the key projection
    let cfg = BlockConfig { channels: 16, heads: 1, mlp_ratio: 2, pool: 2, key_scales: 3, normed_keys: false };
    let block = AttentionBlock::new(&mut store, "fuse", cfg, &mut rng)?;
    let mut g = Graph::new(&store);
    let mut map = |scale: usize, side: usize, g: &mut Graph| {
        FeatureMap::constant(g, Tensor::randn(&[side, side, 16], 1.0, &mut rng), scale, 4 << scale)
    };
    let fine = map(1, 8, &mut g)?;
    let mid = map(2, 4, &mut g)?;
    let query = map(3, 2, &mut g)?;
    let out = block.forward(&mut g, &query, &[fine, mid])?;
    println!("fused map: {}x{} tokens of width {}", out.height, out.width, out.channels);
    Ok(())
}
