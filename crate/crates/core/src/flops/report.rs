use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionBlock, BlockConfig};
use crate::autodiff::{Graph, ParamStore, Tape};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::flops::formula::{eval_formula, Bindings, ComplexityFormula};
use crate::flops::FlopCounter;
use crate::tensor::Tensor;

/// Shapes held fixed while `S` varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalingBase {
    /// Last (query) map size.
    pub h: usize,
    pub w: usize,
    pub pool: usize,
    pub channels: usize,
    pub heads: usize,
}

impl Default for ScalingBase {
    fn default() -> Self {
        ScalingBase { h: 2, w: 2, pool: 4, channels: 32, heads: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingReportRow {
    pub s: usize,
    pub counted_ceca: u64,
    pub formula_ceca: f64,
    pub formula_dense: f64,
    pub ratio: f64,
}

/// Counts one fusing layer whose query is an `h×w` map and whose `S − 1`
/// predecessors have the given sizes (finest first).
pub fn count_fusing_layer(base: &ScalingBase, predecessor_sizes: &[(usize, usize)]) -> Result<FlopCounter> {
    let s = predecessor_sizes.len() + 1;
    let cfg = BlockConfig {
        channels: base.channels,
        heads: base.heads,
        mlp_ratio: 1,
        pool: base.pool,
        key_scales: s,
        normed_keys: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "fuse", cfg, &mut rng)?;
    let mut g = Graph::with_tape(&store, Tape::with_flop_counter());
    let mut keys = Vec::with_capacity(s - 1);
    for (k, &(h, w)) in predecessor_sizes.iter().enumerate() {
        let t = Tensor::randn(&[h, w, base.channels], 1.0, &mut rng);
        keys.push(FeatureMap::constant(&mut g, t, k + 1, 4 << k)?);
    }
    let q = Tensor::randn(&[base.h, base.w, base.channels], 1.0, &mut rng);
    let query = FeatureMap::constant(&mut g, q, s, 4 << (s - 1))?;
    g.scoped("fuse", |g| block.forward(g, &query, &keys))?;
    Ok(g.into_tape().take_flops().expect("counting tape"))
}

/// Cost of the key-dependent part of a fusing layer: per-scale projection,
/// norm and activation of the pooled keys, key/value projections, scores,
/// softmax and value mixing. Query-only projections and the pooling
/// reduction itself are excluded.
pub fn counted_ceca(counter: &FlopCounter, prefix: &str) -> u64 {
    let sr = format!("{prefix}.sr");
    let attn = format!("{prefix}.attn");
    ["proj", "norm", "act"].iter().map(|l| counter.total_leaf(&sr, l)).sum::<u64>()
        + ["k", "v", "score", "softmax", "mix"].iter().map(|l| counter.total_leaf(&attn, l)).sum::<u64>()
}

/// One row per `S`, with predecessors shaped like a real pyramid (each
/// finer scale doubles both sides).
pub fn scaling_report(base: &ScalingBase, s_range: std::ops::RangeInclusive<usize>) -> Result<Vec<ScalingReportRow>> {
    if *s_range.start() < 1 || *s_range.end() > 6 {
        return Err(Error::Invalid(format!("S range {s_range:?} outside 1..=6")));
    }
    let mut rows = Vec::new();
    for s in s_range {
        let preds: Vec<(usize, usize)> =
            (0..s - 1).map(|k| (base.h << (s - 1 - k), base.w << (s - 1 - k))).collect();
        let counter = count_fusing_layer(base, &preds)?;
        let b = Bindings::new()
            .set("h", base.h as f64)
            .set("w", base.w as f64)
            .set("P", base.pool as f64)
            .set("C", base.channels as f64)
            .set("S", s as f64);
        let formula_ceca = eval_formula(ComplexityFormula::Ceca, &b)?;
        let formula_dense = eval_formula(ComplexityFormula::DenseFusion, &b)?;
        rows.push(ScalingReportRow {
            s,
            counted_ceca: counted_ceca(&counter, "fuse"),
            formula_ceca,
            formula_dense,
            ratio: formula_dense / formula_ceca,
        });
    }
    Ok(rows)
}

pub fn scaling_csv(rows: &[ScalingReportRow]) -> String {
    let mut out = String::from("S,counted_ceca,formula_ceca,formula_dense,ratio\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.s, r.counted_ceca, r.formula_ceca, r.formula_dense, r.ratio));
    }
    out
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}
