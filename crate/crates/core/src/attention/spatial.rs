use rand::Rng;

use crate::attention::layers::{LayerNorm, Linear};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};

/// Linear spatial reduction of key maps: every key scale is pooled to
/// `P×P`, then passed through its own 1×1 projection, layer norm and GELU.
#[derive(Clone, Debug)]
pub struct SpatialReduction {
    pub pool: usize,
    pub proj: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
}

impl SpatialReduction {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        scales: usize,
        pool: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if pool == 0 {
            return Err(Error::config("pool_size", "must be positive"));
        }
        let mut proj = Vec::with_capacity(scales);
        let mut norms = Vec::with_capacity(scales);
        for j in 0..scales {
            proj.push(Linear::new(store, &format!("{name}.proj{j}"), channels, channels, true, rng)?);
            norms.push(LayerNorm::new(store, &format!("{name}.norm{j}"), channels)?);
        }
        Ok(SpatialReduction { pool, proj, norms })
    }

    pub fn scales(&self) -> usize {
        self.proj.len()
    }

    /// Key tokens `[scales·P², C]`, concatenated in input order.
    pub fn forward(&self, g: &mut Graph, keys: &[FeatureMap]) -> Result<Var> {
        if keys.len() != self.proj.len() {
            return Err(Error::config(
                "spatial_reduction",
                format!("{} key scales for {} projections", keys.len(), self.proj.len()),
            ));
        }
        let p = self.pool;
        let mut reduced = Vec::with_capacity(keys.len());
        for (j, key) in keys.iter().enumerate() {
            let c = key.channels;
            if c != self.proj[j].in_dim {
                return Err(Error::shape("spatial_reduce", format!("key scale {j} has {c} channels")));
            }
            let pooled = g.scoped("pool", |g| {
                let spatial = g.reshape(key.tokens, &[key.height, key.width, c])?;
                let pooled = g.adaptive_avg_pool2d(spatial, p, p)?;
                g.reshape(pooled, &[p * p, c])
            })?;
            let projected = g.scoped("proj", |g| self.proj[j].forward(g, pooled))?;
            let normed = g.scoped("norm", |g| self.norms[j].forward(g, projected))?;
            reduced.push(g.scoped("act", |g| g.gelu(normed))?);
        }
        if reduced.len() == 1 {
            Ok(reduced[0])
        } else {
            g.concat_rows(&reduced)
        }
    }
}

/// `Concat_j GELU(Norm_j(Pool(x_j) W_j))`.
pub fn spatial_reduce(g: &mut Graph, keys: &[FeatureMap], sr: &SpatialReduction) -> Result<Var> {
    sr.forward(g, keys)
}
