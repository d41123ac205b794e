use rand::Rng;

use crate::attention::layers::Linear;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Width and head split of an attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize) -> Result<Self> {
        if channels == 0 || heads == 0 || channels % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{heads} heads must evenly divide {channels} channels"),
            ));
        }
        Ok(AttentionConfig { channels, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// `1/√(C/heads)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Attention output plus the per-head probability matrices `[L_q, L_k]`.
pub struct AttentionTrace {
    pub output: Var,
    pub probs: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        Ok(MultiHeadAttention {
            cfg,
            q: Linear::new(store, &format!("{name}.q"), c, c, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), c, c, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), c, c, true, rng)?,
            out: Linear::new(store, &format!("{name}.proj"), c, c, true, rng)?,
        })
    }

    /// `q: [L_q, C]`, `k, v: [L_k, C]` → `[L_q, C]`.
    pub fn forward(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_traced(g, q, k, v)?.output)
    }

    pub fn forward_traced(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<AttentionTrace> {
        let c = self.cfg.channels;
        for (name, x) in [("query", q), ("key", k), ("value", v)] {
            match g.shape(x) {
                [l, cx] if *cx == c && *l > 0 => {}
                s => return Err(Error::shape("attention", format!("{name} tokens {s:?}, expected [L, {c}]"))),
            }
        }
        if g.shape(k)[0] != g.shape(v)[0] {
            return Err(Error::shape("attention", "key and value token counts differ"));
        }
        let scale = self.cfg.scale();
        let qp = g.scoped("q", |g| {
            let y = self.q.forward(g, q)?;
            g.scale(y, scale)
        })?;
        let kp = g.scoped("k", |g| self.k.forward(g, k))?;
        let vp = g.scoped("v", |g| self.v.forward(g, v))?;
        let d = self.cfg.head_dim();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut probs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (qh, kh, vh) = if self.cfg.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    g.slice_cols(qp, h * d, (h + 1) * d)?,
                    g.slice_cols(kp, h * d, (h + 1) * d)?,
                    g.slice_cols(vp, h * d, (h + 1) * d)?,
                )
            };
            let logits = g.scoped("score", |g| {
                let kt = g.transpose(kh)?;
                g.matmul(qh, kt)
            })?;
            let p = g.scoped("softmax", |g| g.softmax(logits, 1))?;
            let mixed = g.scoped("mix", |g| g.matmul(p, vh))?;
            heads.push(mixed);
            probs.push(p);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let output = g.scoped("out", |g| self.out.forward(g, merged))?;
        Ok(AttentionTrace { output, probs })
    }
}

/// Free-function form: `softmax(q W_q (k W_k)ᵀ / √d_h) v W_v`, heads concatenated then projected.
pub fn multi_head_self_attention(g: &mut Graph, q: Var, k: Var, v: Var, attn: &MultiHeadAttention) -> Result<Var> {
    attn.forward(g, q, k, v)
}
