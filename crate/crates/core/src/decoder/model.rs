use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::backbone::{FeatureMap, FeaturePyramid};
use crate::decoder::score::{validate_score_weights, Prediction};
use crate::error::{Error, Result};
use crate::losses::BBox;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub num_queries: usize,
    pub channels: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub num_classes: usize,
    /// Pyramid strides used as cross-attention memory; empty means the last scale only.
    pub memory_strides: Vec<usize>,
    /// Learned per-query reference points; enables the centerness branch.
    pub reference_points: bool,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 3,
            num_queries: 5,
            channels: 32,
            heads: 2,
            ffn_ratio: 4,
            num_classes: 2,
            memory_strides: Vec::new(),
            reference_points: false,
            alpha: 0.45,
            beta: 0.05,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layers", "must be positive"));
        }
        if self.num_queries == 0 {
            return Err(Error::config("num_queries", "must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::config("ffn_ratio", "must be positive"));
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::config("channels", "must be a positive multiple of 4 for the sine encoding"));
        }
        AttentionConfig::new(self.channels, self.heads)?;
        validate_score_weights(self.alpha, self.beta)
    }

    /// β actually used for scoring: 0 without reference points.
    pub fn effective_beta(&self) -> f64 {
        if self.reference_points {
            self.beta
        } else {
            0.0
        }
    }

    pub fn multi_scale(&self) -> bool {
        self.memory_strides.len() > 1
    }
}

/// Initial scale of the learned query content. Kept small so that the
/// first layers are driven by what the queries read from the memory.
pub const QUERY_CONTENT_STD: f64 = 0.02;

/// Learned object queries.
#[derive(Clone, Debug)]
pub struct ObjectQuerySet {
    pub num_queries: usize,
    pub embed: ParamId,
    pub pos: ParamId,
    /// Logits of the reference points; sigmoid gives points in the unit square.
    pub ref_logits: Option<ParamId>,
}

impl ObjectQuerySet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, n: usize, c: usize, refs: bool, rng: &mut R) -> Result<Self> {
        let embed = store.add(format!("{name}.query_embed"), Tensor::randn(&[n, c], QUERY_CONTENT_STD, rng))?;
        // with reference points the sine code of the point carries the position
        let pos_init = if refs { Tensor::zeros(&[n, c]) } else { Tensor::randn(&[n, c], 1.0, rng) };
        let pos = store.add(format!("{name}.query_pos"), pos_init)?;
        let ref_logits = if refs {
            // spread the initial points over the image
            Some(store.add(format!("{name}.ref_points"), Tensor::uniform(&[n, 2], -2.0, 2.0, rng))?)
        } else {
            None
        };
        Ok(ObjectQuerySet { num_queries: n, embed, pos, ref_logits })
    }

    /// Positional queries `[N, C]`: the learned embedding, plus the sine code
    /// of each reference point when present. The code is a constant, so
    /// reference points learn through the box centers only.
    pub fn positional(&self, g: &mut Graph) -> Result<Var> {
        let pos = g.param(self.pos)?;
        match self.ref_logits {
            Some(logits) => {
                let c = g.shape(pos)[1];
                let logits = g.param(logits)?;
                let points = g.sigmoid(logits)?;
                // sin(p @ freq + phase); cos columns carry a quarter-turn phase
                let (freq, phase) = sine_projection(c);
                let freq = g.constant(freq)?;
                let phase = g.constant(phase)?;
                let angles = g.matmul(points, freq)?;
                let angles = g.add_row(angles, phase)?;
                let code = g.sin(angles)?;
                g.add(pos, code)
            }
            None => Ok(pos),
        }
    }

    /// Reference points `[N, 2]` as plain values.
    pub fn reference_points(&self, store: &ParamStore) -> Option<Vec<(f64, f64)>> {
        self.ref_logits.map(|id| {
            store.get(id).value.data().chunks(2).map(|r| (sigmoid(r[0]), sigmoid(r[1]))).collect()
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::autodiff::kernels::sigmoid(x)
}

/// Pre-norm decoder layer: self-attention, cross-attention, FFN.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

/// Memory tokens and their positional encodings.
#[derive(Clone, Debug)]
pub struct Memory {
    pub tokens: Var,
    pub pos: Var,
    /// `(stride, token count)` of each scale, in memory order.
    pub layout: Vec<(usize, usize)>,
}

/// Result of one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerStep {
    pub output: Var,
    /// Per-head cross-attention probabilities `[N, L]`.
    pub cross_probs: Vec<Var>,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        let attn = AttentionConfig::new(c, cfg.heads)?;
        Ok(DecoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), attn, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
            cross_attn: {
                // keys start with the query projection, so positional codes
                // of queries and memory initially match by plain dot product
                let attn = MultiHeadAttention::new(store, &format!("{name}.cross_attn"), attn, rng)?;
                let w = store.get(attn.q.weight).value.clone();
                store.get_mut(attn.k.weight).value = w;
                attn
            },
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), c)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), c, cfg.ffn_ratio, false, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, y: Var, query_pos: Var, memory: &Memory) -> Result<LayerStep> {
        if g.shape(memory.tokens)[0] == 0 {
            return Err(Error::Invalid("empty decoder memory".into()));
        }
        let y = g.scoped("self_attn", |g| {
            let n = self.norm1.forward(g, y)?;
            let qk = g.add(n, query_pos)?;
            let a = self.self_attn.forward(g, qk, qk, n)?;
            g.add(y, a)
        })?;
        let (y, cross_probs) = g.scoped("cross_attn", |g| {
            let n = self.norm2.forward(g, y)?;
            let q = g.add(n, query_pos)?;
            let k = g.add(memory.tokens, memory.pos)?;
            let trace = self.cross_attn.forward_traced(g, q, k, memory.tokens)?;
            Ok((g.add(y, trace.output)?, trace.probs))
        })?;
        let y = g.scoped("ffn", |g| {
            let n = self.norm3.forward(g, y)?;
            let f = self.ffn.forward(g, n, None)?;
            g.add(y, f)
        })?;
        Ok(LayerStep { output: y, cross_probs })
    }
}

/// Single decoder layer (free-function form).
pub fn decoder_layer(g: &mut Graph, y: Var, query_pos: Var, memory: &Memory, layer: &DecoderLayer) -> Result<Var> {
    Ok(layer.forward(g, y, query_pos, memory)?.output)
}

/// Per-layer prediction heads.
#[derive(Clone, Debug)]
pub struct Heads {
    pub class: Linear,
    pub box_mlp: [Linear; 3],
    pub iou: Linear,
    pub ctr: Option<Linear>,
}

/// Bias giving an initial foreground probability of 0.01.
pub const CLASS_PRIOR_BIAS: f64 = -4.59511985013459;

impl Heads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        let class = Linear::new(store, &format!("{name}.class"), c, cfg.num_classes, true, rng)?;
        if let Some(b) = class.bias {
            store.get_mut(b).value = Tensor::full(&[cfg.num_classes], CLASS_PRIOR_BIAS);
        }
        let box_mlp = [
            Linear::new(store, &format!("{name}.box.fc0"), c, c, true, rng)?,
            Linear::new(store, &format!("{name}.box.fc1"), c, c, true, rng)?,
            Linear::new(store, &format!("{name}.box.fc2"), c, 4, true, rng)?,
        ];
        let iou = Linear::new(store, &format!("{name}.iou"), c, 1, true, rng)?;
        let ctr = if cfg.reference_points { Some(Linear::new(store, &format!("{name}.ctr"), c, 1, true, rng)?) } else { None };
        Ok(Heads { class, box_mlp, iou, ctr })
    }
}

/// Head outputs of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub hidden: Var,
    /// `[N, K]` class logits.
    pub logits: Var,
    /// `[N, 4]` boxes `(cx, cy, w, h)` after the sigmoid.
    pub boxes: Var,
    /// `[N, 1]` IoU logits.
    pub iou: Var,
    /// `[N, 1]` centerness logits.
    pub ctr: Option<Var>,
}

impl LayerOutput {
    pub fn prediction(&self, g: &Graph) -> Prediction {
        let probs = |v: Var| g.value(v).data().iter().map(|&z| sigmoid(z)).collect::<Vec<_>>();
        let k = g.shape(self.logits)[1];
        Prediction {
            class_probs: probs(self.logits).chunks(k).map(<[f64]>::to_vec).collect(),
            boxes: g.value(self.boxes).data().chunks(4).map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect(),
            iou: probs(self.iou),
            ctr: self.ctr.map(probs),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub layers: Vec<LayerOutput>,
    /// Per layer, per head cross-attention probabilities.
    pub cross_attention: Vec<Vec<Var>>,
    pub memory_layout: Vec<(usize, usize)>,
}

impl DecoderOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// DETR-style decoder with deep supervision heads.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub queries: ObjectQuerySet,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub heads: Vec<Heads>,
    pub level_embed: Option<ParamId>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let queries = ObjectQuerySet::new(store, "decoder", cfg.num_queries, c, cfg.reference_points, rng)?;
        let level_embed = if cfg.multi_scale() {
            Some(store.add("decoder.level_embed", Tensor::randn(&[cfg.memory_strides.len(), c], 1.0, rng))?)
        } else {
            None
        };
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(store, &format!("decoder.layer{l}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "decoder.norm", c)?;
        let heads = (0..cfg.layers).map(|l| Heads::new(store, &format!("head{l}"), &cfg, rng)).collect::<Result<Vec<_>>>()?;
        Ok(Decoder { cfg, queries, layers, norm, heads, level_embed })
    }

    /// Selects memory scales from the pyramid.
    pub fn select_scales<'p>(&self, pyramid: &'p FeaturePyramid) -> Result<Vec<&'p FeatureMap>> {
        if self.cfg.memory_strides.is_empty() {
            return Ok(vec![pyramid.last()]);
        }
        self.cfg
            .memory_strides
            .iter()
            .map(|&s| {
                pyramid.by_stride(s).ok_or_else(|| {
                    Error::config("memory_strides", format!("stride {s} not in pyramid {:?}", pyramid.strides()))
                })
            })
            .collect()
    }

    pub fn build_memory(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> Result<Memory> {
        let maps = self.select_scales(pyramid)?;
        let c = self.cfg.channels;
        if pyramid.channels() != c {
            return Err(Error::shape("decoder", format!("pyramid width {} vs decoder width {c}", pyramid.channels())));
        }
        let mut tokens = Vec::with_capacity(maps.len());
        let mut pos = Vec::with_capacity(maps.len());
        let mut layout = Vec::with_capacity(maps.len());
        for (l, m) in maps.iter().enumerate() {
            tokens.push(m.tokens);
            let mut p = g.constant(sine_encoding(m.height, m.width, c))?;
            if let Some(id) = self.level_embed {
                let table = g.param(id)?;
                let row = g.slice_rows(table, l, l + 1)?;
                let row = g.reshape(row, &[c])?;
                p = g.add_row(p, row)?;
            }
            pos.push(p);
            layout.push((m.stride, m.num_tokens()));
        }
        let (tokens, pos) = if maps.len() == 1 { (tokens[0], pos[0]) } else { (g.concat_rows(&tokens)?, g.concat_rows(&pos)?) };
        Ok(Memory { tokens, pos, layout })
    }

    fn apply_heads(&self, g: &mut Graph, heads: &Heads, y: Var) -> Result<LayerOutput> {
        let hidden = self.norm.forward(g, y)?;
        let logits = heads.class.forward(g, hidden)?;
        let mut h = hidden;
        for (i, fc) in heads.box_mlp.iter().enumerate() {
            h = fc.forward(g, h)?;
            if i < 2 {
                h = g.gelu(h)?;
            }
        }
        if let Some(id) = self.queries.ref_logits {
            // center = sigmoid(raw + logit(ref))
            let r = g.param(id)?;
            let center = g.slice_cols(h, 0, 2)?;
            let size = g.slice_cols(h, 2, 4)?;
            let center = g.add(center, r)?;
            h = g.concat_cols(&[center, size])?;
        }
        let boxes = g.sigmoid(h)?;
        let iou = heads.iou.forward(g, hidden)?;
        let ctr = heads.ctr.as_ref().map(|l| l.forward(g, hidden)).transpose()?;
        Ok(LayerOutput { hidden, logits, boxes, iou, ctr })
    }

    pub fn forward(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> Result<DecoderOutput> {
        g.scoped("decoder", |g| {
            let memory = g.scoped("memory", |g| self.build_memory(g, pyramid))?;
            let mut y = g.param(self.queries.embed)?;
            let query_pos = self.queries.positional(g)?;
            let mut layers = Vec::with_capacity(self.layers.len());
            let mut cross = Vec::with_capacity(self.layers.len());
            for (l, (layer, heads)) in self.layers.iter().zip(&self.heads).enumerate() {
                let step = g.scoped(&format!("layer{l}"), |g| layer.forward(g, y, query_pos, &memory))?;
                y = step.output;
                cross.push(step.cross_probs);
                layers.push(g.scoped(&format!("head{l}"), |g| self.apply_heads(g, heads, y))?);
            }
            Ok(DecoderOutput { layers, cross_attention: cross, memory_layout: memory.layout })
        })
    }
}

/// Decoder pass over a pyramid (free-function form).
pub fn decoder_forward(g: &mut Graph, pyramid: &FeaturePyramid, decoder: &Decoder) -> Result<DecoderOutput> {
    decoder.forward(g, pyramid)
}

/// Fixed 2-D sine encoding `[H·W, C]` of cell centers: the first half of
/// the channels encodes the row, the second half the column, as interleaved
/// sin/cos pairs over geometric frequencies.
pub fn sine_encoding(h: usize, w: usize, c: usize) -> Tensor {
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
            encode_point(&mut data[(y * w + x) * c..(y * w + x + 1) * c], py, px);
        }
    }
    Tensor::new(&[h * w, c], data).expect("sine encoding shape")
}

/// The same code for normalized `(x, y)` points, `[N, C]`.
pub fn sine_point_encoding(points: &[(f64, f64)], c: usize) -> Tensor {
    let mut data = vec![0.0; points.len() * c];
    for (row, &(x, y)) in data.chunks_mut(c).zip(points) {
        encode_point(row, y, x);
    }
    Tensor::new(&[points.len(), c], data).expect("sine encoding shape")
}

/// Periods across the unit interval of the lowest and highest frequency.
const SINE_PERIODS: (f64, f64) = (0.5, 3.0);

/// `[2, c]` frequencies and `[c]` phases such that
/// `sin([x, y] @ freq + phase)` equals `sine_point_encoding`.
fn sine_projection(c: usize) -> (Tensor, Tensor) {
    let mut freq = vec![0.0; 2 * c];
    let mut phase = vec![0.0; c];
    let half = c / 2;
    let pairs = half / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let (lo, hi) = SINE_PERIODS;
    // y fills the first half, x the second
    for (offset, coord_row) in [(0, 1), (half, 0)] {
        for i in 0..pairs {
            let t = if pairs > 1 { i as f64 / (pairs - 1) as f64 } else { 0.0 };
            let w = two_pi * lo * (hi / lo).powf(t);
            let j = offset + 2 * i;
            freq[coord_row * c + j] = w;
            freq[coord_row * c + j + 1] = w;
            phase[j + 1] = std::f64::consts::FRAC_PI_2;
        }
    }
    (
        Tensor::new(&[2, c], freq).expect("sine frequency shape"),
        Tensor::new(&[c], phase).expect("sine phase shape"),
    )
}

fn encode_point(row: &mut [f64], py: f64, px: f64) {
    let half = row.len() / 2;
    let pairs = half / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let (lo, hi) = SINE_PERIODS;
    for (offset, coord) in [(0, py), (half, px)] {
        for i in 0..pairs {
            // geometric ladder from lo to hi periods, so fine grids stay distinguishable
            let t = if pairs > 1 { i as f64 / (pairs - 1) as f64 } else { 0.0 };
            let periods = lo * (hi / lo).powf(t);
            let a = coord * two_pi * periods;
            row[offset + 2 * i] = a.sin();
            row[offset + 2 * i + 1] = a.cos();
        }
    }
}
