use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, BlockConfig, LayerNorm, Linear};
use crate::autodiff::{init, Graph, ParamId, ParamStore};
use crate::backbone::{FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One normal Transformer stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    pub patch_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub mlp_ratio: usize,
    pub fusing_width: usize,
    pub fusing_depth: usize,
    pub fusing_heads: usize,
    pub fusing_mlp_ratio: usize,
    /// Pooled key grid side `P`.
    pub pool_size: usize,
    /// 1-based index of the first stage that gets a fusing stage.
    pub fuse_start_lvl: usize,
    /// Replace fusing stages by projection and norm only.
    pub no_fusion: bool,
    /// Append a stride-2 3×3 convolution of the last fused map.
    pub extra_scale: bool,
    /// Input pixels are mapped to `(x − pixel_mean) / pixel_std` before the
    /// first patch embedding.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

/// Pixel statistics of the synthetic toy images.
pub const PIXEL_MEAN: f64 = 0.26;
pub const PIXEL_STD: f64 = 0.22;

impl Default for PyramidConfig {
    fn default() -> Self {
        let stage = |channels, heads, patch_stride| StageConfig { depth: 1, channels, heads, patch_stride };
        PyramidConfig {
            image_size: 64,
            in_channels: 3,
            stages: vec![stage(16, 1, 4), stage(32, 2, 2), stage(64, 4, 2), stage(128, 8, 2)],
            mlp_ratio: 2,
            fusing_width: 32,
            fusing_depth: 2,
            fusing_heads: 1,
            fusing_mlp_ratio: 2,
            pool_size: 4,
            fuse_start_lvl: 4,
            no_fusion: false,
            extra_scale: false,
            pixel_mean: PIXEL_MEAN,
            pixel_std: PIXEL_STD,
        }
    }
}

impl PyramidConfig {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Number of fused outputs `S`.
    pub fn num_fused(&self) -> usize {
        self.num_stages() + 1 - self.fuse_start_lvl
    }

    /// Cumulative stride of every stage.
    pub fn strides(&self) -> Vec<usize> {
        self.stages
            .iter()
            .scan(1, |acc, s| {
                *acc *= s.patch_stride;
                Some(*acc)
            })
            .collect()
    }

    /// Grid side of every stage for a square input of `image_size`.
    pub fn grid_sizes(&self) -> Vec<usize> {
        self.stages
            .iter()
            .scan(self.image_size, |n, s| {
                *n = n.div_ceil(s.patch_stride);
                Some(*n)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("stages", "at least one stage required"));
        }
        if self.fuse_start_lvl < 1 || self.fuse_start_lvl > self.num_stages() {
            return Err(Error::config(
                "fuse_start_lvl",
                format!("{} outside 1..={}", self.fuse_start_lvl, self.num_stages()),
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !matches!(s.patch_stride, 2 | 4) {
                return Err(Error::config("patch_stride", format!("stage {} stride {} not in {{2, 4}}", i + 1, s.patch_stride)));
            }
            if i > 0 && s.patch_stride != 2 {
                return Err(Error::config("patch_stride", format!("stage {} must downsample by 2", i + 1)));
            }
            if s.depth == 0 || s.channels == 0 || s.heads == 0 || s.channels % s.heads != 0 {
                return Err(Error::config("stages", format!("stage {} has invalid depth/channels/heads", i + 1)));
            }
        }
        if self.fusing_width == 0 || self.fusing_heads == 0 || self.fusing_width % self.fusing_heads != 0 {
            return Err(Error::config("fusing_heads", "must divide fusing_width"));
        }
        if self.fusing_depth == 0 && !self.no_fusion {
            return Err(Error::config("fusing_depth", "must be positive"));
        }
        if self.pool_size == 0 || self.mlp_ratio == 0 || self.fusing_mlp_ratio == 0 || self.in_channels == 0 {
            return Err(Error::config("pool_size", "pool size, mlp ratios and input channels must be positive"));
        }
        let mut n = self.image_size;
        for (i, s) in self.stages.iter().enumerate() {
            if n < 2 * s.patch_stride - 1 {
                return Err(Error::config("image_size", format!("stage {} input {n} smaller than kernel", i + 1)));
            }
            n = n.div_ceil(s.patch_stride);
        }
        if !(self.pixel_std > 0.0 && self.pixel_std.is_finite() && self.pixel_mean.is_finite()) {
            return Err(Error::config("pixel_std", "pixel statistics must be finite with a positive std"));
        }
        if self.extra_scale && n < 2 {
            return Err(Error::config("extra_scale", "last map too small for a stride-2 convolution"));
        }
        Ok(())
    }
}

/// Overlapping patch embedding: convolution with kernel `2s−1`, padding
/// `s−1` and stride `s`, followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub stride: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k = 2 * stride - 1;
        let weight = store.add(format!("{name}.proj.weight"), init::orthogonal(k * k * in_channels, out_channels, rng))?;
        let bias = store.add(format!("{name}.proj.bias"), Tensor::zeros(&[out_channels]))?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), out_channels)?;
        Ok(PatchEmbed { stride, weight, bias, norm })
    }

    pub fn kernel(&self) -> usize {
        2 * self.stride - 1
    }

    /// `x` is a channels-last map `[H, W, Cin]` node.
    pub fn forward(&self, g: &mut Graph, x: crate::autodiff::Var, scale: usize, stride: usize) -> Result<FeatureMap> {
        let s = self.stride;
        match g.shape(x) {
            [h, w, _] if *h >= self.kernel() && *w >= self.kernel() => {}
            shape => {
                return Err(Error::shape(
                    "patch_embed",
                    format!("input {shape:?} smaller than kernel {}", self.kernel()),
                ))
            }
        }
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let y = g.scoped("conv", |g| g.conv2d(x, w, Some(b), 2 * s - 1, s, s - 1))?;
        let (oh, ow, c) = match g.shape(y) {
            [oh, ow, c] => (*oh, *ow, *c),
            _ => unreachable!("conv2d returns rank 3"),
        };
        let tokens = g.reshape(y, &[oh * ow, c])?;
        let tokens = g.scoped("norm", |g| self.norm.forward(g, tokens))?;
        FeatureMap::new(g, tokens, scale, stride, oh, ow)
    }
}

/// Patch-embeds `x` with the given module (free-function form).
pub fn patch_embed(g: &mut Graph, x: crate::autodiff::Var, embed: &PatchEmbed, scale: usize, stride: usize) -> Result<FeatureMap> {
    embed.forward(g, x, scale, stride)
}

#[derive(Clone, Debug)]
struct Stage {
    embed: PatchEmbed,
    blocks: Vec<AttentionBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct FusingStage {
    proj: Linear,
    blocks: Vec<AttentionBlock>,
    norm: LayerNorm,
}

/// Stride-2 3×3 convolution producing one coarser scale.
#[derive(Clone, Debug)]
pub struct ExtraScale {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ExtraScale {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init::orthogonal(9 * channels, channels, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]))?;
        Ok(ExtraScale { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: &FeatureMap) -> Result<FeatureMap> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let spatial = g.reshape(x.tokens, &[x.height, x.width, x.channels])?;
        let y = g.conv2d(spatial, w, Some(b), 3, 2, 1)?;
        let (oh, ow) = (g.shape(y)[0], g.shape(y)[1]);
        let tokens = g.reshape(y, &[oh * ow, x.channels])?;
        FeatureMap::new(g, tokens, x.scale + 1, x.stride * 2, oh, ow)
    }
}

/// The stride-64 map obtained from the last fused scale.
pub fn extra_scale(g: &mut Graph, last: &FeatureMap, conv: &ExtraScale) -> Result<FeatureMap> {
    conv.forward(g, last)
}

/// Output of a backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Normal-stage outputs `x₁..x_S_total`.
    pub raw: Vec<FeatureMap>,
    /// Fused outputs, stride-ascending, plus the extra scale when enabled.
    pub pyramid: FeaturePyramid,
}

/// Two-stream cross-scale backbone.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: PyramidConfig,
    stages: Vec<Stage>,
    fusing: Vec<FusingStage>,
    extra: Option<ExtraScale>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: PyramidConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut fusing = Vec::new();
        let mut in_c = cfg.in_channels;
        for (idx, sc) in cfg.stages.iter().enumerate() {
            let i = idx + 1;
            let embed = PatchEmbed::new(store, &format!("stage{i}.patch_embed"), in_c, sc.channels, sc.patch_stride, rng)?;
            let block_cfg = BlockConfig {
                channels: sc.channels,
                heads: sc.heads,
                mlp_ratio: cfg.mlp_ratio,
                pool: cfg.pool_size,
                key_scales: 1,
                normed_keys: false,
            };
            let blocks = (0..sc.depth)
                .map(|j| AttentionBlock::new(store, &format!("stage{i}.block{j}"), block_cfg.clone(), rng))
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(store, &format!("stage{i}.norm"), sc.channels)?;
            stages.push(Stage { embed, blocks, norm });
            in_c = sc.channels;

            if i >= cfg.fuse_start_lvl {
                let proj = Linear::new(store, &format!("fuse{i}.proj"), sc.channels, cfg.fusing_width, true, rng)?;
                let fuse_cfg = BlockConfig {
                    channels: cfg.fusing_width,
                    heads: cfg.fusing_heads,
                    mlp_ratio: cfg.fusing_mlp_ratio,
                    pool: cfg.pool_size,
                    key_scales: i - cfg.fuse_start_lvl + 1,
                    normed_keys: false,
                };
                let blocks = if cfg.no_fusion {
                    Vec::new()
                } else {
                    (0..cfg.fusing_depth)
                        .map(|j| AttentionBlock::new(store, &format!("fuse{i}.block{j}"), fuse_cfg.clone(), rng))
                        .collect::<Result<Vec<_>>>()?
                };
                let norm = LayerNorm::new(store, &format!("fuse{i}.norm"), cfg.fusing_width)?;
                fusing.push(FusingStage { proj, blocks, norm });
            }
        }
        let extra = if cfg.extra_scale { Some(ExtraScale::new(store, "extra", cfg.fusing_width, rng)?) } else { None };
        Ok(Backbone { cfg, stages, fusing, extra })
    }

    /// Runs both streams on a channels-last `[H, W, Cin]` image.
    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<BackboneOutput> {
        match image.shape() {
            [_, _, c] if *c == self.cfg.in_channels => {}
            s => return Err(Error::shape("backbone_forward", format!("image {s:?}, expected [H, W, {}]", self.cfg.in_channels))),
        }
        let (mean, std) = (self.cfg.pixel_mean, self.cfg.pixel_std);
        let mut pixels = image.clone();
        pixels.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / std);
        let mut x = g.constant(pixels)?;
        let mut raw = Vec::with_capacity(self.stages.len());
        let mut fused: Vec<FeatureMap> = Vec::new();
        let strides = self.cfg.strides();
        for (idx, stage) in self.stages.iter().enumerate() {
            let i = idx + 1;
            let label = format!("stage{i}");
            let xi = g.scoped(&label, |g| {
                let mut m = g.scoped("patch_embed", |g| stage.embed.forward(g, x, i, strides[idx]))?;
                for (j, blk) in stage.blocks.iter().enumerate() {
                    m = g.scoped(&format!("block{j}"), |g| blk.forward(g, &m, &[]))?;
                }
                let t = g.scoped("norm", |g| stage.norm.forward(g, m.tokens))?;
                m.with_tokens(g, t)
            })?;
            raw.push(xi);
            x = g.reshape(xi.tokens, &[xi.height, xi.width, xi.channels])?;

            if i >= self.cfg.fuse_start_lvl {
                let fs = &self.fusing[i - self.cfg.fuse_start_lvl];
                let q = g.scoped(&format!("fuse{i}"), |g| {
                    let t = g.scoped("proj", |g| fs.proj.forward(g, xi.tokens))?;
                    let mut q = FeatureMap::new(g, t, i, xi.stride, xi.height, xi.width)?;
                    for (j, blk) in fs.blocks.iter().enumerate() {
                        q = g.scoped(&format!("block{j}"), |g| blk.forward(g, &q, &fused))?;
                    }
                    let t = g.scoped("norm", |g| fs.norm.forward(g, q.tokens))?;
                    q.with_tokens(g, t)
                })?;
                // predecessors pass through untouched; keep stride order
                fused.push(q);
            }
        }
        if let Some(extra) = &self.extra {
            let last = *fused.last().expect("at least one fused scale");
            let m = g.scoped("extra", |g| extra.forward(g, &last))?;
            fused.push(m);
        }
        Ok(BackboneOutput { raw, pyramid: FeaturePyramid::new(fused)? })
    }
}

/// Full backbone pass (free-function form).
pub fn backbone_forward(g: &mut Graph, image: &Tensor, backbone: &Backbone) -> Result<BackboneOutput> {
    backbone.forward(g, image)
}
