use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Linear;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::backbone::{Backbone, BackboneOutput, PyramidConfig};
use crate::decoder::{postprocess, Decoder, DecoderConfig, DecoderOutput, Detection};
use crate::error::{Error, Result};
use crate::losses::{criterion_targets, loss_token, set_criterion, LayerTargets, total_loss, CostWeights, LossTerms, LossValues, LossWeights, Targets};
use crate::tensor::Tensor;

/// Loss switches and weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub awr: f64,
    pub token: f64,
    pub match_cls: f64,
    pub match_l1: f64,
    pub match_giou: f64,
    /// IoU/centerness branches trained (the "aware" ablation switch).
    pub aware: bool,
    /// Token-labeling head and loss.
    pub token_labeling: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let c = CostWeights::default();
        LossConfig {
            cls: w.cls,
            l1: w.l1,
            giou: w.giou,
            awr: w.awr,
            token: w.token,
            match_cls: c.class,
            match_l1: c.l1,
            match_giou: c.giou,
            aware: true,
            token_labeling: true,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { cls: self.cls, l1: self.l1, giou: self.giou, awr: self.awr, token: self.token }
    }

    pub fn cost(&self) -> CostWeights {
        CostWeights { class: self.match_cls, l1: self.match_l1, giou: self.match_giou }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        for (name, v) in [("match_cls", self.match_cls), ("match_l1", self.match_l1), ("match_giou", self.match_giou)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub backbone: PyramidConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::vanilla()
    }
}

impl DetectorConfig {
    /// Single-scale memory from the stride-32 fused map.
    pub fn vanilla() -> Self {
        DetectorConfig { backbone: PyramidConfig::default(), decoder: DecoderConfig::default(), loss: LossConfig::default() }
    }

    /// All four scales fused, an extra stride-64 map, memory over strides
    /// 8..64 with level embeddings, and reference points.
    pub fn multi_scale() -> Self {
        let mut cfg = Self::vanilla();
        cfg.backbone.fuse_start_lvl = 1;
        cfg.backbone.extra_scale = true;
        cfg.decoder.memory_strides = vec![8, 16, 32, 64];
        cfg.decoder.reference_points = true;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        self.loss.validate()?;
        if self.decoder.channels != self.backbone.fusing_width {
            return Err(Error::config(
                "decoder.channels",
                format!("{} must equal backbone.fusing_width {}", self.decoder.channels, self.backbone.fusing_width),
            ));
        }
        let mut strides = self.backbone.strides()[self.backbone.fuse_start_lvl - 1..].to_vec();
        if self.backbone.extra_scale {
            strides.push(strides.last().unwrap() * 2);
        }
        if let Some(s) = self.decoder.memory_strides.iter().find(|s| !strides.contains(s)) {
            return Err(Error::config("decoder.memory_strides", format!("stride {s} not among fused strides {strides:?}")));
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub backbone: BackboneOutput,
    pub decoder: DecoderOutput,
}

/// Backbone, decoder and token-labeling head.
#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub backbone: Backbone,
    pub decoder: Decoder,
    pub token_head: Option<Linear>,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: DetectorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, cfg.backbone.clone(), rng)?;
        let decoder = Decoder::new(store, cfg.decoder.clone(), rng)?;
        let token_head = if cfg.loss.token_labeling {
            Some(Linear::new(store, "token_head", cfg.backbone.fusing_width, cfg.decoder.num_classes, true, rng)?)
        } else {
            None
        };
        Ok(Detector { cfg, backbone, decoder, token_head })
    }

    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<ForwardOutput> {
        let backbone = g.scoped("backbone", |g| self.backbone.forward(g, image))?;
        let decoder = self.decoder.forward(g, &backbone.pyramid)?;
        Ok(ForwardOutput { backbone, decoder })
    }

    /// Training loss of one image; the returned node is `L_total`.
    pub fn loss(&self, g: &mut Graph, image: &Tensor, targets: &Targets) -> Result<(Var, LossValues)> {
        self.loss_with(g, image, targets, None)
    }

    /// Matching and detached aware targets the loss would use at the
    /// current parameters.
    pub fn criterion_targets(&self, store: &ParamStore, image: &Tensor, targets: &Targets) -> Result<Vec<LayerTargets>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, image)?;
        let refs = self.decoder.queries.reference_points(store);
        criterion_targets(&g, &out.decoder, targets, refs.as_deref(), self.cfg.loss.cost())
    }

    /// [`Detector::loss`] with optionally frozen criterion targets.
    pub fn loss_with(
        &self,
        g: &mut Graph,
        image: &Tensor,
        targets: &Targets,
        frozen: Option<&[LayerTargets]>,
    ) -> Result<(Var, LossValues)> {
        let out = self.forward(g, image)?;
        let refs = self.decoder.queries.reference_points(g.store());
        let lc = &self.cfg.loss;
        let weights = lc.weights();
        let (cls, bbox, awr) = g.scoped("criterion", |g| {
            set_criterion(g, &out.decoder, targets, refs.as_deref(), &weights, lc.cost(), lc.aware, frozen)
        })?;
        let token = match &self.token_head {
            Some(head) => g.scoped("token_head", |g| loss_token(g, head, out.backbone.pyramid.maps(), targets))?,
            None => g.constant(Tensor::scalar(0.0))?,
        };
        total_loss(g, &LossTerms { cls, bbox, awr, token }, &weights)
    }

    /// Ranked detections from the last decoder layer, in pixels.
    pub fn detect(&self, store: &ParamStore, image: &Tensor, top_k: usize) -> Result<Vec<Detection>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, image)?;
        let pred = out.decoder.last().prediction(&g);
        let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
        postprocess(&pred, self.cfg.decoder.alpha, self.cfg.decoder.effective_beta(), top_k, (w, h))
    }
}
