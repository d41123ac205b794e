use crate::attention::Linear;
use crate::autodiff::{kernels, Graph, Tape, Var};
use crate::backbone::FeatureMap;
use crate::decoder::{compute_centerness, DecoderOutput, LayerOutput};
use crate::error::{Error, Result};
use crate::losses::boxes::{iou, BBox};
use crate::losses::matching::{hungarian_match, matching_cost, CostWeights, MatchAssignment};
use crate::tensor::Tensor;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
/// Probability clamp inside the focal loss.
pub const FOCAL_EPS: f64 = 1e-6;

/// Soft-target focal loss `−α·|t−p|^γ·[t ln p + (1−t) ln(1−p)]`, `p` clamped to `[ε, 1−ε]`.
pub fn focal_loss(p: f64, t: f64, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    -alpha * (t - p).abs().powf(gamma) * (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Binary cross-entropy of probability `p` against soft target `t`.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub awr: f64,
    pub token: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 2.0, l1: 5.0, giou: 2.0, awr: 1.0, token: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cls", self.cls), ("l1", self.l1), ("giou", self.giou), ("awr", self.awr), ("token", self.token)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("loss weight must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Ground truth of one image. Masks are channels-last `[H, W, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    pub masks: Option<Tensor>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Matches one decoder layer's predictions to the targets.
pub fn match_layer(g: &Graph, layer: &LayerOutput, targets: &Targets, weights: CostWeights) -> Result<MatchAssignment> {
    let n = g.shape(layer.logits)[0];
    if targets.is_empty() {
        return Ok(MatchAssignment { pairs: Vec::new(), num_queries: n });
    }
    let pred = layer.prediction(g);
    let probs = Tensor::new(&[n, pred.class_probs[0].len()], pred.class_probs.concat())?;
    let cost = matching_cost(&probs, &pred.boxes, &targets.boxes, &targets.classes, weights)?;
    hungarian_match(&cost)
}

/// Differentiable GIoU of predicted `[B, 4]` boxes against constant targets; returns `[B, 1]`.
pub fn giou_rows(g: &mut Tape, pred: Var, target: &[BBox]) -> Result<Var> {
    let b = target.len();
    if g.shape(pred) != [b, 4] {
        return Err(Error::shape("giou", format!("{:?} predictions for {b} targets", g.shape(pred))));
    }
    let col = |g: &mut Tape, i: usize| g.slice_cols(pred, i, i + 1);
    let (cx, cy, w, h) = (col(g, 0)?, col(g, 1)?, col(g, 2)?, col(g, 3)?);
    let hw = g.scale(w, 0.5)?;
    let hh = g.scale(h, 0.5)?;
    let px1 = g.sub(cx, hw)?;
    let px2 = g.add(cx, hw)?;
    let py1 = g.sub(cy, hh)?;
    let py2 = g.add(cy, hh)?;
    let corner = |g: &mut Tape, i: usize| g.constant(Tensor::new(&[b, 1], target.iter().map(|t| t.corners()[i]).collect())?);
    let (tx1, ty1, tx2, ty2) = (corner(g, 0)?, corner(g, 1)?, corner(g, 2)?, corner(g, 3)?);
    let zero = g.constant(Tensor::zeros(&[b, 1]))?;

    let extent = |g: &mut Tape, lo_a: Var, lo_b: Var, hi_a: Var, hi_b: Var, inner: bool| -> Result<Var> {
        let (lo, hi) = if inner {
            (g.maximum(lo_a, lo_b)?, g.minimum(hi_a, hi_b)?)
        } else {
            (g.minimum(lo_a, lo_b)?, g.maximum(hi_a, hi_b)?)
        };
        g.sub(hi, lo)
    };
    let iw = extent(g, px1, tx1, px2, tx2, true)?;
    let iw = g.maximum(iw, zero)?;
    let ih = extent(g, py1, ty1, py2, ty2, true)?;
    let ih = g.maximum(ih, zero)?;
    let inter = g.mul(iw, ih)?;
    let area_p = g.mul(w, h)?;
    let area_t = g.constant(Tensor::new(&[b, 1], target.iter().map(BBox::area).collect())?)?;
    let sum_areas = g.add(area_p, area_t)?;
    let union = g.sub(sum_areas, inter)?;
    let iou = g.div(inter, union)?;
    let hw_ = extent(g, px1, tx1, px2, tx2, false)?;
    let hh_ = extent(g, py1, ty1, py2, ty2, false)?;
    let hull = g.mul(hw_, hh_)?;
    let gap = g.sub(hull, union)?;
    let frac = g.div(gap, hull)?;
    g.sub(iou, frac)
}

/// Classification and box terms of one layer.
///
/// `L_cls` is the focal sum over all `N·K` logits divided by `max(B, 1)`;
/// `L_bbox` is the mean over matched pairs of `λ_L1·‖b̂−b‖₁ + λ_giou·(1−GIoU)`.
pub fn loss_cls_bbox(
    g: &mut Graph,
    layer: &LayerOutput,
    targets: &Targets,
    matching: &MatchAssignment,
    weights: &LossWeights,
) -> Result<(Var, Var)> {
    let (n, k) = (g.shape(layer.logits)[0], g.shape(layer.logits)[1]);
    let b = targets.len();
    let mut cls_t = Tensor::zeros(&[n, k]);
    for &(q, t) in &matching.pairs {
        cls_t.set(&[q, targets.classes[t]], 1.0);
    }
    let focal = g.sigmoid_focal_sum(layer.logits, &cls_t, FOCAL_GAMMA, FOCAL_ALPHA, FOCAL_EPS)?;
    let l_cls = g.scale(focal, 1.0 / b.max(1) as f64)?;
    if b == 0 {
        let zero = g.constant(Tensor::scalar(0.0))?;
        return Ok((l_cls, zero));
    }
    let queries: Vec<usize> = matching.pairs.iter().map(|p| p.0).collect();
    let matched: Vec<BBox> = matching.pairs.iter().map(|p| targets.boxes[p.1]).collect();
    let pred = g.select_rows(layer.boxes, &queries)?;
    let tgt = g.constant(Tensor::new(&[b, 4], matched.iter().flat_map(|m| m.as_array()).collect())?)?;
    let diff = g.sub(pred, tgt)?;
    let abs = g.abs(diff)?;
    let l1 = g.sum(abs)?;
    let gi = giou_rows(g, pred, &matched)?;
    let gi_sum = g.sum(gi)?;
    // Σ(1 − GIoU) = B − ΣGIoU
    let neg = g.scale(gi_sum, -weights.giou)?;
    let l1w = g.scale(l1, weights.l1)?;
    let total = g.add(l1w, neg)?;
    let total = g.add_scalar(total, weights.giou * b as f64)?;
    let l_bbox = g.scale(total, 1.0 / b as f64)?;
    Ok((l_cls, l_bbox))
}

/// Detached regression targets of the location-aware branches.
#[derive(Clone, Debug, PartialEq)]
pub struct AwareTargets {
    /// IoU of each matched prediction with its target, in pair order.
    pub iou: Vec<f64>,
    /// Centerness of each matched query's reference point.
    pub ctr: Option<Vec<f64>>,
}

pub fn aware_targets(
    g: &Graph,
    layer: &LayerOutput,
    targets: &Targets,
    matching: &MatchAssignment,
    refs: Option<&[(f64, f64)]>,
) -> AwareTargets {
    let boxes = g.value(layer.boxes);
    let iou_t = matching
        .pairs
        .iter()
        .map(|&(q, t)| {
            let r = &boxes.data()[q * 4..q * 4 + 4];
            iou(&BBox::new(r[0], r[1], r[2], r[3]), &targets.boxes[t])
        })
        .collect();
    let ctr = match (layer.ctr, refs) {
        (Some(_), Some(refs)) => {
            Some(matching.pairs.iter().map(|&(q, t)| compute_centerness(refs[q], targets.boxes[t].corners())).collect())
        }
        _ => None,
    };
    AwareTargets { iou: iou_t, ctr }
}

/// Location-aware term: BCE of the IoU branch against the detached IoU of
/// each matched prediction, plus (when present) BCE of the centerness branch
/// against the centerness of the query's reference point; divided by `B`.
pub fn loss_aware(
    g: &mut Graph,
    layer: &LayerOutput,
    targets: &Targets,
    matching: &MatchAssignment,
    refs: Option<&[(f64, f64)]>,
) -> Result<Var> {
    let at = aware_targets(g, layer, targets, matching, refs);
    loss_aware_with(g, layer, matching, &at)
}

/// [`loss_aware`] against given (e.g. frozen) targets.
pub fn loss_aware_with(g: &mut Graph, layer: &LayerOutput, matching: &MatchAssignment, at: &AwareTargets) -> Result<Var> {
    let b = matching.pairs.len();
    if b == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let queries: Vec<usize> = matching.pairs.iter().map(|p| p.0).collect();
    let sel = g.select_rows(layer.iou, &queries)?;
    let mut total = g.bce_logits_sum(sel, &Tensor::new(&[b, 1], at.iou.clone())?)?;
    if let (Some(ctr), Some(ctr_t)) = (layer.ctr, &at.ctr) {
        let sel = g.select_rows(ctr, &queries)?;
        let c = g.bce_logits_sum(sel, &Tensor::new(&[b, 1], ctr_t.clone())?)?;
        total = g.add(total, c)?;
    }
    g.scale(total, 1.0 / b as f64)
}

/// Soft per-scale token targets: the `[H, W, K]` mask stack bilinearly resized to `(h, w)`.
pub fn token_targets(masks: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw, k) = match masks.shape() {
        [mh, mw, k] => (*mh, *mw, *k),
        s => return Err(Error::shape("token_targets", format!("masks must be [H, W, K], got {s:?}"))),
    };
    Tensor::new(&[h * w, k], kernels::bilinear(masks.data(), mh, mw, k, h, w))
}

/// Token-labeling term: the shared head maps every token of every scale to
/// `K` logits; mean soft focal over scales, positions and classes, divided
/// by `max(B, 1)`.
pub fn loss_token(g: &mut Graph, head: &Linear, maps: &[FeatureMap], targets: &Targets) -> Result<Var> {
    let masks = match &targets.masks {
        Some(m) if !maps.is_empty() => m,
        _ => return g.constant(Tensor::scalar(0.0)),
    };
    let mut total: Option<Var> = None;
    for m in maps {
        let t = token_targets(masks, m.height, m.width)?;
        let logits = head.forward(g, m.tokens)?;
        let f = g.sigmoid_focal_sum(logits, &t, FOCAL_GAMMA, FOCAL_ALPHA, FOCAL_EPS)?;
        let f = g.scale(f, 1.0 / t.numel() as f64)?;
        total = Some(match total {
            Some(acc) => g.add(acc, f)?,
            None => f,
        });
    }
    let total = total.expect("non-empty maps");
    g.scale(total, 1.0 / (maps.len() * targets.len().max(1)) as f64)
}

/// The four loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub bbox: Var,
    pub awr: Var,
    pub token: Var,
}

/// Scalar values of the terms, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub cls: f64,
    pub bbox: f64,
    pub awr: f64,
    pub token: f64,
    pub total: f64,
}

impl LossValues {
    pub fn add(&mut self, o: &LossValues) {
        self.cls += o.cls;
        self.bbox += o.bbox;
        self.awr += o.awr;
        self.token += o.token;
        self.total += o.total;
    }

    pub fn scale(&mut self, c: f64) {
        for v in [&mut self.cls, &mut self.bbox, &mut self.awr, &mut self.token, &mut self.total] {
            *v *= c;
        }
    }
}

/// `L_total = λ_cls·L_cls + L_bbox + λ_awr·L_awr + λ_token·L_token`
/// (the box weights live inside `L_bbox`). Returns the total node and the
/// weighted per-term values.
pub fn total_loss(g: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossValues)> {
    let cls = g.scale(terms.cls, weights.cls)?;
    let awr = g.scale(terms.awr, weights.awr)?;
    let token = g.scale(terms.token, weights.token)?;
    let a = g.add(cls, terms.bbox)?;
    let b = g.add(awr, token)?;
    let total = g.add(a, b)?;
    let values = LossValues {
        cls: g.value(cls).item(),
        bbox: g.value(terms.bbox).item(),
        awr: g.value(awr).item(),
        token: g.value(token).item(),
        total: g.value(total).item(),
    };
    Ok((total, values))
}

/// Matching and detached aware targets of one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTargets {
    pub matching: MatchAssignment,
    pub aware: AwareTargets,
}

/// Everything the criterion treats as constant, per decoder layer.
pub fn criterion_targets(
    g: &Graph,
    out: &DecoderOutput,
    targets: &Targets,
    refs: Option<&[(f64, f64)]>,
    cost: CostWeights,
) -> Result<Vec<LayerTargets>> {
    out.layers
        .iter()
        .map(|layer| {
            let matching = match_layer(g, layer, targets, cost)?;
            let aware = aware_targets(g, layer, targets, &matching, refs);
            Ok(LayerTargets { matching, aware })
        })
        .collect()
}

/// Deep-supervised set criterion: every decoder layer is matched and
/// contributes its classification, box and aware terms.
///
/// Matching and aware targets are recomputed from the current predictions
/// unless `frozen` supplies them. Freezing makes the loss a smooth function
/// of the parameters, which is what finite differences need.
#[allow(clippy::too_many_arguments)]
pub fn set_criterion(
    g: &mut Graph,
    out: &DecoderOutput,
    targets: &Targets,
    refs: Option<&[(f64, f64)]>,
    weights: &LossWeights,
    cost: CostWeights,
    aware: bool,
    frozen: Option<&[LayerTargets]>,
) -> Result<(Var, Var, Var)> {
    let lts = match frozen {
        Some(f) if f.len() == out.layers.len() => f.to_vec(),
        Some(f) => return Err(Error::Invalid(format!("{} frozen layer targets for {} layers", f.len(), out.layers.len()))),
        None => criterion_targets(g, out, targets, refs, cost)?,
    };
    let mut acc: Option<(Var, Var, Var)> = None;
    for (layer, lt) in out.layers.iter().zip(&lts) {
        let (c, b) = loss_cls_bbox(g, layer, targets, &lt.matching, weights)?;
        let a = if aware { loss_aware_with(g, layer, &lt.matching, &lt.aware)? } else { g.constant(Tensor::scalar(0.0))? };
        acc = Some(match acc {
            None => (c, b, a),
            Some((ac, ab, aa)) => (g.add(ac, c)?, g.add(ab, b)?, g.add(aa, a)?),
        });
    }
    acc.ok_or_else(|| Error::Invalid("decoder produced no layers".into()))
}
