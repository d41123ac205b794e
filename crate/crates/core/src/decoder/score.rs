use crate::error::{Error, Result};
use crate::losses::BBox;

/// Centerness of reference point `(x, y)` inside corner box `(x1, y1, x2, y2)`:
/// `sqrt(min(l,r)/max(l,r) · min(t,b)/max(t,b))`, zero outside the box or
/// for a degenerate box.
pub fn compute_centerness(reference: (f64, f64), corners: [f64; 4]) -> f64 {
    let (x, y) = reference;
    let [x1, y1, x2, y2] = corners;
    if !(x2 > x1 && y2 > y1) {
        return 0.0;
    }
    let (l, r, t, b) = (x - x1, x2 - x, y - y1, y2 - y);
    if l <= 0.0 || r <= 0.0 || t <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    (l.min(r) / l.max(r) * (t.min(b) / t.max(b))).sqrt()
}

/// Checks the score-fusion exponents: both nonnegative, `α + β ≤ 1`.
pub fn validate_score_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::config("alpha", format!("score weights must be nonnegative, got α={alpha}, β={beta}")));
    }
    if alpha + beta > 1.0 + 1e-12 {
        return Err(Error::config("alpha", format!("α + β = {} exceeds 1", alpha + beta)));
    }
    Ok(())
}

/// `CLS^(1−α−β) · IoU^α · CTR^β`, with `0⁰ = 1`.
pub fn location_aware_score(cls: f64, iou: f64, ctr: f64, alpha: f64, beta: f64) -> Result<f64> {
    validate_score_weights(alpha, beta)?;
    for (name, v) in [("cls", cls), ("iou", iou), ("ctr", ctr)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!("{name} score {v} outside [0, 1]")));
        }
    }
    let e = (1.0 - alpha - beta).max(0.0);
    Ok(cls.powf(e) * iou.powf(alpha) * ctr.powf(beta))
}

/// One ranked detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub query: usize,
    pub class: usize,
    pub score: f64,
    /// Box in absolute image coordinates.
    pub bbox: BBox,
}

/// Plain-value view of one decoder layer's heads, after sigmoids.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[N][K]` class probabilities.
    pub class_probs: Vec<Vec<f64>>,
    pub boxes: Vec<BBox>,
    pub iou: Vec<f64>,
    /// Present when the centerness branch exists.
    pub ctr: Option<Vec<f64>>,
}

/// Ranks every (query, class) pair by fused score and keeps the best `top_k`.
/// No duplicate suppression; ties keep index order.
pub fn postprocess(pred: &Prediction, alpha: f64, beta: f64, top_k: usize, image_size: (f64, f64)) -> Result<Vec<Detection>> {
    // without a centerness branch β is forced to 0
    let beta = if pred.ctr.is_some() { beta } else { 0.0 };
    let mut dets = Vec::new();
    for (q, probs) in pred.class_probs.iter().enumerate() {
        let ctr = pred.ctr.as_ref().map_or(1.0, |c| c[q]);
        for (c, &p) in probs.iter().enumerate() {
            let score = location_aware_score(p, pred.iou[q], ctr, alpha, beta)?;
            dets.push(Detection { query: q, class: c, score, bbox: pred.boxes[q].scaled(image_size.0, image_size.1) });
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(top_k);
    Ok(dets)
}
