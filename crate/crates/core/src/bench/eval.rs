//! COCO-style average precision on the synthetic benchmark.

use serde::Serialize;

use super::data::{SyntheticSample, CLASS_NAMES};
use crate::autodiff::ParamStore;
use crate::decoder::Detection;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::losses::{iou, BBox};

/// Object size classes of the COCO area rule, with thresholds 32² and 96²
/// defined for 640-pixel images and rescaled to the actual side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }

    /// `(small_max, large_min)` pixel areas for an image of side `side`.
    pub fn thresholds(side: f64) -> (f64, f64) {
        let s = side / 640.0;
        ((32.0 * s).powi(2), (96.0 * s).powi(2))
    }

    pub fn of(area: f64, side: f64) -> SizeClass {
        let (small, large) = Self::thresholds(side);
        if area < small {
            SizeClass::Small
        } else if area > large {
            SizeClass::Large
        } else {
            SizeClass::Medium
        }
    }
}

/// Ground truth of one image in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    /// Image side used for size classes.
    pub side: f64,
}

impl GroundTruth {
    pub fn from_sample(s: &SyntheticSample) -> Self {
        let (h, w) = s.size();
        GroundTruth {
            boxes: s.boxes.iter().map(|b| b.scaled(w as f64, h as f64)).collect(),
            classes: s.classes.clone(),
            side: w as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAp {
    pub class: String,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub map: Option<f64>,
}

/// AP values lie in [0, 1]; `None` marks a breakdown without any target.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over IoU 0.50:0.05:0.95.
    pub map: f64,
    pub per_class: Vec<ClassAp>,
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// 101-point interpolated area under a precision/recall sequence.
pub fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        while j < recall.len() && recall[j] < r - 1e-12 {
            j += 1;
        }
        if j < recall.len() {
            sum += envelope[j];
        }
    }
    sum / 101.0
}

/// AP of one class at one threshold; targets (and unmatched detections)
/// outside `area` are ignored. `None` when no target counts.
fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[GroundTruth],
    class: usize,
    thr: f64,
    area: Option<SizeClass>,
) -> Option<f64> {
    let outside = |b: &BBox, side: f64| area.is_some_and(|a| SizeClass::of(b.area(), side) != a);
    let mut npos = 0;
    let mut ignored: Vec<Vec<bool>> = Vec::with_capacity(gts.len());
    for gt in gts {
        let flags: Vec<bool> = gt.boxes.iter().map(|b| outside(b, gt.side)).collect();
        npos += gt.classes.iter().zip(&flags).filter(|(&c, &ig)| c == class && !ig).count();
        ignored.push(flags);
    }
    if npos == 0 {
        return None;
    }
    let mut order: Vec<(usize, &Detection)> =
        dets.iter().enumerate().flat_map(|(i, d)| d.iter().filter(|d| d.class == class).map(move |d| (i, d))).collect();
    order.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut recall, mut precision) = (Vec::new(), Vec::new());
    for (img, det) in order {
        let gt = &gts[img];
        let mut best: Option<(usize, f64, bool)> = None;
        for (t, b) in gt.boxes.iter().enumerate() {
            if gt.classes[t] != class || used[img][t] {
                continue;
            }
            let o = iou(&det.bbox, b);
            if o < thr {
                continue;
            }
            let ig = ignored[img][t];
            // counted targets win over ignored ones, then higher overlap
            let better = match best {
                None => true,
                Some((_, bo, bi)) => (bi && !ig) || (bi == ig && o > bo),
            };
            if better {
                best = Some((t, o, ig));
            }
        }
        match best {
            Some((t, _, ig)) => {
                used[img][t] = true;
                if ig {
                    continue;
                }
                tp += 1;
            }
            None if outside(&det.bbox, gt.side) => continue,
            None => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Some(interpolated_ap(&recall, &precision))
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores detections (pixel boxes) against targets (pixel boxes).
pub fn evaluate_detections(dets: &[Vec<Detection>], gts: &[GroundTruth], num_classes: usize) -> Result<EvalResult> {
    if gts.is_empty() {
        return Err(Error::Invalid("evaluation on an empty dataset".into()));
    }
    if dets.len() != gts.len() {
        return Err(Error::Invalid(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let at = |class: usize, thr: f64, area| class_ap(dets, gts, class, thr, area);
    let map_of = |class: usize, area| mean(IOU_THRESHOLDS.iter().map(|&t| at(class, t, area)));
    let per_class: Vec<ClassAp> = (0..num_classes)
        .map(|k| ClassAp {
            class: CLASS_NAMES.get(k).map_or_else(|| format!("class{k}"), |s| s.to_string()),
            ap50: at(k, 0.5, None),
            ap75: at(k, 0.75, None),
            map: map_of(k, None),
        })
        .collect();
    let size = |a| mean((0..num_classes).map(|k| map_of(k, Some(a))));
    Ok(EvalResult {
        ap50: mean(per_class.iter().map(|c| c.ap50)).unwrap_or(0.0),
        ap75: mean(per_class.iter().map(|c| c.ap75)).unwrap_or(0.0),
        map: mean(per_class.iter().map(|c| c.map)).unwrap_or(0.0),
        per_class,
        small: size(SizeClass::Small),
        medium: size(SizeClass::Medium),
        large: size(SizeClass::Large),
    })
}

pub fn detect_all(detector: &Detector, store: &ParamStore, samples: &[SyntheticSample], top_k: Option<usize>) -> Result<Vec<Vec<Detection>>> {
    let k = top_k.unwrap_or(detector.cfg.decoder.num_queries);
    samples.iter().map(|s| detector.detect(store, &s.image, k)).collect()
}

pub fn evaluate_ap(detector: &Detector, store: &ParamStore, samples: &[SyntheticSample], top_k: Option<usize>) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation on an empty dataset".into()));
    }
    let dets = detect_all(detector, store, samples, top_k)?;
    let gts: Vec<GroundTruth> = samples.iter().map(GroundTruth::from_sample).collect();
    evaluate_detections(&dets, &gts, detector.cfg.decoder.num_classes)
}
