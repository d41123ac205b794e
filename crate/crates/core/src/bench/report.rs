//! Per-scale decoder cross-attention mass, by matched object size.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::data::SyntheticSample;
use super::eval::SizeClass;
use crate::autodiff::{Graph, ParamStore};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::losses::match_layer;

pub const ATTENTION_HEADER: &str = "layer,size_class,scale,stride,attention_mass";

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    /// Decoder layer index, or `sum` for the layer average.
    pub layer: String,
    /// A size class, or `all`.
    pub size_class: String,
    pub scale: usize,
    pub stride: usize,
    pub attention_mass: f64,
}

pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let mut s = format!("{ATTENTION_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.layer, r.size_class, r.scale, r.stride, r.attention_mass).unwrap();
    }
    s
}

/// Scale masses of every `(layer, size_class)` group, in row order.
pub fn group_masses(rows: &[AttentionRow]) -> Vec<(String, String, Vec<f64>)> {
    let mut out: Vec<(String, String, Vec<f64>)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((l, s, m)) if *l == r.layer && *s == r.size_class => m.push(r.attention_mass),
            _ => out.push((r.layer.clone(), r.size_class.clone(), vec![r.attention_mass])),
        }
    }
    out
}

/// Averages, over the first `n` images and each query matched to an object,
/// the head-averaged cross-attention mass falling on each memory scale.
/// The `sum` rows add the layers up and renormalize.
pub fn attention_scale_report(
    detector: &Detector,
    store: &ParamStore,
    samples: &[SyntheticSample],
    n: usize,
) -> Result<Vec<AttentionRow>> {
    if !detector.cfg.decoder.multi_scale() {
        return Err(Error::config(
            "model.decoder.memory_strides",
            "attention report needs multi-scale memory (list at least two strides)",
        ));
    }
    let samples = &samples[..n.min(samples.len())];
    if samples.is_empty() {
        return Err(Error::Invalid("attention report over zero images".into()));
    }
    let layers = detector.cfg.decoder.layers;
    let cost = detector.cfg.loss.cost();
    // (layer, size class) -> (summed masses, matched queries)
    let mut acc: BTreeMap<(usize, Option<SizeClass>), (Vec<f64>, usize)> = BTreeMap::new();
    let mut layout = Vec::new();
    for sample in samples {
        let mut g = Graph::new(store);
        let out = detector.forward(&mut g, &sample.image)?;
        layout = out.decoder.memory_layout.clone();
        let targets = sample.targets();
        let m = match_layer(&g, out.decoder.last(), &targets, cost)?;
        let (h, w) = sample.size();
        for (l, heads) in out.decoder.cross_attention.iter().enumerate() {
            let probs: Vec<_> = heads.iter().map(|&v| g.value(v).clone()).collect();
            for &(q, t) in &m.pairs {
                let mut mass = vec![0.0; layout.len()];
                for p in &probs {
                    let row = &p.data()[q * p.shape()[1]..(q + 1) * p.shape()[1]];
                    let mut start = 0;
                    for (s, &(_, count)) in layout.iter().enumerate() {
                        mass[s] += row[start..start + count].iter().sum::<f64>() / probs.len() as f64;
                        start += count;
                    }
                }
                let size = SizeClass::of(targets.boxes[t].scaled(w as f64, h as f64).area(), w as f64);
                for key in [(l, Some(size)), (l, None)] {
                    let e = acc.entry(key).or_insert_with(|| (vec![0.0; layout.len()], 0));
                    e.0.iter_mut().zip(&mass).for_each(|(a, b)| *a += b);
                    e.1 += 1;
                }
            }
        }
    }
    let label = |s: Option<SizeClass>| s.map_or("all", SizeClass::name).to_string();
    let mut rows = Vec::new();
    let mut push = |layer: String, size: Option<SizeClass>, mass: &[f64]| {
        for (scale, (&(stride, _), &m)) in layout.iter().zip(mass).enumerate() {
            rows.push(AttentionRow { layer: layer.clone(), size_class: label(size), scale, stride, attention_mass: m });
        }
    };
    let sizes: Vec<Option<SizeClass>> = SizeClass::ALL.iter().copied().map(Some).chain([None]).collect();
    for l in 0..layers {
        for &size in &sizes {
            if let Some((sum, count)) = acc.get(&(l, size)) {
                let mean: Vec<f64> = sum.iter().map(|v| v / *count as f64).collect();
                push(l.to_string(), size, &mean);
            }
        }
    }
    for &size in &sizes {
        let per_layer: Vec<Vec<f64>> = (0..layers)
            .filter_map(|l| acc.get(&(l, size)).map(|(s, c)| s.iter().map(|v| v / *c as f64).collect()))
            .collect();
        if per_layer.is_empty() {
            continue;
        }
        let total: Vec<f64> = (0..layout.len()).map(|s| per_layer.iter().map(|m| m[s]).sum()).collect();
        let norm: f64 = total.iter().sum();
        push("sum".into(), size, &total.iter().map(|v| v / norm).collect::<Vec<_>>());
    }
    Ok(rows)
}

/// Zeroes query and key projections of every decoder cross-attention so
/// all logits are equal and attention is uniform over memory tokens.
pub fn uniform_cross_attention(detector: &Detector, store: &mut ParamStore) -> Result<()> {
    for l in 0..detector.cfg.decoder.layers {
        for part in ["q.weight", "q.bias", "k.weight", "k.bias"] {
            let name = format!("decoder.layer{l}.cross_attn.{part}");
            let id = store.id(&name).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
            store.get_mut(id).value.data_mut().fill(0.0);
        }
    }
    Ok(())
}
