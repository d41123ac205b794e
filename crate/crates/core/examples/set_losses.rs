//! Bipartite matching and the set-prediction criterion on a hand-made case.
//!
//!     cargo run --release --example set_losses

use d2etr::autodiff::{Graph, ParamStore};
use d2etr::bench::generate;
use d2etr::detector::{Detector, DetectorConfig};
use d2etr::losses::{focal_loss, giou, hungarian_match, iou, matching_cost, BBox, CostWeights};
use d2etr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> d2etr::Result<()> {
    // three predictions, two targets
    let probs = Tensor::from_rows(&[&[0.9, 0.1], &[0.2, 0.7], &[0.5, 0.5]]);
    let boxes = [BBox::new(0.3, 0.3, 0.2, 0.2), BBox::new(0.7, 0.6, 0.3, 0.2), BBox::new(0.5, 0.5, 0.9, 0.9)];
    let targets = [BBox::new(0.72, 0.62, 0.28, 0.2), BBox::new(0.31, 0.29, 0.2, 0.22)];
    let classes = [1, 0];
    let cost = matching_cost(&probs, &boxes, &targets, &classes, CostWeights::default())?;
    let m = hungarian_match(&cost)?;
    println!("assignment (query, target): {:?}, total cost {:.4}", m.pairs, m.total_cost(&cost));
    for &(q, t) in &m.pairs {
        println!("  query {q} -> target {t}: IoU {:.3}, GIoU {:.3}", iou(&boxes[q], &targets[t]), giou(&boxes[q], &targets[t]));
    }
    println!("focal(p=0.9, t=1) = {:.5}, focal(p=0.9, t=0) = {:.5}", focal_loss(0.9, 1.0, 2.0, 0.25), focal_loss(0.9, 0.0, 2.0, 0.25));

    // the full criterion of an untrained detector on one synthetic image
    let sample = &generate(1, 64, 4)?[0];
    for (label, cfg) in [("vanilla", DetectorConfig::vanilla()), ("multi-scale", DetectorConfig::multi_scale())] {
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut g = Graph::new(&store);
        let (_, v) = det.loss(&mut g, &sample.image, &sample.targets())?;
        println!(
            "{label}: cls {:.4} bbox {:.4} aware {:.4} token {:.4} total {:.4}",
            v.cls, v.bbox, v.awr, v.token, v.total
        );
    }
    Ok(())
}
