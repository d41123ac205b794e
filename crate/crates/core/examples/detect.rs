//! Detector forward pass and location-aware post-processing.
//!
//!     cargo run --release --example detect

use d2etr::autodiff::ParamStore;
use d2etr::bench::data::CLASS_NAMES;
use d2etr::bench::generate;
use d2etr::decoder::location_aware_score;
use d2etr::detector::{Detector, DetectorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> d2etr::Result<()> {
    println!("score(cls 0.8, IoU 0.9, ctr 1.0; α 0.45, β 0.05) = {:.6}", location_aware_score(0.8, 0.9, 1.0, 0.45, 0.05)?);

    let sample = &generate(1, 64, 11)?[0];
    for (label, cfg) in [("vanilla", DetectorConfig::vanilla()), ("multi-scale", DetectorConfig::multi_scale())] {
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let dets = det.detect(&store, &sample.image, 5)?;
        println!("{label} (untrained), top {}:", dets.len());
        for d in dets {
            let b = d.bbox;
            println!("  query {:>2} {:<9} score {:.4} box cx {:.1} cy {:.1} w {:.1} h {:.1}", d.query, CLASS_NAMES[d.class], d.score, b.cx, b.cy, b.w, b.h);
        }
    }
    println!("ground truth:");
    for (b, &c) in sample.boxes.iter().zip(&sample.classes) {
        println!("  {:<9} cx {:.1} cy {:.1} w {:.1} h {:.1}", CLASS_NAMES[c], b.cx * 64.0, b.cy * 64.0, b.w * 64.0, b.h * 64.0);
    }
    Ok(())
}
