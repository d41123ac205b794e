//! Exact FLOP counts: per-module rollup of both detector configurations and
//! the fusing-stage scaling report.
//!
//!     cargo run --release --example flop_report

use d2etr::autodiff::ParamStore;
use d2etr::detector::{Detector, DetectorConfig};
use d2etr::flops::{count_forward, geometric_factor, scaling_csv, scaling_report, ScalingBase};
use d2etr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> d2etr::Result<()> {
    let image = Tensor::zeros(&[64, 64, 3]);
    for (label, cfg) in [("vanilla", DetectorConfig::vanilla()), ("multi-scale", DetectorConfig::multi_scale())] {
        for no_fusion in [false, true] {
            let mut cfg = cfg.clone();
            cfg.backbone.no_fusion = no_fusion;
            let mut store = ParamStore::new();
            let det = Detector::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
            let counts = count_forward(&det, &store, &image)?;
            println!("{label}{}: {} FLOPs", if no_fusion { " (no fusion)" } else { "" }, counts.total());
            for (scope, n) in counts.rollup(2) {
                println!("  {scope:<24} {n:>12}");
            }
        }
    }
    println!("dense/CECA factor for S=1..5: {:?}", (1..=5u32).map(geometric_factor).collect::<Vec<_>>());
    print!("{}", scaling_csv(&scaling_report(&ScalingBase::default(), 1..=5)?));
    Ok(())
}
