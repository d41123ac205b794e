//! Per-scale cross-attention mass in multi-scale memory mode, grouped by
//! object size, plus the uniform-attention control where each scale's share
//! equals its token count over the total.
//!
//!     cargo run --release --example attention_report

use d2etr::bench::*;
use d2etr::detector::DetectorConfig;

fn main() -> d2etr::Result<()> {
    let cfg = RunConfig { model: DetectorConfig::multi_scale(), ..RunConfig::default() };
    let samples = generate(20, cfg.data.image_size, 7)?;
    // a short fit so the report is not just the initialization
    let mut short = cfg.clone();
    short.train.epochs = 3;
    let TrainOutcome { detector, mut store, .. } = train(&short, &samples, None)?;

    let rows = attention_scale_report(&detector, &store, &samples, samples.len())?;
    print!("{}", attention_csv(&rows));

    uniform_cross_attention(&detector, &mut store)?;
    let rows = attention_scale_report(&detector, &store, &samples, samples.len())?;
    println!("uniform control, summed over layers, all sizes:");
    for r in rows.iter().filter(|r| r.layer == "sum" && r.size_class == "all") {
        println!("  stride {:>2}: {:.6}", r.stride, r.attention_mass);
    }
    Ok(())
}
