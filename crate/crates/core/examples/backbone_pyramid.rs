//! The cross-scale backbone on one synthetic image: normal-stage outputs,
//! the fused pyramid, and the no-fusion ablation.
//!
//!     cargo run --release --example backbone_pyramid

use d2etr::autodiff::{Graph, ParamStore};
use d2etr::backbone::{Backbone, PyramidConfig};
use d2etr::bench::generate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn describe(cfg: PyramidConfig, label: &str) -> d2etr::Result<()> {
    let image = &generate(1, cfg.image_size, 3)?[0].image;
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut g = Graph::new(&store);
    let out = backbone.forward(&mut g, image)?;
    println!("{label}: {} parameters", store.iter().map(|p| p.value.numel()).sum::<usize>());
    for m in &out.raw {
        println!("  stage {} stride {:>2}: {}x{}x{}", m.scale, m.stride, m.height, m.width, m.channels);
    }
    for m in out.pyramid.maps() {
        let t = m.to_tensor(&g);
        let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
        println!("  fused  stride {:>2}: {}x{}x{} rms {rms:.3}", m.stride, m.height, m.width, m.channels);
    }
    Ok(())
}

fn main() -> d2etr::Result<()> {
    describe(PyramidConfig::default(), "last scale fused")?;
    let all = PyramidConfig { fuse_start_lvl: 1, extra_scale: true, ..PyramidConfig::default() };
    describe(all.clone(), "all scales fused, extra stride-64 map")?;
    describe(PyramidConfig { no_fusion: true, ..all }, "no fusion")?;
    Ok(())
}
