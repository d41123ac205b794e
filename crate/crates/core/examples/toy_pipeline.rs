//! Generate the synthetic dataset, train, evaluate and reload the
//! checkpoint. Defaults to a short run; pass `--full` for the standard toy
//! schedule (500 images, 60 epochs, about ten minutes in release mode).
//!
//!     cargo run --release --example toy_pipeline [-- --full]

use std::path::Path;

use d2etr::bench::*;

fn main() -> d2etr::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let mut cfg = RunConfig::load(&config)?;
    if !full {
        cfg.data.train_size = 48;
        cfg.data.val_size = 16;
        cfg.train.epochs = 6;
    }
    let dir = std::env::temp_dir().join("d2etr_toy_pipeline");
    gen_synthetic_dataset(&dir.join("data"), cfg.data.train_size, cfg.data.val_size, cfg.data.image_size, cfg.data_seed())?;
    let train_set = load_split(&dir.join("data/train"))?;
    let val_set = load_split(&dir.join("data/val"))?;
    println!("{} train / {} val images in {}", train_set.len(), val_set.len(), dir.display());

    let start = std::time::Instant::now();
    let out = train_with(&cfg, &train_set, Some(&dir), |e| {
        println!("epoch {:>2}  total {:.4}  bbox {:.4}  cls {:.4}  lr {:.1e}", e.epoch, e.losses.total, e.losses.bbox, e.losses.cls, e.lr);
    })?;
    println!("trained in {:.1?}, best epoch {}", start.elapsed(), out.best_epoch);

    let eval = evaluate_ap(&out.detector, &out.store, &val_set, cfg.eval.top_k)?;
    println!("val AP50 {:.3}  AP75 {:.3}  mAP {:.3}", eval.ap50, eval.ap75, eval.map);
    for c in &eval.per_class {
        match c.ap50 {
            Some(ap) => println!("  {} AP50 {ap:.3}", c.class),
            None => println!("  {} has no validation objects", c.class),
        }
    }

    let (detector, mut store) = init_model(&cfg)?;
    restore_checkpoint(&dir.join("checkpoint_final.bin"), &mut store)?;
    let reloaded = evaluate_ap(&detector, &store, &val_set, cfg.eval.top_k)?;
    println!("reloaded checkpoint reproduces the evaluation: {}", reloaded == eval);
    Ok(())
}
