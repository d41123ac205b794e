use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::RunConfig;
use super::data::SyntheticSample;
use super::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::losses::LossValues;

pub const LOG_HEADER: &str = "epoch,l_cls,l_bbox,l_awr,l_token,l_total,lr";
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.bin";

/// Mean (weighted) loss terms of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossValues,
    pub lr: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let l = &e.losses;
        writeln!(s, "{},{},{},{},{},{},{}", e.epoch, l.cls, l.bbox, l.awr, l.token, l.total, e.lr).unwrap();
    }
    s
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    /// Parameters at the epoch with the lowest mean training loss.
    pub best: ParamStore,
    pub best_epoch: usize,
}

/// Builds the model of `cfg` with its seeded initialization.
pub fn init_model(cfg: &RunConfig) -> Result<(Detector, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let detector = Detector::new(&mut store, cfg.model.clone(), &mut rng)?;
    Ok((detector, store))
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(detector: &Detector, store: &ParamStore, sample: &SyntheticSample) -> Result<(LossValues, Gradients)> {
    let mut g = Graph::new(store);
    let (loss, values) = detector.loss(&mut g, &sample.image, &sample.targets())?;
    g.backward(loss)?;
    Ok((values, g.gradients()))
}

/// Trains on `data`; with `out_dir` writes the CSV log and the final and
/// best checkpoints. `on_epoch` sees every log row as it is produced.
pub fn train_with(
    cfg: &RunConfig,
    data: &[SyntheticSample],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training on an empty dataset".into()));
    }
    let side = cfg.model.backbone.image_size;
    if let Some(s) = data.iter().find(|s| s.size() != (side, side)) {
        return Err(Error::config("data.image_size", format!("dataset image {:?} vs model {side}", s.size())));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let (detector, mut store) = init_model(cfg)?;
    let tc = &cfg.train;
    let mut state = AdamWState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_DA7A);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let (mut best, mut best_epoch, mut best_loss) = (store.clone(), 0, f64::INFINITY);

    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let opt = AdamWConfig { lr, beta1: tc.beta1, beta2: tc.beta2, eps: tc.eps, weight_decay: tc.weight_decay };
        order.shuffle(&mut rng);
        let mut sum = LossValues::default();
        for batch in order.chunks(tc.batch_size) {
            let mut grads = Gradients::zeros_like(&store);
            for &i in batch {
                let flipped;
                let sample = if tc.hflip && rng.gen_bool(0.5) {
                    flipped = data[i].hflip();
                    &flipped
                } else {
                    &data[i]
                };
                let (values, g) = sample_gradients(&detector, &store, sample)?;
                sum.add(&values);
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if tc.clip_norm > 0.0 {
                grads.clip_global_norm(tc.clip_norm);
            }
            adamw_step(&mut store, &grads, &mut state, &opt);
        }
        sum.scale(1.0 / data.len() as f64);
        let row = EpochLog { epoch: epoch + 1, losses: sum, lr };
        log::info!("epoch {} total {:.4} lr {:e}", row.epoch, sum.total, lr);
        on_epoch(&row);
        log.push(row);
        if sum.total < best_loss {
            best_loss = sum.total;
            best_epoch = epoch + 1;
            best = store.clone();
        }
        if let Some(dir) = out_dir {
            fs::write(dir.join(LOG_FILE), log_csv(&log))?;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &store)?;
        save_checkpoint(&dir.join(BEST_CHECKPOINT), &best)?;
    }
    Ok(TrainOutcome { detector, store, log, best, best_epoch })
}

pub fn train(cfg: &RunConfig, data: &[SyntheticSample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, data, out_dir, |_| {})
}

/// Trailing moving average of the total loss over `window` epochs
/// (shorter at the start).
pub fn smoothed_totals(log: &[EpochLog], window: usize) -> Vec<f64> {
    (0..log.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            log[lo..=i].iter().map(|e| e.losses.total).sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
