//! Synthetic benchmark: data, training, evaluation, reports, persistence.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod report;
pub mod train;

pub use checkpoint::{load_checkpoint, restore_checkpoint, save_checkpoint};
pub use config::{DataConfig, EvalConfig, RunConfig, TrainConfig};
pub use data::{gen_synthetic_dataset, generate, generate_sample, generate_splits, load_split, save_split, SyntheticSample, NUM_CLASSES, VAL_SEED_OFFSET};
pub use eval::{evaluate_ap, evaluate_detections, interpolated_ap, EvalResult, GroundTruth, SizeClass};
pub use gradcheck::{grad_check_config, grad_check_model, GradCheckReport, GRAD_CHECK_TOLERANCE};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use report::{attention_csv, attention_scale_report, group_masses, uniform_cross_attention, AttentionRow};
pub use train::{init_model, log_csv, smoothed_totals, train, train_with, EpochLog, TrainOutcome};
