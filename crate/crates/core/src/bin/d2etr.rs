//! Command-line entry point over the `d2etr` library.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use d2etr::bench::{
    attention_csv, attention_scale_report, evaluate_ap, gen_synthetic_dataset, grad_check_config, init_model, load_split,
    restore_checkpoint, train, RunConfig,
};
use d2etr::flops::{count_forward, scaling_csv, scaling_report, ScalingBase};
use d2etr::Tensor;

#[derive(Parser)]
#[command(name = "d2etr", version, about = "Decoder-only detection transformer on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/ and val/ splits of the synthetic dataset.
    GenData(Common),
    /// Train on <data>/train; writes train_log.csv and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// AP of a checkpoint on <data>/val; writes eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forward FLOPs of the configured model and the fusing-stage scaling report.
    Flops(Common),
    /// Per-scale cross-attention report of a multi-scale checkpoint.
    ReportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the full training loss.
    GradCheck(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Flops(c) | Command::GradCheck(c) => c,
            Command::Train { common, .. } | Command::Eval { common, .. } | Command::ReportAttn { common, .. } => common,
        }
    }
}

fn load_config(c: &Common) -> d2etr::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, text: &str) -> d2etr::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), text)?;
    println!("wrote {}", dir.join(name).display());
    Ok(())
}

fn run(cmd: &Command) -> d2etr::Result<ExitCode> {
    let common = cmd.common();
    let cfg = load_config(common)?;
    let out = &common.out_dir;
    match cmd {
        Command::GenData(_) => {
            let d = &cfg.data;
            gen_synthetic_dataset(out, d.train_size, d.val_size, d.image_size, cfg.data_seed())?;
            println!("wrote {} train / {} val images to {}", d.train_size, d.val_size, out.display());
        }
        Command::Train { data, .. } => {
            let samples = load_split(&data.join("train"))?;
            let outcome = train(&cfg, &samples, Some(out))?;
            let last = outcome.log.last().expect("at least one epoch");
            println!("final loss {:.4}, best epoch {}; outputs in {}", last.losses.total, outcome.best_epoch, out.display());
        }
        Command::Eval { data, checkpoint, .. } => {
            let (detector, mut store) = init_model(&cfg)?;
            restore_checkpoint(checkpoint, &mut store)?;
            let result = evaluate_ap(&detector, &store, &load_split(&data.join("val"))?, cfg.eval.top_k)?;
            println!("AP50 {:.4}  AP75 {:.4}  mAP {:.4}", result.ap50, result.ap75, result.map);
            let json = serde_json::to_string_pretty(&result).map_err(|e| d2etr::Error::Format(e.to_string()))?;
            write(out, "eval.json", &json)?;
        }
        Command::Flops(_) => {
            let (detector, store) = init_model(&cfg)?;
            let side = cfg.model.backbone.image_size;
            let counter = count_forward(&detector, &store, &Tensor::zeros(&[side, side, cfg.model.backbone.in_channels]))?;
            println!("forward FLOPs {}", counter.total());
            for scope in ["backbone", "decoder"] {
                println!("  {scope:<9} {}", counter.total_under(scope));
            }
            write(out, "scaling_report.csv", &scaling_csv(&scaling_report(&ScalingBase::default(), 1..=5)?))?;
        }
        Command::ReportAttn { data, checkpoint, .. } => {
            let (detector, mut store) = init_model(&cfg)?;
            restore_checkpoint(checkpoint, &mut store)?;
            let samples = load_split(&data.join("val"))?;
            let rows = attention_scale_report(&detector, &store, &samples, cfg.eval.report_images)?;
            write(out, "attention_report.csv", &attention_csv(&rows))?;
        }
        Command::GradCheck(_) => {
            let report = grad_check_config(&cfg)?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
