//! The `ltmp` command-line interface.
//!
//! The subcommands chain into a pipeline rooted at one output directory:
//! `gen-data` writes the dataset splits, `pretrain` trains the reduction-free
//! backbone, `ltmp` fine-tunes the thresholds on top of it, and `eval`,
//! `correlate`, `kdist`, and `visualize` read the resulting checkpoints.
//! Every command takes the same `--config` file plus repeatable
//! `--set key=value` overrides, and is byte-reproducible given those and the
//! seeds inside them. Unknown keys and subcommands exit with code 2.

use crate::analysis::{correlation_report, k_distribution_report, AnalysisError};
use crate::config::{self, ConfigError, RunConfig};
use crate::data::{generate, DataError, Dataset, Split};
use crate::flops::{phi_head, phi_patch_embed, FlopsReport};
use crate::model::{load_checkpoint, save_checkpoint, ExecMode, ModelError, ReductionOrder};
use crate::train::{evaluate, ltmp_finetune, pretrain_backbone, TrainError};
use crate::viz::{visualize_tokens, VizError};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Viz(#[from] VizError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Message(String),
}

impl CliError {
    /// Usage-class mistakes (unknown keys, malformed assignments) exit 2
    /// like argument-parsing errors; everything else is a plain failure.
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(ConfigError::Io(_)) => 1,
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ltmp",
    version,
    about = "Vision transformer token merging and pruning with learned thresholds"
)]
struct Cli {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set r_target=0.7.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for datasets, checkpoints, reports, and images.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test splits of the synthetic shapes dataset.
    GenData,
    /// Train the backbone with reduction disabled; writes pretrain.ckpt.
    Pretrain,
    /// Fine-tune the merge/prune thresholds for one epoch; writes ltmp.ckpt.
    Ltmp {
        /// Input checkpoint; defaults to OUT/pretrain.ckpt.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Report accuracy, r_FLOPs, and kept tokens for a checkpoint.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Kendall-tau correlation between importance and similarity scores.
    Correlate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Tokens merged and pruned per layer in the fixed top-k probe.
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Render per-layer token-retention images for one sample.
    Visualize {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Sample index within the split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Distribution of merged/pruned token counts per layer.
    Kdist {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Per-block FLOPs breakdown for the configured model shape.
    FlopsReport,
}

/// Entry point used by `main`; returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolved_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => config::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.set {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects KEY=VALUE, got `{assignment}`"))
        })?;
        cfg.apply(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn load_split(out: &Path, split: SplitArg) -> Result<Dataset, CliError> {
    let path = out.join(format!("{}.bin", split.name()));
    Dataset::load(&path).map_err(|e| {
        CliError::Message(format!(
            "cannot load {} ({e}); run `ltmp gen-data` first",
            path.display()
        ))
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Message(format!("serialising {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolved_config(&cli)?;
    let out = cli.out.clone();
    fs::create_dir_all(&out)?;
    match cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::Pretrain => pretrain(&cfg, &out),
        Command::Ltmp { checkpoint } => {
            let ckpt_path = checkpoint.unwrap_or_else(|| out.join("pretrain.ckpt"));
            ltmp(&cfg, &out, &ckpt_path)
        }
        Command::Eval { checkpoint, split } => eval(&out, &checkpoint, split),
        Command::Correlate {
            checkpoint,
            split,
            k,
        } => correlate(&out, &checkpoint, split, k),
        Command::Visualize {
            checkpoint,
            split,
            sample,
        } => visualize(&out, &checkpoint, split, sample),
        Command::Kdist { checkpoint, split } => kdist(&out, &checkpoint, split),
        Command::FlopsReport => flops_report(&cfg, &out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.data
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let name = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let dataset = generate(&cfg.data, split)?;
        let path = out.join(format!("{name}.bin"));
        dataset.save(&path)?;
        println!("{}: {} samples", path.display(), dataset.len());
    }
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.reduction_order = ReductionOrder::None;
    model_cfg
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.train
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let train = load_split(out, SplitArg::Train)?;
    let val = load_split(out, SplitArg::Val)?;
    let result = pretrain_backbone(&train, &val, &model_cfg, &cfg.train)?;

    let ckpt_path = out.join("pretrain.ckpt");
    save_checkpoint(&ckpt_path, &result.checkpoint)?;
    let mut lines = String::new();
    for stats in &result.history {
        lines.push_str(&serde_json::to_string(stats).expect("stats serialise"));
        lines.push('\n');
    }
    fs::write(out.join("pretrain_metrics.jsonl"), lines)?;

    if result.history.is_empty() {
        println!("pretrain: 0 epochs, wrote initialisation -> {}", ckpt_path.display());
    } else {
        let metric = |name: &str| {
            result
                .checkpoint
                .metrics
                .iter()
                .find(|(k, _)| k == name)
                .map_or(f64::NAN, |(_, v)| *v)
        };
        println!(
            "pretrain: {} epochs, kept train_loss {:.4}, val_acc {:.4} -> {}",
            result.history.len(),
            metric("train_loss"),
            metric("val_acc"),
            ckpt_path.display()
        );
    }
    Ok(())
}

fn ltmp(cfg: &RunConfig, out: &Path, ckpt_path: &Path) -> Result<(), CliError> {
    cfg.model
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.train
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let train = load_split(out, SplitArg::Train)?;
    let mut ckpt = load_checkpoint(ckpt_path)?;
    // The checkpoint owns the backbone shape; the run config decides which
    // reduction modules to train and how to score tokens.
    ckpt.config.reduction_order = cfg.model.reduction_order;
    ckpt.config.importance_score = cfg.model.importance_score;
    ckpt.config.topk_k = cfg.model.topk_k;
    ckpt.config.merge_weighting = cfg.model.merge_weighting;

    let result = ltmp_finetune(&ckpt, &train, &cfg.train)?;
    let out_path = out.join("ltmp.ckpt");
    save_checkpoint(&out_path, &result.checkpoint)?;

    #[derive(Serialize)]
    struct StepStats {
        step: usize,
        batch_r: f64,
    }
    let mut lines = String::new();
    for (i, &batch_r) in result.r_trajectory.iter().enumerate() {
        let record = StepStats {
            step: i + 1,
            batch_r,
        };
        lines.push_str(&serde_json::to_string(&record).expect("stats serialise"));
        lines.push('\n');
    }
    fs::write(out.join("ltmp_metrics.jsonl"), lines)?;

    println!(
        "ltmp: {} steps at r_target {}, final batch r {:.4} -> {}",
        result.r_trajectory.len(),
        cfg.train.r_target,
        result.r_trajectory.last().copied().unwrap_or(1.0),
        out_path.display()
    );
    Ok(())
}

fn eval(out: &Path, ckpt_path: &Path, split: SplitArg) -> Result<(), CliError> {
    let dataset = load_split(out, split)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let metrics = evaluate(&ckpt, &dataset, ExecMode::Inference)?;
    println!(
        "eval {}: top1 {:.4}, mean r_flops {:.4}",
        split.name(),
        metrics.top1,
        metrics.mean_r_flops
    );
    write_json(&out.join(format!("eval_{}.json", split.name())), &metrics)
}

fn correlate(out: &Path, ckpt_path: &Path, split: SplitArg, k: usize) -> Result<(), CliError> {
    let dataset = load_split(out, split)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let report = correlation_report(&ckpt, &dataset, k)?;
    print!("{}", report.to_text());
    write_json(
        &out.join(format!("correlation_{}.json", split.name())),
        &report,
    )
}

fn visualize(out: &Path, ckpt_path: &Path, split: SplitArg, sample: usize) -> Result<(), CliError> {
    let dataset = load_split(out, split)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    if sample >= dataset.len() {
        return Err(CliError::Message(format!(
            "sample {sample} out of range; {} split has {} samples",
            split.name(),
            dataset.len()
        )));
    }
    let image = dataset.image_tensor(sample);
    let dir = out.join(format!("tokens_{}_{sample:03}", split.name()));
    let paths = visualize_tokens(&ckpt, &image, &dir)?;
    for path in &paths {
        println!("{}", path.display());
    }
    Ok(())
}

fn kdist(out: &Path, ckpt_path: &Path, split: SplitArg) -> Result<(), CliError> {
    let dataset = load_split(out, split)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let report = k_distribution_report(&ckpt, &dataset)?;
    print!("{}", report.to_text());
    write_json(&out.join(format!("kdist_{}.json", split.name())), &report)
}

fn flops_report(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let m = &cfg.model;
    m.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let ones = vec![1.0; m.blocks];
    let report = FlopsReport::from_mask_means(&ones, m.n_tokens(), m.embed_dim);
    println!(
        "model: {} tokens (image {}, patch {}), dim {}, {} blocks",
        m.n_tokens(),
        m.image_size,
        m.patch_size,
        m.embed_dim,
        m.blocks
    );
    for block in &report.blocks {
        println!(
            "block {:2}: msa {:.0} + mlp {:.0} = {:.0}",
            block.block, block.phi_msa, block.phi_mlp, block.phi_blk
        );
    }
    println!("total block flops per image: {:.4e}", report.total_flops);
    println!(
        "patch embed: {:.4e}, classifier head: {:.4e}",
        phi_patch_embed(m.n_patches(), m.patch_size, m.channels, m.embed_dim),
        phi_head(m.embed_dim, m.classes)
    );
    write_json(&out.join("flops.json"), &report)
}
