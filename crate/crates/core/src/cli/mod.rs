//! `lbadmm` command line: pretrain, quantize, eval, export, inspect.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::admm::{admm_train_with, write_history_csv};
use crate::data::{load_idx, load_mnist, split_paths, Dataset, Split};
use crate::error::{Error, Result};
use crate::model_io::{CodeEncoding, ModelMeta, QuantizedModel};
use crate::quantset::QuantizationSet;
use crate::train::{accuracy, pretrain, write_pretrain_csv, NetworkObjective};

pub use config::{ArchChoice, RunConfig};

pub const MODEL_FILE: &str = "model.lbm";
pub const QUANTIZED_FILE: &str = "quantized.lbm";
pub const PRETRAIN_CSV: &str = "pretrain.csv";
pub const ADMM_CSV: &str = "admm.csv";

#[derive(Debug, Parser)]
#[command(name = "lbadmm", version, about = "Low-bit neural network training with ADMM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a full-precision baseline.
    Pretrain(PretrainArgs),
    /// Quantize a pretrained model with ADMM.
    Quantize(QuantizeArgs),
    /// Report test accuracy of a model.
    Eval(EvalArgs),
    /// Re-encode a model file.
    Export(ExportArgs),
    /// Print per-layer storage details.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory holding the IDX files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub arch: Option<ArchChoice>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Pretrained model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// binary, ternary or pow2:N
    #[arg(long)]
    pub set: Option<QuantizationSet>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// selector=policy, e.g. fc_last=full_precision or 1x1=int8 (repeatable).
    #[arg(long)]
    pub layer_policy: Vec<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps_per_round: Option<usize>,
    #[arg(long)]
    pub packed: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Bit-pack codebook codes.
    #[arg(long)]
    pub packed: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub json: bool,
}

fn merged(common: &CommonArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(dir) = &common.data_dir {
        config.data_dir = dir.clone();
    }
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    if common.train_limit.is_some() {
        config.train_limit = common.train_limit;
    }
    Ok(config)
}

fn load_data(config: &RunConfig) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let (train, test) = load_mnist::<f64>(&config.data_dir)?;
    let train = match config.train_limit {
        Some(n) => train.truncate(n),
        None => train,
    };
    Ok((train, test))
}

fn check_inputs(config: &RunConfig) -> Result<()> {
    split_paths(&config.data_dir, Split::Train)?;
    split_paths(&config.data_dir, Split::Test)?;
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn write_config(config: &RunConfig, name: &str) -> Result<()> {
    fs::write(config.out.join(name), config.to_toml()?)?;
    Ok(())
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let mut config = merged(&args.common)?;
    if let Some(arch) = args.arch {
        config.pretrain.arch = arch;
    }
    if let Some(epochs) = args.epochs {
        config.pretrain.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        config.pretrain.lr = lr;
    }
    let train_config = config.pretrain_config();
    train_config.validate()?;
    check_inputs(&config)?;
    prepare_out(&config.out)?;
    write_config(&config, "pretrain.config.toml")?;

    let (train, test) = load_data(&config)?;
    let (net, history) = pretrain(config.pretrain.arch.build(), &train, &test, &train_config, |r| {
        eprintln!(
            "epoch {}: loss {} test accuracy {:.4}",
            r.epoch,
            r.train_loss.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into()),
            r.test_accuracy
        );
    })?;
    let last = history.last().expect("epoch 0 is always recorded");
    let final_lr = train_config.lr_at(train_config.epochs.max(1));
    let meta = ModelMeta {
        seed: Some(config.seed),
        final_lr: Some(final_lr / (1.0 - train_config.momentum)),
        test_accuracy: Some(last.test_accuracy),
    };
    let model = QuantizedModel::full_precision(net.arch.clone(), &net.params)?.with_meta(meta);
    model.save(&config.out.join(MODEL_FILE), CodeEncoding::Int8)?;
    write_pretrain_csv(fs::File::create(config.out.join(PRETRAIN_CSV))?, &history)?;
    println!("test_accuracy={}", last.test_accuracy);
    println!("model={}", config.out.join(MODEL_FILE).display());
    Ok(())
}

pub fn cmd_quantize(args: &QuantizeArgs) -> Result<()> {
    let mut config = merged(&args.common)?;
    let q = &mut config.quantize;
    if let Some(model) = &args.model {
        q.model = model.clone();
    }
    if let Some(set) = args.set {
        q.set = set;
    }
    if let Some(rho) = args.rho {
        q.rho = rho;
    }
    if let Some(rounds) = args.rounds {
        q.max_rounds = rounds;
    }
    if !args.layer_policy.is_empty() {
        q.layer_policy = args.layer_policy.clone();
    }
    if let Some(beta) = args.beta {
        q.beta_p = Some(beta);
        q.beta_c = Some(beta);
    }
    if args.steps_per_round.is_some() {
        q.proximal_steps_per_round = args.steps_per_round;
    }
    if args.packed {
        q.packed = true;
    }

    if !config.quantize.model.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("pretrained model {} not found", config.quantize.model.display()),
        )));
    }
    check_inputs(&config)?;
    let pretrained = QuantizedModel::load(&config.quantize.model)?;
    let arch = pretrained.arch.clone();
    let admm = config.admm_config(&arch, pretrained.meta.final_lr)?;
    prepare_out(&config.out)?;
    write_config(&config, "quantize.config.toml")?;

    let (train, test) = load_data(&config)?;
    let mut objective = NetworkObjective::new(&arch, &train, Some(&test), config.quantize.batch_size, config.seed)?;
    let outcome = admm_train_with(pretrained.params(), &admm, &mut objective, |r| {
        eprintln!(
            "round {}: loss {:.4} accuracy {} relative residual {:.3e}",
            r.round,
            r.train_loss,
            r.eval_accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
            r.relative_residual
        );
    })?;
    let final_accuracy = outcome.history.last().and_then(|r| r.eval_accuracy);
    let meta = ModelMeta {
        seed: Some(config.seed),
        final_lr: pretrained.meta.final_lr,
        test_accuracy: final_accuracy,
    };
    let model = QuantizedModel::from_targets(arch.clone(), &outcome.state.g, &outcome.params())?.with_meta(meta);
    let encoding = if config.quantize.packed { CodeEncoding::Packed } else { CodeEncoding::Int8 };
    model.save(&config.out.join(QUANTIZED_FILE), encoding)?;
    write_history_csv(fs::File::create(config.out.join(ADMM_CSV))?, &outcome.history, &arch.layer_names(), config.seed)?;
    println!("stop={:?}", outcome.stop);
    if let Some(acc) = final_accuracy {
        println!("test_accuracy={acc}");
    }
    println!("model={}", config.out.join(QUANTIZED_FILE).display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(dir) = &args.data_dir {
        config.data_dir = dir.clone();
    }
    let model = QuantizedModel::load(&args.model)?;
    let data = match args.split {
        SplitArg::Test => load_data(&config)?.1,
        SplitArg::Train => {
            let (images, labels) = split_paths(&config.data_dir, Split::Train)?;
            load_idx(&images, &labels, Split::Train, None)?
        }
    };
    let acc = accuracy(&model.arch, &model.params(), &data)?;
    println!("samples={}", data.len());
    println!("accuracy={acc}");
    Ok(())
}

pub fn cmd_export(args: &ExportArgs) -> Result<()> {
    let model = QuantizedModel::load(&args.model)?;
    let encoding = if args.packed { CodeEncoding::Packed } else { CodeEncoding::Int8 };
    model.save(&args.out, encoding)?;
    println!("wrote {} ({} bytes)", args.out.display(), fs::metadata(&args.out)?.len());
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let model = QuantizedModel::load(&args.model)?;
    let info = model.inspect();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if args.json {
        let text = serde_json::to_string_pretty(&info).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{text}")?;
        return Ok(());
    }
    writeln!(out, "layer\tkind\talphabet\talpha\tzero_fraction\tweights\tbits\tpacked_bytes")?;
    for l in &info {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.4}\t{}\t{}\t{}",
            l.name,
            l.kind,
            l.alphabet,
            l.alpha.map(|a| a.to_string()).unwrap_or_else(|| "-".into()),
            l.zero_fraction,
            l.weights,
            l.bits_per_weight,
            l.packed_bytes
        )?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}
