//! `fedcgs`: generate synthetic features, split them across clients, run the
//! one-shot simulation, and train personalized local models.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedcgs::dataio::generate_checkerboard;
use fedcgs::feature_expand::{Activation, ExpansionConfig};
use fedcgs::gnb_head::{write_head, DEFAULT_RIDGE_SCALE};
use fedcgs::personalize::{accuracy, alignment_distance, local_train, MlpModel, PersonalizeConfig};
use fedcgs::secure_agg::DEFAULT_FRACTIONAL_BITS;
use fedcgs::server_agg::{read_global, write_global};
use fedcgs::{
    generate_synthetic, partition, read_feature_file, simulate, write_feature_file,
    LabeledFeatureSet, PartitionSpec, SecureMode, SimulationConfig, SyntheticSpec,
};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "fedcgs",
    version,
    about = "One-shot federated learning from feature statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic feature file.
    Generate(GenerateArgs),
    /// Split a feature file across clients, one file per non-empty client.
    Partition(PartitionArgs),
    /// Run the one-shot pipeline and print (or write) a JSON report.
    Simulate(SimulateArgs),
    /// Train prototype-regularized local models from downloaded statistics.
    Personalize(PersonalizeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// `gaussian` (shared isotropic covariance) or `checkerboard` (2-D XOR).
    #[arg(long, default_value = "gaussian")]
    kind: String,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Per class for `gaussian`, per cluster for `checkerboard`.
    #[arg(long, default_value_t = 400)]
    samples: usize,
    #[arg(long, default_value_t = 2.0)]
    mean_scale: f64,
    /// Covariance scale (`gaussian`) or cluster spread (`checkerboard`).
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a test set with the same class structure; each set then
    /// gets half of the generated rows.
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    clients: usize,
    /// Dirichlet concentration; omit for a uniform split.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 10)]
    clients: usize,
    /// Dirichlet concentration; omit for a uniform split.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "off", value_parser = parse_secure)]
    secure_agg: SecureMode,
    #[arg(long, default_value_t = DEFAULT_FRACTIONAL_BITS)]
    fractional_bits: u32,
    /// Project features to this many dimensions before computing statistics.
    #[arg(long)]
    expand_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    expand_seed: u64,
    #[arg(long, default_value = "relu", value_parser = parse_activation)]
    expand_activation: Activation,
    /// Ridge added to the covariance, relative to its average variance.
    #[arg(long, default_value_t = DEFAULT_RIDGE_SCALE)]
    ridge: f64,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the global statistics (JSON plus a `.bin` sidecar next to it).
    #[arg(long)]
    global_out: Option<PathBuf>,
    /// Write the head (JSON plus a `.bin` sidecar next to it).
    #[arg(long)]
    head_out: Option<PathBuf>,
}

#[derive(Args)]
struct PersonalizeArgs {
    /// Global statistics written by `simulate --global-out`.
    #[arg(long)]
    global: PathBuf,
    /// Client feature files; each is split into local train and holdout.
    #[arg(long = "client", required = true)]
    clients: Vec<PathBuf>,
    /// Every k-th row of a client file is held out for evaluation.
    #[arg(long, default_value_t = 5)]
    holdout_every: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    momentum: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_secure(s: &str) -> Result<SecureMode, String> {
    s.parse()
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse()
        .map_err(|e: fedcgs::feature_expand::ExpandError| e.to_string())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(args) => generate(args),
        Command::Partition(args) => partition_file(args),
        Command::Simulate(args) => run_simulation(args),
        Command::Personalize(args) => personalize(args),
    }
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// Alternate blocks of `block` rows between two halves.
fn halves(data: &LabeledFeatureSet, block: usize) -> (LabeledFeatureSet, LabeledFeatureSet) {
    let (a, b): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|i| (i / block).is_multiple_of(2));
    (data.subset(&a), data.subset(&b))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let (data, block) = match args.kind.as_str() {
        "gaussian" => {
            let spec = SyntheticSpec {
                num_classes: args.classes,
                dim: args.dim,
                samples_per_class: args.samples,
                class_mean_scale: args.mean_scale,
                shared_covariance_scale: args.spread,
                seed: args.seed,
            };
            (generate_synthetic(&spec)?, args.classes)
        }
        "checkerboard" => (
            generate_checkerboard(args.samples, args.spread, args.seed)?,
            4,
        ),
        other => bail!("unknown kind {other:?} (expected gaussian or checkerboard)"),
    };
    match &args.test_out {
        Some(test_path) => {
            let (train, test) = halves(&data, block);
            write_feature_file(&train, &args.out)?;
            write_feature_file(&test, test_path)?;
        }
        None => write_feature_file(&data, &args.out)?,
    }
    Ok(())
}

fn partition_file(args: PartitionArgs) -> Result<()> {
    let data = read_feature_file(&args.input)?;
    let spec = match args.alpha {
        Some(alpha) => PartitionSpec::dirichlet(args.clients, alpha, args.seed),
        None => PartitionSpec::uniform(args.clients, args.seed),
    };
    let parts = partition(&data, &spec)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let mut manifest = Vec::with_capacity(parts.len());
    for (i, part) in parts.iter().enumerate() {
        // the file format cannot hold an empty set
        let file = if part.is_empty() {
            None
        } else {
            let name = format!("client_{i:03}.fcgs");
            write_feature_file(part, args.out_dir.join(&name))?;
            Some(name)
        };
        manifest.push(json!({
            "client": i,
            "file": file,
            "samples": part.len(),
            "class_counts": part.class_histogram(),
        }));
    }
    let text = serde_json::to_string_pretty(&json!({ "clients": manifest }))?;
    std::fs::write(args.out_dir.join("manifest.json"), text)?;
    Ok(())
}

fn run_simulation(args: SimulateArgs) -> Result<()> {
    let train = read_feature_file(&args.train)?;
    let test = read_feature_file(&args.test)?;
    let cfg = SimulationConfig {
        clients: args.clients,
        alpha: args.alpha,
        seed: args.seed,
        secure_agg: args.secure_agg,
        fractional_bits: args.fractional_bits,
        expansion: args.expand_dim.map(|output_dim| ExpansionConfig {
            input_dim: train.dim(),
            output_dim,
            seed: args.expand_seed,
            activation: args.expand_activation,
        }),
        ridge_scale: args.ridge,
    };
    let out = simulate(&train, &test, &cfg)?;
    if let Some(p) = &args.global_out {
        write_global(&out.global, p)?;
    }
    if let Some(p) = &args.head_out {
        write_head(&out.head, p)?;
    }
    emit(&out.report.to_json()?, args.report.as_deref())
}

fn personalize(args: PersonalizeArgs) -> Result<()> {
    if args.holdout_every < 2 {
        bail!("--holdout-every must be at least 2");
    }
    let global = read_global(&args.global)?;
    let prototypes = global.prototypes().to_vec();
    let cfg = PersonalizeConfig {
        lambda: args.lambda,
        learning_rate: args.learning_rate,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        momentum: args.momentum,
    };
    let mut results = Vec::with_capacity(args.clients.len());
    for (i, path) in args.clients.iter().enumerate() {
        let data = read_feature_file(path)?;
        if data.num_classes() != global.num_classes() {
            bail!(
                "{}: {} classes, global statistics have {}",
                path.display(),
                data.num_classes(),
                global.num_classes()
            );
        }
        let (held, kept): (Vec<usize>, Vec<usize>) =
            (0..data.len()).partition(|r| r % args.holdout_every == args.holdout_every - 1);
        let (local, holdout) = (data.subset(&kept), data.subset(&held));
        if local.is_empty() {
            bail!("{}: too few rows to train on", path.display());
        }
        // local features live in the space the global prototypes were computed in
        let model = MlpModel::new(
            data.dim(),
            args.hidden,
            global.dim(),
            data.num_classes(),
            args.seed.wrapping_add(i as u64),
        );
        let (trained, report) = local_train(&model, &local, &prototypes, &cfg)
            .with_context(|| format!("training on {}", path.display()))?;
        let holdout_accuracy = if holdout.is_empty() {
            None
        } else {
            Some(accuracy(&trained, &holdout)?)
        };
        results.push(json!({
            "client": path.display().to_string(),
            "train_samples": local.len(),
            "holdout_samples": holdout.len(),
            "train_accuracy": accuracy(&trained, &local)?,
            "holdout_accuracy": holdout_accuracy,
            "alignment_distance": alignment_distance(&trained, &local, &prototypes)?,
            "regularizer": report.epoch_regularizer,
            "loss": report.epoch_loss,
        }));
    }
    let text = serde_json::to_string_pretty(&json!({
        "config": serde_json::to_value(cfg)?,
        "clients": results,
    }))?;
    emit(&text, args.out.as_deref())
}
