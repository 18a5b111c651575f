//! `tridiff`: preprocess OBJ corpora into quantized-soup datasets, train the
//! per-face diffusion denoiser, sample new meshes, evaluate generation
//! quality, and inspect binary artifacts.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
//! honors `--seed` and `--threads`; outputs are byte-identical across runs
//! and thread counts. Commands that write into an output directory echo
//! their fully resolved configuration to `config.json` before doing work.

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use tridiff::checkpoint::DenoiserCheckpoint;
use tridiff::dataset::DatasetFile;
use tridiff::denoiser::DenoiserConfig;
use tridiff::metrics::{evaluate, EvalConfig};
use tridiff::optim::OptimizerConfig;
use tridiff::preprocess::{build_dataset, DatasetConfig};
use tridiff::sampler::{generate_batch, SampleRequest};
use tridiff::schedule::ScheduleConfig;
use tridiff::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "tridiff", version, about = "Discrete-diffusion triangle-soup mesh generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build train/test dataset files from an OBJ corpus (one subdirectory
    /// per class).
    Preprocess(PreprocessArgs),
    /// Train the denoiser on a dataset file.
    Train(TrainArgs),
    /// Generate meshes from a trained checkpoint.
    Sample(SampleArgs),
    /// Compute MMD / COV / 1-NNA / JSD between two mesh directories.
    Eval(EvalArgs),
    /// Print the header and shape summary of a dataset or checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every per-section seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread cap. Outputs do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Corpus root: class subdirectories containing .obj files.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for train.pdds / test.pdds / report.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (.pdds).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Steps between periodic checkpoints (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SampleArgs {
    /// Trained checkpoint (.pdck).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Object class to condition on.
    #[arg(long)]
    class: Option<u32>,
    #[arg(long)]
    count: Option<usize>,
    /// Reverse-diffusion steps; below the trained T subsamples the schedule.
    #[arg(long)]
    steps: Option<usize>,
    /// Fixed face count (default: drawn from the training histogram).
    #[arg(long)]
    faces: Option<usize>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of generated meshes.
    #[arg(long)]
    gen: PathBuf,
    /// Directory of reference meshes.
    #[arg(long = "ref", value_name = "REF")]
    reference: PathBuf,
    /// Optional output directory for report.json + config.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Surface points sampled per mesh.
    #[arg(long)]
    points: Option<usize>,
    /// JSD occupancy-grid resolution.
    #[arg(long)]
    grid: Option<usize>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct InspectArgs {
    /// Dataset (.pdds) or checkpoint (.pdck) file.
    #[arg(long)]
    path: PathBuf,
}

// ---------------------------------------------------------------------------
// Run configuration.

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct SampleSection {
    class: u32,
    count: usize,
    steps: Option<usize>,
    face_count: Option<usize>,
    seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            class: 0,
            count: 8,
            steps: None,
            face_count: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    dataset: DatasetConfig,
    denoiser: DenoiserConfig,
    optimizer: OptimizerConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    /// Warmup length in epochs; converted to steps once the dataset size is
    /// known.
    warmup_epochs: usize,
    sample: SampleSection,
    eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            denoiser: DenoiserConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            warmup_epochs: 200,
            sample: SampleSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn runtime<E: std::fmt::Display>(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.dataset.seed = seed;
        config.train.seed = seed;
        config.sample.seed = seed;
        config.eval.seed = seed;
    }
    let threads = common.threads.unwrap_or(1).max(1);
    config.dataset.threads = threads;
    config.train.threads = threads;
    config.eval.threads = threads;
    Ok(config)
}

/// Writes the fully resolved configuration before any work happens.
fn echo_config(out_dir: &Path, config: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let text = serde_json::to_string_pretty(config).map_err(CliError::runtime)?;
    std::fs::write(out_dir.join("config.json"), text + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write config.json: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands.

fn cmd_preprocess(args: &PreprocessArgs) -> Result<(), CliError> {
    if !args.input.is_dir() {
        return Err(CliError::Usage(format!(
            "--input {} is not a directory",
            args.input.display()
        )));
    }
    let config = load_config(&args.common)?;
    echo_config(&args.out, &config)?;
    let output = build_dataset(&args.input, &config.dataset).map_err(CliError::runtime)?;
    output
        .train
        .write_to(&args.out.join("train.pdds"))
        .map_err(CliError::runtime)?;
    output
        .test
        .write_to(&args.out.join("test.pdds"))
        .map_err(CliError::runtime)?;
    let report = serde_json::to_string_pretty(&output.report).map_err(CliError::runtime)?;
    std::fs::write(args.out.join("report.json"), report + "\n").map_err(CliError::runtime)?;
    println!(
        "wrote {} train records, {} test records across {} classes",
        output.report.total_train_records,
        output.report.total_test_records,
        output.report.classes.len()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    if !args.dataset.is_file() {
        return Err(CliError::Usage(format!(
            "--dataset {} is not a file",
            args.dataset.display()
        )));
    }
    let mut config = load_config(&args.common)?;
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        config.train.batch_size = batch;
    }
    if let Some(every) = args.checkpoint_every {
        config.train.checkpoint_every = every;
    }

    let dataset = DatasetFile::read_from(&args.dataset).map_err(CliError::runtime)?;
    if dataset.records.is_empty() {
        return Err(CliError::Runtime("dataset has no records".into()));
    }

    // Data-determined model dimensions.
    config.denoiser.categories = 1usize << dataset.header.bits;
    config.denoiser.max_faces = dataset.header.max_faces as usize;
    config.denoiser.class_count = dataset.header.class_names.len();

    // Epoch-based warmup and total resolved against the dataset size.
    let batch = config.train.batch_size.max(1).min(dataset.records.len());
    let steps_per_epoch = dataset.records.len().div_ceil(batch) as u64;
    config.optimizer.total_steps = (steps_per_epoch * config.train.epochs as u64).max(1);
    config.optimizer.warmup_steps =
        (steps_per_epoch * config.warmup_epochs as u64).min(config.optimizer.total_steps - 1);

    echo_config(&args.out, &config)?;

    let resume = match &args.resume {
        Some(path) => Some(DenoiserCheckpoint::read_from(path).map_err(CliError::runtime)?),
        None => None,
    };

    let out_dir = args.out.clone();
    let result = train(
        &dataset,
        &config.denoiser,
        &config.schedule,
        &config.optimizer,
        &config.train,
        resume,
        |ckpt| {
            let path = out_dir.join(format!("checkpoint_step{:08}.pdck", ckpt.step));
            if let Err(e) = ckpt.write_to(&path) {
                eprintln!("warning: failed to write {}: {e}", path.display());
            }
        },
    )
    .map_err(CliError::runtime)?;

    result
        .checkpoint
        .write_to(&args.out.join("checkpoint.pdck"))
        .map_err(CliError::runtime)?;

    let mut csv = String::from("step,loss,lr\n");
    for row in &result.trace {
        csv.push_str(&format!("{},{},{}\n", row.step, row.loss, row.lr));
    }
    std::fs::write(args.out.join("loss_trace.csv"), csv).map_err(CliError::runtime)?;

    if result.diverged {
        return Err(CliError::Runtime(format!(
            "training diverged; last good checkpoint at step {} retained",
            result.checkpoint.step
        )));
    }
    let last_loss = result.trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained to step {} (final loss {:.4} nats/coordinate)",
        result.checkpoint.step, last_loss
    );
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<(), CliError> {
    if !args.checkpoint.is_file() {
        return Err(CliError::Usage(format!(
            "--checkpoint {} is not a file",
            args.checkpoint.display()
        )));
    }
    let mut config = load_config(&args.common)?;
    if let Some(class) = args.class {
        config.sample.class = class;
    }
    if let Some(count) = args.count {
        config.sample.count = count;
    }
    if let Some(steps) = args.steps {
        config.sample.steps = Some(steps);
    }
    if let Some(faces) = args.faces {
        config.sample.face_count = Some(faces);
    }
    echo_config(&args.out, &config)?;

    let ckpt = DenoiserCheckpoint::read_from(&args.checkpoint).map_err(CliError::runtime)?;
    let request = SampleRequest {
        class_label: config.sample.class,
        count: config.sample.count,
        steps: config.sample.steps,
        seed: config.sample.seed,
        face_count: config.sample.face_count,
        threads: config.train.threads,
    };
    let output = generate_batch(&ckpt, &request, &args.out).map_err(CliError::runtime)?;
    let ok = output.manifest.iter().filter(|r| r.path.is_some()).count();
    println!(
        "generated {}/{} meshes into {}",
        ok,
        output.manifest.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    for (flag, dir) in [("--gen", &args.gen), ("--ref", &args.reference)] {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{flag} {} is not a directory", dir.display())));
        }
    }
    let mut config = load_config(&args.common)?;
    if let Some(points) = args.points {
        config.eval.points_per_cloud = points;
    }
    if let Some(grid) = args.grid {
        config.eval.grid_resolution = grid;
    }
    if let Some(out) = &args.out {
        echo_config(out, &config)?;
    }
    let report = evaluate(&args.gen, &args.reference, &config.eval).map_err(CliError::runtime)?;
    let text = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    println!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out.join("report.json"), text + "\n").map_err(CliError::runtime)?;
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&args.path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", args.path.display())))?;
    if bytes.len() < 4 {
        return Err(CliError::Runtime("file too short for a magic number (offset 0)".into()));
    }
    match &bytes[..4] {
        b"PDDS" => {
            let file = DatasetFile::from_bytes(&bytes).map_err(CliError::runtime)?;
            println!("dataset file {}", args.path.display());
            println!("  bits: {} ({} categories)", file.header.bits, 1u32 << file.header.bits);
            println!("  max_faces: {}", file.header.max_faces);
            println!("  records: {}", file.records.len());
            let counts = file.class_histogram();
            for (i, name) in file.header.class_names.iter().enumerate() {
                println!("  class {i} `{name}`: {} records", counts[i]);
            }
            for (i, hist) in file.face_count_histogram().iter().enumerate() {
                if hist.is_empty() {
                    continue;
                }
                let min = hist.keys().next().unwrap();
                let max = hist.keys().last().unwrap();
                let total: u64 = hist.iter().map(|(&f, &n)| f as u64 * n as u64).sum();
                let n: u64 = hist.values().map(|&n| n as u64).sum();
                println!(
                    "  class {i} face counts: min {min}, mean {:.1}, max {max}",
                    total as f64 / n as f64
                );
            }
        }
        b"PDCK" => {
            let ckpt = DenoiserCheckpoint::from_bytes(&bytes).map_err(CliError::runtime)?;
            println!("checkpoint {}", args.path.display());
            println!("  step: {}", ckpt.step);
            println!(
                "  config: {}",
                serde_json::to_string(&ckpt.params.config).map_err(CliError::runtime)?
            );
            println!(
                "  schedule: {}",
                serde_json::to_string(&ckpt.schedule).map_err(CliError::runtime)?
            );
            println!("  classes: {:?}", ckpt.class_names);
            println!("  parameters: {}", ckpt.params.parameter_count());
            println!(
                "  optimizer state: {}",
                if ckpt.optimizer_state.is_some() { "present" } else { "absent" }
            );
            for (name, tensor) in ckpt.params.tensors.iter() {
                println!("    {name}: {:?}", tensor.dims());
            }
        }
        other => {
            return Err(CliError::Runtime(format!(
                "bad magic {:?} at offset 0 (expected PDDS or PDCK)",
                other
            )));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("usage error: {message}");
            eprintln!("run `tridiff --help` for usage");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
