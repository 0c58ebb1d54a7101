//! `hsic` — experiment harness for contrastive pretraining and patch-level
//! classification of hyperspectral scenes.
//!
//! Exit codes (stable; scripts may branch on them):
//!   0  success
//!   2  usage error (unknown command / bad flags)
//!   3  missing or invalid config file
//!   4  dataset or input file not found
//!   5  checkpoint mismatch
//!   6  invalid data (shape, format, degenerate input, non-finite loss)
//!   7  internal error (I/O and everything else)
//!
//! On failure a single machine-readable line is printed to stderr:
//!   error category=<category> message="<text>"

use clap::{Args, Parser, Subcommand};
use hsic_core::baselines::Scheme;
use hsic_core::classifier::FineTuneMode;
use hsic_core::dataset::{self, Task};
use hsic_core::eval::{self, SweepAxis, SweepSpec};
use hsic_core::training::{self, RunConfig, Stage};
use hsic_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hsic", version, about = "Contrastive pretraining and classification for hyperspectral patches", after_help = EXIT_CODE_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

const EXIT_CODE_HELP: &str = "Exit codes:\n  \
    0  success\n  \
    2  usage error\n  \
    3  missing or invalid config file\n  \
    4  dataset not found\n  \
    5  checkpoint mismatch\n  \
    6  invalid data\n  \
    7  internal error\n\n\
    Relative data paths in the config resolve against $HSIC_DATA_DIR when set.";

#[derive(Args)]
struct Common {
    /// TOML experiment config; the single source of truth (flags override).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, results.csv and run.json files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's seed list, e.g. --seed 1,2,3.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Override the config's task.
    #[arg(long)]
    task: Option<Task>,
}

#[derive(Subcommand)]
enum Command {
    /// Tile a scene into patches and write a PatchSet directory + census.
    SamplePatches(Common),
    /// Stage 1: contrastive pretraining of the spectral encoder.
    Pretrain(Common),
    /// Stage 2: supervised fine-tuning on top of a pretrained encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// cl-tune updates the encoder; cl-freeze trains only the head.
        #[arg(long)]
        mode: Option<FineTuneMode>,
    },
    /// Supervised autoencoder baseline from random initialization.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: Option<Scheme>,
    },
    /// Run the base experiment across one axis (reduction, hidden, temperature).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Maximum worker processes (accepted for script compatibility;
        /// points currently run sequentially in-process).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Export flattened hidden representations to embeddings.csv.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint directory (defaults to the config's).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Regenerate results.csv exactly from the persisted run.json files.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn category_and_code(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("invalid-config", 3),
        Error::DataNotFound(_) => ("dataset-not-found", 4),
        Error::CheckpointMismatch(_) => ("checkpoint-mismatch", 5),
        Error::ShapeMismatch { .. }
        | Error::InvalidArgument(_)
        | Error::DegenerateInput(_)
        | Error::Npy { .. }
        | Error::NonFiniteLoss { .. } => ("invalid-data", 6),
        _ => ("internal", 7),
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    if !common.config.exists() {
        return Err(Error::Config(format!(
            "config file not found: {}",
            common.config.display()
        )));
    }
    let mut config = training::load_config(&common.config)?;
    if let Some(seeds) = &common.seed {
        config.seeds = seeds.clone();
    }
    if let Some(task) = common.task {
        config.task = task;
    }
    Ok(config)
}

fn print_metrics(metrics: &hsic_core::training::RunMetrics) {
    for s in &metrics.per_seed {
        println!(
            "seed {}: accuracy {:.2}% (best epoch {}, {:.1}s)",
            s.seed, s.accuracy, s.best_epoch, s.wall_time_s
        );
    }
    println!(
        "{} [{}]: mean accuracy {:.2}% over {} seeds ({})",
        metrics.run_name(),
        metrics.metric,
        metrics.mean_accuracy,
        metrics.per_seed.len(),
        metrics.config_hash
    );
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SamplePatches(common) => {
            let config = load_config(&common)?;
            let set = training::load_patches(&config)?;
            let census = set.census();
            let dir = common.out.join("patches");
            dataset::save_patchset(&set, &dir)?;
            println!(
                "{} ({}): {} patches ({} mixed, {} uniform) -> {}",
                config.dataset,
                config.task,
                census.total,
                census.mixed,
                census.uniform,
                dir.display()
            );
        }
        Command::Pretrain(common) => {
            let mut config = load_config(&common)?;
            config.stage = Stage::Pretrain;
            let metrics = training::run_experiment(&config, &common.out)?;
            for s in &metrics.per_seed {
                println!(
                    "seed {}: best val loss {:.4} at epoch {} ({:.1}s)",
                    s.seed, s.best_val_metric, s.best_epoch, s.wall_time_s
                );
            }
            println!("checkpoints written under {}", common.out.join("checkpoints").display());
        }
        Command::Finetune { common, mode } => {
            let mut config = load_config(&common)?;
            config.stage = Stage::Finetune;
            if let Some(mode) = mode {
                config.mode = mode;
            }
            let metrics = training::run_experiment(&config, &common.out)?;
            print_metrics(&metrics);
        }
        Command::Baseline { common, scheme } => {
            let mut config = load_config(&common)?;
            config.stage = Stage::Baseline;
            if let Some(scheme) = scheme {
                config.scheme = Some(scheme);
            }
            let metrics = training::run_experiment(&config, &common.out)?;
            print_metrics(&metrics);
        }
        Command::Sweep { common, axis, jobs } => {
            let _ = jobs;
            let config = load_config(&common)?;
            let spec = SweepSpec {
                axis,
                base: config,
            };
            let result = eval::run_sweep(&spec, &common.out)?;
            for (value, metrics) in &result.points {
                println!(
                    "{} = {value}: mean accuracy {:.2}%",
                    result.axis, metrics.mean_accuracy
                );
            }
            println!(
                "wrote {} and {}",
                common.out.join(format!("sweep_{}.csv", result.axis)).display(),
                common.out.join(format!("sweep_{}.svg", result.axis)).display()
            );
        }
        Command::ExportEmbeddings { common, checkpoint } => {
            let config = load_config(&common)?;
            let ckpt = checkpoint
                .or_else(|| config.checkpoint_dir.clone())
                .unwrap_or_else(|| {
                    training::checkpoint_path(&common.out, &config, config.seeds[0])
                });
            let (encoder, _manifest) = training::load_encoder(&ckpt)?;
            let set = training::load_patches(&config)?;
            let (normalized, _plan) =
                training::normalized_for_seed(&set, &config, config.seeds[0])?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("embeddings.csv");
            eval::export_embeddings(&encoder, &normalized, &path)?;
            println!("wrote {} rows to {}", normalized.len(), path.display());
        }
        Command::Report { out } => {
            let all = eval::report(&out)?;
            println!(
                "regenerated {} from {} runs",
                out.join("results.csv").display(),
                all.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = category_and_code(&e);
            eprintln!("error category={category} message=\"{e}\"");
            ExitCode::from(code)
        }
    }
}
