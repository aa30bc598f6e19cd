mod jobs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semanon::anonymizer::Mode;
use semanon::config::RunConfig;
use semanon::latent::AttributeSlot;

use jobs::{Failure, Job};

/// Face anonymization with a semantically compositional generator.
#[derive(Parser, Debug)]
#[command(name = "semanon", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, env = "VERA_CONFIG", global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed used by the chosen command.
    #[arg(long, env = "VERA_SEED", global = true)]
    seed: Option<u64>,
    /// Model checkpoint; a fresh model from the configuration is used when absent.
    #[arg(long, env = "VERA_CHECKPOINT", global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory; must be empty or not exist.
    #[arg(long, env = "VERA_OUT_DIR", global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for per-image work.
    #[arg(long, env = "VERA_WORKERS", global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Inputs {
    /// Input images (8-bit PNG at the model resolution).
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Label maps matching the images; defaults to `<stem>_labels.png` beside each image.
    #[arg(long, num_args = 1..)]
    labels: Vec<PathBuf>,
    /// Treat the two images as a pair of the same person.
    #[arg(long)]
    pair: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive training of the generator and mapping network.
    Train {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Project images into the extended latent space.
    Invert(Inputs),
    /// Anonymize single images or a pair.
    Anonymize {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, env = "VERA_MODE")]
        mode: Option<Mode>,
        /// Components kept from the input (clinical mode), comma separated.
        #[arg(long, env = "VERA_PRESERVE", value_delimiter = ',')]
        preserve: Vec<String>,
        /// Reuse latents written by `invert` instead of optimizing again.
        #[arg(long)]
        from_latents: Option<PathBuf>,
    },
    /// Metrics for the output directory of an `anonymize` run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Random images from the generator.
    Sample {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Renders a sweep along the main principal direction of one attribute slot.
    PcaSweep {
        #[arg(long, default_value = "pose")]
        slot: AttributeSlot,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        /// Sweep half-width in standard deviations.
        #[arg(long, default_value_t = 2.0)]
        extent: f64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Re-runs a command from its manifest and checks the outputs are byte-identical.
    Replay { manifest: PathBuf },
}

fn default_labels(images: &[PathBuf]) -> Vec<PathBuf> {
    images
        .iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            p.with_file_name(format!("{stem}_labels.png"))
        })
        .collect()
}

fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    std::path::absolute(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
}

fn resolve_inputs(inputs: Inputs) -> Result<(Vec<PathBuf>, Vec<PathBuf>, bool), Failure> {
    let labels = if inputs.labels.is_empty() { default_labels(&inputs.images) } else { inputs.labels };
    if labels.len() != inputs.images.len() {
        return Err(Failure::Usage(format!("{} images but {} label maps", inputs.images.len(), labels.len())));
    }
    if inputs.pair && inputs.images.len() != 2 {
        return Err(Failure::Usage("--pair needs exactly two images".into()));
    }
    let images = inputs.images.iter().map(|p| absolute(p)).collect::<Result<_, _>>()?;
    let labels = labels.iter().map(|p| absolute(p)).collect::<Result<_, _>>()?;
    Ok((images, labels, inputs.pair))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out_dir = cli.out_dir.ok_or_else(|| Failure::Usage("--out-dir is required".into()))?;
    if cli.workers == 0 {
        return Err(Failure::Usage("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if let Command::Replay { manifest } = cli.command {
        return pool.install(|| jobs::replay(&manifest, &out_dir));
    }
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let checkpoint = cli.checkpoint.as_deref().map(absolute).transpose()?;
    let job = match cli.command {
        Command::Train { steps } => {
            if let Some(s) = cli.seed {
                config.seeds.training = s;
            }
            Job::Train { steps: steps.unwrap_or(config.model.training_steps) }
        }
        Command::Invert(inputs) => {
            let (images, labels, pair) = resolve_inputs(inputs)?;
            Job::Invert { images, labels, pair }
        }
        Command::Anonymize { inputs, mode, preserve, from_latents } => {
            if let Some(s) = cli.seed {
                config.seeds.anonymize = s;
            }
            if let Some(m) = mode {
                config.request.mode = m;
            }
            if !preserve.is_empty() {
                config.request.preserve = preserve;
            }
            let (images, labels, pair) = resolve_inputs(inputs)?;
            let from_latents = from_latents.as_deref().map(absolute).transpose()?;
            Job::Anonymize { images, labels, pair, from_latents }
        }
        Command::Evaluate { run } => Job::Evaluate { run: absolute(&run)? },
        Command::Sample { count } => {
            if let Some(s) = cli.seed {
                config.seeds.sample = s;
            }
            Job::Sample { count }
        }
        Command::PcaSweep { slot, frames, extent, samples } => {
            if let Some(s) = cli.seed {
                config.seeds.sample = s;
            }
            Job::PcaSweep { slot, frames, extent, samples }
        }
        Command::Replay { .. } => unreachable!("handled above"),
    };
    config.validate()?;
    pool.install(|| jobs::execute(&job, &config, checkpoint.as_deref(), &out_dir))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VERA_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
