//! `patho`: ingest fundus datasets, train the detector and the generator,
//! extract and edit lesion descriptors, synthesize, evaluate and serve.
//!
//! Output file paths go to stdout, one per line; logs go to stderr
//! (`RUST_LOG` controls verbosity).

mod commands;
mod config;
mod data;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::Preset;

#[derive(Debug, Parser)]
#[command(name = "patho", version, about)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the preset of the run configuration.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Preprocess a dataset manifest into a store: square padding, FOV
    /// masks, crop and resize.
    Ingest {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small procedural dataset (images, vessel masks, manifest).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the severity detector on the graded train split of a store.
    TrainDetector {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured number of steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Extract lesion descriptors from one image or a whole store split.
    ExtractDescriptors(commands::ExtractArgs),
    /// Train the descriptor-conditioned generator.
    TrainGan(commands::TrainGanArgs),
    /// Synthesize a fundus image from a vessel mask and descriptors.
    Generate(commands::GenerateArgs),
    /// Edit a descriptor file. Edits apply in this order: --ops file,
    /// --move, --clone, --remove, --remove-all, --keep-fraction, --multiply.
    Manipulate(commands::ManipulateArgs),
    /// FID (and MSE for paired sets) between two image folders.
    Evaluate(commands::EvaluateArgs),
    /// Score the severity of one image.
    Severity {
        image: PathBuf,
        #[command(flatten)]
        model: commands::ModelSource,
    },
    /// Severity against lesion-count scale for a store split.
    SeverityCurve(commands::CurveArgs),
    /// Train one generator per perceptual weight and render a gallery.
    Ablation(commands::AblationArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Service config (TOML) listing the models to load.
    #[arg(long = "models")]
    models: Option<PathBuf>,
    #[arg(long)]
    bind: Option<std::net::SocketAddr>,
    /// Register the seeded demo models.
    #[arg(long)]
    demo: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    if let Some(p) = cli.preset {
        cfg.preset = p;
    }
    match cli.command {
        Command::Ingest { manifest, out } => commands::ingest(&cfg, &manifest, &out),
        Command::SynthData { out, count, size, seed } => {
            let manifest = patho_core::synthetic::write_synthetic_dataset(&out, count, size, seed)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::TrainDetector { store, out, steps } => commands::train_detector(&cfg, &store, &out, steps),
        Command::ExtractDescriptors(a) => commands::extract(&cfg, a),
        Command::TrainGan(a) => commands::train_gan(&cfg, a),
        Command::Generate(a) => commands::generate(a),
        Command::Manipulate(a) => commands::manipulate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Severity { image, model } => commands::severity(&image, model),
        Command::SeverityCurve(a) => commands::severity_curve(&cfg, a),
        Command::Ablation(a) => commands::ablation(&cfg, a),
        Command::Serve(a) => serve(a),
    }
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut sc = match &args.models {
        Some(p) => patho_service::ServiceConfig::load(p)?,
        None => patho_service::ServiceConfig::default(),
    };
    if let Some(b) = args.bind {
        sc.bind = b;
    }
    sc.demo |= args.demo;
    let registry = sc.build_registry()?;
    if registry.is_empty() {
        log::warn!("no models loaded; pass --models or --demo");
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(sc.bind).await?;
        println!("http://{}", listener.local_addr()?);
        patho_service::serve(listener, registry).await
    })?;
    Ok(())
}
