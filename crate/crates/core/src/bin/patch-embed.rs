use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand, ValueEnum};
use log::error;

use patch_embed::cli_pipeline::{run_subcommand, RunConfig, Subcommand};
use patch_embed::synth::{natural_corpus, object_corpus, write_corpus};
use patch_embed::Error;

#[derive(Parser)]
#[command(
    name = "patch-embed",
    version,
    about = "Self-supervised patch embeddings: train, embed, segment, specialize, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.epochs=20 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory (same as out_dir=)
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores
    #[arg(long)]
    workers: Option<usize>,
    /// Single worker, reproducible bit for bit
    #[arg(long)]
    deterministic: bool,
    /// Corpus manifest replacing the subcommand's default input
    #[arg(short, long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    Natural,
    Object,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Dump one epoch's triplet plan
    Sample(RunArgs),
    /// Train the encoder; writes checkpoints and the loss trace
    Train(RunArgs),
    /// Write deep images for a corpus
    Embed(RunArgs),
    /// Render deep images as pseudo-RGB PNGs
    Visualize(RunArgs),
    /// Segment deep images into label maps
    Segment(RunArgs),
    /// Fine-tune on an object corpus with self-generated segments
    Specialize(RunArgs),
    /// Same/different segment AUC against the raw-pixel baseline
    Eval(RunArgs),
    /// Summarize traces and reports of a run
    Report(RunArgs),
    /// Generate a procedural corpus with exact label maps
    Synth {
        #[arg(long, value_enum, default_value = "natural")]
        kind: CorpusKind,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 192)]
        width: usize,
        #[arg(long, default_value_t = 192)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Omit label maps from the manifest
        #[arg(long)]
        no_labels: bool,
        /// Image id prefix, numbered from 0000
        #[arg(long)]
        prefix: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn run_config(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut overrides = Vec::new();
    if let Some(out) = &args.out {
        overrides.push(format!("out_dir={}", out.display()));
    }
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(w) = args.workers {
        overrides.push(format!("workers={w}"));
    }
    if args.deterministic {
        overrides.push("deterministic=true".into());
    }
    overrides.extend(args.overrides.iter().cloned());
    RunConfig::load(args.config.as_deref(), &overrides)
}

fn execute(command: Command) -> Result<(), Error> {
    let (sub, args) = match command {
        Command::Synth {
            kind,
            count,
            width,
            height,
            seed,
            no_labels,
            prefix,
            out,
        } => {
            let mut records = match kind {
                CorpusKind::Natural => natural_corpus(count, width, height, seed),
                CorpusKind::Object => object_corpus(count, width, height, seed),
            };
            if let Some(prefix) = prefix {
                for (i, r) in records.iter_mut().enumerate() {
                    r.image_id = format!("{prefix}{i:04}");
                }
            }
            let manifest = write_corpus(&out, &records, !no_labels)?;
            println!("{}", manifest.display());
            return Ok(());
        }
        Command::Sample(a) => (Subcommand::Sample, a),
        Command::Train(a) => (Subcommand::Train, a),
        Command::Embed(a) => (Subcommand::Embed, a),
        Command::Visualize(a) => (Subcommand::Visualize, a),
        Command::Segment(a) => (Subcommand::Segment, a),
        Command::Specialize(a) => (Subcommand::Specialize, a),
        Command::Eval(a) => (Subcommand::Eval, a),
        Command::Report(a) => (Subcommand::Report, a),
    };
    let config = run_config(&args)?;
    let outcome = run_subcommand(sub, &config, args.manifest.as_deref())?;
    for path in outcome.artifacts {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
