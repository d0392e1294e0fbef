use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layerprune::pipeline::{PipelineConfig, Stage, Workspace};
use layerprune::Error;

/// Depth pruning for 1D modulation-classification CNNs.
#[derive(Debug, Parser)]
#[command(name = "layerprune", version)]
struct Cli {
    /// TOML configuration file (defaults are used when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for scoring and evaluation (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the modulation dataset.
    GenData,
    /// Train the baseline network.
    Train,
    /// Unit-by-unit similarity matrix and its row sums.
    Similarity,
    /// Segment the row-sum profile into k blocks.
    Partition,
    /// Score candidate unit sets and pick one per block.
    Select,
    /// Reassemble the pruned network and fine-tune it.
    Finetune,
    /// Write the report CSV.
    Report,
    /// similarity, partition, select, finetune and report in one go.
    Prune,
    /// Sweep metric and k, recording the retained units.
    Ablation,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::GenData => Stage::GenData,
            Command::Train => Stage::Train,
            Command::Similarity => Stage::Similarity,
            Command::Partition => Stage::Partition,
            Command::Select => Stage::Select,
            Command::Finetune => Stage::Finetune,
            Command::Report => Stage::Report,
            Command::Prune => Stage::Prune,
            Command::Ablation => Stage::Ablation,
        }
    }
}

/// 1 for problems with the inputs, 2 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig { .. } | Error::MissingArtifact { .. } => 1,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut config = match &cli.config {
        Some(path) if !path.exists() => {
            return Err(Error::InvalidConfig {
                key: "--config".into(),
                message: format!("{} does not exist", path.display()),
            })
        }
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = load_config(cli)?;
    let mut ws = Workspace::open(config)?;
    ws.run(cli.command.stage())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "level={} {}", record.level().as_str().to_lowercase(), record.args()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
