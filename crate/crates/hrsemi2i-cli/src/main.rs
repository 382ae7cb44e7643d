use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hrsemi2i::error::{Error, Result};
use hrsemi2i::pipeline::{
    evaluate_stage, plot_stage, prepare_stage, stylize_stage, synth_stage, train_da_stage,
    train_seg_stage, PipelineConfig, SegVariant, Workspace,
};

#[derive(Parser)]
#[command(
    name = "hrsemi2i",
    about = "Style-transfer domain adaptation for multiband raster tiles, \
             with downstream segmentation scoring",
    arg_required_else_help = true
)]
struct Cli {
    /// Pipeline configuration JSON (required by synth, prepare, train-da, train-seg)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the configured seed for every stage
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Workspace directory that holds all pipeline artifacts
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired two-domain synthetic dataset under <out>/data
    Synth,
    /// Copy the dataset into <out>/prepared, smoothing target tiles when configured
    Prepare,
    /// Train the adaptation mapping; logs and checkpoints under <out>/da
    TrainDa,
    /// Map every prepared source tile into the target style under <out>/stylized
    Stylize,
    /// Train a segmentation model on source tiles
    TrainSeg {
        /// Train on originals only instead of originals plus stylized copies
        #[arg(long)]
        baseline: bool,
    },
    /// Score stored segmentation models on the target tiles, writing <out>/eval.csv
    Evaluate {
        /// Also score the baseline model as the first row
        #[arg(long)]
        baseline: bool,
    },
    /// Render the per-band pixel-value distribution figure under <out>/plots
    Plot,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric { .. } => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("--config <path> is required for this command"))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Error::config("--out <dir> is required"))?;
    let ws = Workspace::new(out);
    match cli.command {
        Command::Synth => {
            let cfg = load_config(&cli)?;
            let manifest = synth_stage(&cfg, &ws)?;
            println!(
                "generated {} scenes per domain under {}",
                cfg.synth.scenes,
                ws.data_dir().display()
            );
            println!("manifest: {} entries", manifest.entries.len());
        }
        Command::Prepare => {
            let cfg = load_config(&cli)?;
            let manifest = prepare_stage(&cfg, &ws)?;
            println!(
                "prepared {} tiles under {}",
                manifest.entries.len(),
                ws.prepared_dir().display()
            );
        }
        Command::TrainDa => {
            let cfg = load_config(&cli)?;
            println!(
                "training the adaptation mapping for {} steps; follow {}",
                cfg.da.iter_max,
                ws.da_dir().join(hrsemi2i::trainer::LOSS_LOG_NAME).display()
            );
            let state = train_da_stage(&cfg, &ws)?;
            println!(
                "finished at iteration {}; checkpoint in {}",
                state.iteration,
                ws.da_checkpoint().display()
            );
        }
        Command::Stylize => {
            let written = stylize_stage(&ws)?;
            println!("stylized {} tiles into {}", written.len(), ws.stylized_dir().display());
        }
        Command::TrainSeg { baseline } => {
            let cfg = load_config(&cli)?;
            let variant = if baseline { SegVariant::Baseline } else { SegVariant::Adapted };
            println!(
                "training {} segmentation for {} steps",
                variant.row_name(),
                cfg.seg.iter_max
            );
            train_seg_stage(&cfg, &ws, variant)?;
            println!("checkpoint in {}", ws.seg_dir(variant).display());
        }
        Command::Evaluate { baseline } => {
            let rows = evaluate_stage(&ws, baseline)?;
            for (name, result) in &rows {
                println!("{name}: mIoU {:.4}", result.miou);
            }
            println!("wrote {}", ws.eval_csv().display());
        }
        Command::Plot => {
            let figure = plot_stage(&ws)?;
            println!("wrote {}", figure.display());
        }
    }
    Ok(())
}
