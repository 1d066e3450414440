use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nrtr_cli::{
    load_synth_config, load_train_config, run_blockify, run_eval, run_infer, run_synth, run_train, swc_check,
    CliError, InferArgs, TrainArgs,
};
use nrtr_core::connect::ForestParams;

#[derive(Parser)]
#[command(name = "nrtr", version, about = "Neuron reconstruction as point-set prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired synthetic volumes and SWC ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Training output directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Reconstruct a volume into an SWC forest.
    Infer {
        /// Parameter file or training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        upsample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 3.0)]
        tau: f64,
        /// Longest edge kept, in working voxels.
        #[arg(long, default_value_t = 30.0)]
        cap: f64,
        #[arg(long, default_value_t = 1.0)]
        merge_eps: f64,
    },
    /// Voxel overlap scores of a reconstruction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Grid size `X,Y,Z`; defaults to the extent of both forests.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SWC file utilities.
    Swc {
        #[command(subcommand)]
        command: SwcCommand,
    },
    /// List the blocks a volume is cut into.
    Blockify {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        swc: Option<PathBuf>,
        /// Train config whose empty-block thresholds are applied.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SwcCommand {
    /// Validate SWC files; exits 2 if any is invalid.
    Check {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected X,Y,Z".to_string())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { config, seed, out } => {
            let cfg = load_synth_config(config.as_deref())?;
            run_synth(&cfg, config.as_deref(), seed, &out)?;
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
            epochs,
            warmup,
        } => {
            run_train(&TrainArgs {
                config,
                data,
                out,
                seed,
                resume,
                epochs,
                warmup,
            })?;
        }
        Command::Infer {
            checkpoint,
            volume,
            out,
            upsample,
            overlap,
            threshold,
            tau,
            cap,
            merge_eps,
        } => {
            run_infer(&InferArgs {
                upsample,
                overlap,
                threshold,
                forest: ForestParams { tau, cap },
                merge_eps,
                ..InferArgs::new(checkpoint, volume, out)
            })?;
        }
        Command::Eval { pred, gt, dims, out } => {
            let report = run_eval(&pred, &gt, dims, out.as_deref())?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Swc {
            command: SwcCommand::Check { files },
        } => {
            let (lines, bad) = swc_check(&files);
            for l in lines {
                println!("{l}");
            }
            if bad > 0 {
                return Err(CliError::InvalidSwc(bad, files.len()));
            }
        }
        Command::Blockify {
            volume,
            swc,
            config,
            block,
            overlap,
            out,
        } => {
            let train = load_train_config(config.as_deref())?.train;
            run_blockify(&volume, swc.as_deref(), block, overlap, &train, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
