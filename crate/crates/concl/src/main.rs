use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use concl::commands::{self, CmdError, MasksArgs, PretrainArgs, ProbeArgs, SynthArgs};

#[derive(Parser)]
#[command(name = "concl", version, about = "Concept contrastive pre-training at desk scale")]
struct Cli {
    /// Threads for the data pipeline. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train an encoder pair.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `synth` or a folder of PNG/PPM/PGM images.
        #[arg(long, default_value = "synth")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<u32>,
    },
    /// Write the concept mask of one image as a PGM.
    Masks {
        /// grid, fh or bootstrap.
        #[arg(long)]
        gen: String,
        #[arg(long, default_value_t = 3)]
        s: usize,
        #[arg(long, default_value_t = commands_default_scale())]
        scale: f64,
        /// Defaults to the scale.
        #[arg(long)]
        min_size: Option<usize>,
        #[arg(long, default_value_t = 0.8)]
        sigma: f64,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Feature stage 1..=5 clustered by bootstrap.
        #[arg(long, default_value_t = 4)]
        stage: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long = "in")]
        input: PathBuf,
        /// Checkpoint whose key encoder bootstrap clusters.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dense linear probe, kNN and proposal purity on synthetic data.
    Probe {
        /// Without one, a freshly initialised encoder is probed.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Configuration for the fresh encoder when no checkpoint is given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// online or key.
        #[arg(long, default_value = "online")]
        encoder: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        stage: usize,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        n_train: usize,
        #[arg(long, default_value_t = 128)]
        n_eval: usize,
        #[arg(long, default_value_t = 0)]
        synth_seed: u64,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = concl_core::gradcheck::INSTANCES)]
        instances: usize,
    },
    /// Write the synthetic texture dataset to disk.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 640)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 6)]
        regions: usize,
        #[arg(long, default_value_t = 12)]
        textures: usize,
    },
}

const fn commands_default_scale() -> f64 {
    concl::config::DEFAULT_FH_SCALE
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Pretrain { config, data, out, resume, stop_after } => commands::pretrain(&PretrainArgs {
            config,
            data,
            out,
            resume,
            workers: cli.workers,
            stop_after,
        }),
        Command::Masks { gen, s, scale, min_size, sigma, k, stage, iters, input, ckpt, out, size, seed } => {
            let n = commands::masks(&MasksArgs { gen, s, scale, min_size, sigma, k, stage, iters, input, ckpt, out, size, seed })?;
            println!("K_effective {n}");
            Ok(())
        }
        Command::Probe { ckpt, config, encoder, out, stage, epochs, seed, n_train, n_eval, synth_seed } => {
            let r = commands::probe(&ProbeArgs { ckpt, config, encoder, out, stage, epochs, seed, n_train, n_eval, synth_seed })?;
            println!("miou {:.4} knn {:.4} purity {:.4}", r.miou, r.knn_acc, r.purity);
            Ok(())
        }
        Command::Gradcheck { out, seed, instances } => commands::gradcheck_cmd(&out, seed, instances),
        Command::Synth { out, seed, n, size, regions, textures } => commands::synth(&SynthArgs { out, seed, n, size, regions, textures }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).target(env_logger::Target::Stderr).init();
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
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
