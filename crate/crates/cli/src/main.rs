//! `epsilon`: generate synthetic data, train, evaluate, predict, export
//! attention maps and sweep hyper-parameters.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use epsilon_cli::commands::{
    cmd_attn, cmd_eval, cmd_gen, cmd_predict, cmd_sweep, cmd_train, TrainOptions,
};
use epsilon_cli::{Result, RunConfig};
use epsilon_core::metrics::Protocol;

#[derive(Parser, Debug)]
#[command(name = "epsilon", version, about = "Multi-label zero-shot tagging")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Number of semantic groups.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Zsl,
    Gzsl,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset to the data directory.
    Gen,
    /// Train on the data directory; writes checkpoint, history and evaluation.
    Train {
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this epoch is done.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split; prints JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        protocol: ProtocolArg,
        /// Comma-separated top-K values; defaults to the config's `ks`.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Print the top-k labels of each image; unseen labels end in `*`.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Export per-group attention maps as CSV, plus PGM on square token grids.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Export the pooling heads' channel-mean token weights instead.
        #[arg(long)]
        gfp: bool,
    },
    /// Train over the M and lambda grids; writes sweep.csv.
    Sweep,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut sets = cli.sets.clone();
    let flags = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("lambda", cli.lambda.map(|v| v.to_string())),
        ("groups", cli.m.map(|v| v.to_string())),
        ("data_dir", cli.data.as_ref().map(|p| p.display().to_string())),
        ("out_dir", cli.out.as_ref().map(|p| p.display().to_string())),
    ];
    sets.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))));
    RunConfig::load(cli.config.as_deref(), &sets)
}

fn run(cli: &Cli) -> Result<String> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Train { resume, stop_after } => cmd_train(
            &cfg,
            &TrainOptions {
                resume: resume.clone(),
                stop_after: *stop_after,
            },
        ),
        Command::Eval { checkpoint, protocol, ks } => {
            let protocols = match protocol {
                ProtocolArg::Zsl => vec![Protocol::Zsl],
                ProtocolArg::Gzsl => vec![Protocol::Gzsl],
                ProtocolArg::Both => vec![Protocol::Zsl, Protocol::Gzsl],
            };
            cmd_eval(&cfg, checkpoint, &protocols, ks.as_deref().unwrap_or(&cfg.ks))
        }
        Command::Predict { checkpoint, features, k } => cmd_predict(&cfg, checkpoint, features, *k),
        Command::Attn { checkpoint, features, gfp } => {
            let maps = cmd_attn(&cfg, checkpoint, features, &cfg.out_dir, *gfp)?;
            Ok(format!("wrote {maps} maps to {}\n", cfg.out_dir.display()))
        }
        Command::Sweep => cmd_sweep(&cfg).map(|(_, csv)| csv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // bad arguments are validation errors
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
