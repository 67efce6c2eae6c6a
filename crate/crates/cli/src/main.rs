use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bigfair_cli::commands;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "bigfair", version, about = "Cold-user fairness experiments for news recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus in MIND layout.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and record checkpoint metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Supplies cold threshold and AUC mode; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where buckets.csv goes; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per (drop ratio, seed).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated drop ratios; overrides `p_list` in the config.
        #[arg(long)]
        p_list: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge run directories into curve tables and optional SVG charts.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, seed } => commands::gen_data(&config, &out, seed),
        Command::Train { config, data, out, seed } => commands::train(&config, data.as_deref(), &out, seed),
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
        } => commands::eval(&checkpoint, &data, config.as_deref(), out.as_deref()),
        Command::Sweep {
            config,
            data,
            out,
            p_list,
            jobs,
            seed,
        } => commands::sweep(&config, data.as_deref(), &out, p_list.as_deref(), jobs, seed),
        Command::Report { runs, out, svg } => commands::report(&runs, &out, svg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
