use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "freqlab", version, about = "Frequency-aware sequential recommendation lab")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Run configuration (JSON). Defaults to $FREQLAB_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Upper bound on parallel per-user work.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Accept input artifacts produced under a different config hash.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Alpha,
    Cutoff,
    Truncation,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Ring,
    Locality,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Valid,
    Test,
}

#[derive(Subcommand, Debug)]
pub(crate) enum Command {
    /// Print the effective configuration with every default filled in.
    Config {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic interaction log.
    Synth {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        items: usize,
        #[arg(long, default_value_t = 20)]
        mean_len: usize,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Deterministic k → k+1 walks instead of locality data.
        #[arg(long)]
        cycle: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse, filter and split an interaction log.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the item co-occurrence graph from a split.
    BuildGraph {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain ID embeddings and build text embeddings.
    Pretrain {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out_id: PathBuf,
        #[arg(long)]
        out_text: PathBuf,
    },
    /// Low-pass filter an embedding table on the co-occurrence graph.
    Glpf {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// First-order strength; overrides glpf.alpha.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train the fusion MLP against the frozen backbone.
    Train {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint (and optionally the floors) on valid or test targets.
    Evaluate {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long, value_enum, default_value_t = PhaseArg::Test)]
        phase: PhaseArg,
        #[arg(long)]
        baselines: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_user: Option<PathBuf>,
    },
    /// Layer-wise band-energy profile of hidden states on local graphs.
    Analyze {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        text: PathBuf,
        /// Trained checkpoint; the seeded initial MLP is used without one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        tfm: Option<OnOff>,
        #[arg(long)]
        max_users: Option<usize>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
    /// Check that the temporal filter lowers Laplacian quadratic forms.
    TheoremProbe {
        #[arg(long, value_enum, default_value_t = Family::Ring)]
        family: Family,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        t_min: usize,
        #[arg(long, default_value_t = 64)]
        t_max: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate across a grid of α, ω_c or spectral truncation p.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated grid.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
