//! `fidel` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fidel::config::ExperimentConfig;
use fidel::data::DataRoot;
use fidel::FidelError;

#[derive(Parser, Debug)]
#[command(name = "fidel", version, about = "First-dense-layer reconstruction experiments on federated updates")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory holding `mnist/` and `cifar-10-batches-bin/`.
    #[arg(long, global = true, env = DataRoot::ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Attack a single-sample round and emit its partial reconstructions.
    DemoSingle,
    /// Attack one round on a batch of `n` private samples.
    DemoBatch,
    /// Repeat attack rounds over activation, dropout and `n`.
    Sweep,
    /// Pretrain and save the victim model(s).
    Pretrain,
    /// Train and save the generator for a convolutional victim.
    TrainGenerator,
}

fn resolve(global: &GlobalArgs) -> Result<(ExperimentConfig, DataRoot), FidelError> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for pair in &global.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(out) = &global.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let root = DataRoot(global.data_root.clone().unwrap_or_else(|| PathBuf::from("data")));
    Ok((cfg, root))
}

fn exit_code(err: &FidelError) -> u8 {
    match err {
        FidelError::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let run = || -> Result<(), FidelError> {
        let (cfg, root) = resolve(&cli.global)?;
        if let Some(threads) = cli.global.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build_global()
                .map_err(|e| FidelError::Config(format!("thread pool: {e}")))?;
        }
        match cli.command {
            Command::DemoSingle => commands::demo_single(&cfg, &root),
            Command::DemoBatch => commands::demo_batch(&cfg, &root),
            Command::Sweep => commands::sweep(&cfg, &root),
            Command::Pretrain => commands::pretrain(&cfg, &root),
            Command::TrainGenerator => commands::train_generator(&cfg, &root),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
