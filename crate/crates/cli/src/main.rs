use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use remem_cli::{config, run_command, CliError, Command};

#[derive(Parser)]
#[command(name = "remem", version, about = "Desk-scale teacher memorization and distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Fine-tune a teacher (vanilla, SAM or reweighted) and save it.
    Finetune(Common),
    /// Distill a student from a fine-tuned or loaded teacher.
    Distill(Common),
    /// Checkpoint and hyperparameter sweep with best-student selection.
    Sweep(Common),
    /// Information-plane points with top MLP or attention blocks pruned.
    PruneSweep(Common),
    /// Per-layer expertness of the teacher's MLP activations.
    Expertness(Common),
    /// Mutual-information proxy of the teacher's features.
    Mi(Common),
    /// Per-neuron criticality of the teacher's MLP layers.
    Criticality(Common),
    /// Baseline, reweight-only, SAM-only and combined teachers side by side.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set optimizer.sam_rho=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for parallel sweeps; 1 is bit-reproducible.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Sub::Finetune(c) => (Command::Finetune, c),
        Sub::Distill(c) => (Command::Distill, c),
        Sub::Sweep(c) => (Command::Sweep, c),
        Sub::PruneSweep(c) => (Command::PruneSweep, c),
        Sub::Expertness(c) => (Command::Expertness, c),
        Sub::Mi(c) => (Command::Mi, c),
        Sub::Criticality(c) => (Command::Criticality, c),
        Sub::Ablate(c) => (Command::Ablate, c),
    };
    match run(cmd, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command, common: Common) -> Result<(), CliError> {
    let mut overrides = common.overrides;
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = config::load(common.config.as_deref(), &overrides)?;
    let threads = common.threads.max(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let report = run_command(cmd, &cfg, threads)?;
    for path in &report.outputs {
        println!("{}", path.display());
    }
    println!("{}", cfg.output_dir.join("run.json").display());
    Ok(())
}
