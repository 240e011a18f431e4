use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use omae::commands::{cmd_eval, cmd_gradcheck, cmd_score, cmd_synth, cmd_train};
use omae::config::RunConfig;
use omae::Result;

#[derive(Parser)]
#[command(name = "omae", version, about = "Object-centric memory-guided autoencoder for video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test set with ground truth.
    Synth,
    /// Train on the train manifest and write the best checkpoint.
    Train,
    /// Score the test manifest with a checkpoint.
    Score,
    /// Compute frame-AUC, RBDC and TBDC from score files.
    Eval,
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck,
}

#[derive(Args)]
struct Opts {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    no_smoothing: bool,
    #[arg(long, global = true, overrides_with = "no_scale_adjust")]
    scale_adjust: bool,
    #[arg(long, global = true)]
    no_scale_adjust: bool,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Score components to drop, comma separated (rec_l2, rec_cos, mem_cos).
    #[arg(long, global = true)]
    ablate: Option<String>,
    /// Any configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn build_config(opts: &Opts) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &opts.config {
        cfg.apply_file(path)?;
    }
    for kv in &opts.overrides {
        cfg.apply_text(kv)?;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.out = out.clone();
    }
    if opts.no_smoothing {
        cfg.smoothing_enabled = false;
    }
    if opts.scale_adjust {
        cfg.smoothing.scale_adjust = true;
    }
    if opts.no_scale_adjust {
        cfg.smoothing.scale_adjust = false;
    }
    if let Some(e) = opts.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = opts.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(a) = &opts.ablate {
        cfg.ablate = a.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String> {
    let cfg = build_config(&cli.opts)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Score => cmd_score(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Gradcheck => cmd_gradcheck(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
