use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slowfast::commands::{cmd_bench_latency, cmd_prune_report, cmd_run, CommandError};
use slowfast::config::{ConfigError, RunConfig};
use slowfast::metrics::summary_csv;

/// Slow-fast context navigation agent: episodes, latency model, pruning stats.
#[derive(Parser)]
#[command(name = "slowfast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodes; writes episodes.jsonl and metrics.csv.
    Run(Overrides),
    /// Per-turn prefill counts and modeled latency of the three cache regimes.
    BenchLatency(Overrides),
    /// Per-frame and per-block memory pruning statistics.
    PruneReport(Overrides),
}

/// Flags mirror the config file keys and override it.
#[derive(Args)]
struct Overrides {
    /// Flat `key = value` config file loaded before the flags.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    world_size: Option<String>,
    #[arg(long)]
    episodes: Option<String>,
    /// expert | decoder
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    bench_turns: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    memory_frames: Option<String>,
    /// symbolic | word | phrase
    #[arg(long)]
    action_scheme: Option<String>,
    /// true | false
    #[arg(long)]
    pruning: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    voxel_size: Option<String>,
    #[arg(long)]
    success_distance: Option<String>,
    #[arg(long)]
    latency_prefill: Option<String>,
    #[arg(long)]
    latency_decode: Option<String>,
    #[arg(long)]
    model_seed: Option<String>,
    #[arg(long)]
    model_layers: Option<String>,
    #[arg(long)]
    model_heads: Option<String>,
    #[arg(long)]
    model_head_dim: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, CommandError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::InvalidValue {
                key: "config".into(),
                value: path.display().to_string(),
                reason: e.to_string(),
            })?;
            cfg.apply_text(&text)?;
        }
        let flags = [
            ("seed", &self.seed),
            ("world_size", &self.world_size),
            ("episodes", &self.episodes),
            ("policy", &self.policy),
            ("max_steps", &self.max_steps),
            ("bench_turns", &self.bench_turns),
            ("window", &self.window),
            ("memory_frames", &self.memory_frames),
            ("action_scheme", &self.action_scheme),
            ("pruning", &self.pruning),
            ("stride", &self.stride),
            ("threshold", &self.threshold),
            ("voxel_size", &self.voxel_size),
            ("success_distance", &self.success_distance),
            ("latency_prefill", &self.latency_prefill),
            ("latency_decode", &self.latency_decode),
            ("model_seed", &self.model_seed),
            ("model_layers", &self.model_layers),
            ("model_heads", &self.model_heads),
            ("model_head_dim", &self.model_head_dim),
            ("output_dir", &self.output_dir),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

fn execute(command: Command) -> Result<(), CommandError> {
    match command {
        Command::Run(o) => {
            let cfg = o.resolve()?;
            let out = cmd_run(&cfg)?;
            print!("{}", summary_csv(&out.summary));
            eprintln!("wrote {} and {}", out.episodes_path.display(), out.metrics_path.display());
        }
        Command::BenchLatency(o) => {
            let cfg = o.resolve()?;
            let path = cmd_bench_latency(&cfg)?;
            eprintln!("wrote {}", path.display());
        }
        Command::PruneReport(o) => {
            let cfg = o.resolve()?;
            let (frames, blocks) = cmd_prune_report(&cfg)?;
            eprintln!("wrote {} and {}", frames.display(), blocks.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
