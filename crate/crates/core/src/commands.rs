//! The three batch commands behind the CLI.
//!
//! Every output file opens with `# config_hash=<sha256> seed=<seed>`; CSV
//! column headers follow on the next line. JSONL records carry both fields
//! inline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::context::{modeled_latency, turn_prefill, CacheMode};
use crate::decoder::Decoder;
use crate::episode::{run_episode, EpisodeConfig, EpisodeError, EpisodeLog, Policy};
use crate::metrics::{navigation_error, ndtw, oracle_success, success, summarize, summary_csv, MetricsError, Summary};
use crate::worldsim::{generate_episode, Episode, WorldError};

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BENCH_FILE: &str = "bench_latency.csv";
pub const PRUNE_FRAMES_FILE: &str = "prune_report.csv";
pub const PRUNE_BLOCKS_FILE: &str = "prune_blocks.csv";

pub const BENCH_HEADER: &str = "turn,mode,prefill_tokens,decode_tokens,modeled_latency";
pub const PRUNE_FRAMES_HEADER: &str = "episode,block,t,valid_tokens,retained_tokens,frame_dropped_flag,cumulative_ratio";
pub const PRUNE_BLOCKS_HEADER: &str = "episode,block,turn,valid_tokens,retained_rows,prune_ratio";

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("episode {episode}: {source}")]
    Episode { episode: usize, source: EpisodeError },
    #[error("episode {episode}: {source}")]
    World { episode: usize, source: WorldError },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CommandError {
    /// Process exit code: 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn header(cfg: &RunConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf, CommandError> {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
        move |source| CommandError::Io { path: path.to_path_buf(), source }
    }
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(io(&path))?;
    Ok(path)
}

fn episodes(cfg: &RunConfig) -> Result<Vec<Episode>, CommandError> {
    (0..cfg.episodes)
        .into_par_iter()
        .map(|i| generate_episode(i, cfg.episode_seed(i), cfg.world_size, cfg.max_steps).map_err(|source| CommandError::World { episode: i, source }))
        .collect()
}

fn run_all(decoder: &Decoder, eps: &[Episode], ecfg: &EpisodeConfig, policy: Policy) -> Result<Vec<EpisodeLog>, CommandError> {
    eps.par_iter()
        .map(|ep| run_episode(decoder, ep, ecfg, policy).map_err(|source| CommandError::Episode { episode: ep.id, source }))
        .collect()
}

fn turn_records(cfg: &RunConfig, log: &EpisodeLog, out: &mut String) {
    let hash = cfg.hash();
    for rec in &log.turns {
        let c = &rec.cost;
        let counts: serde_json::Map<String, Value> = CacheMode::ALL.iter().map(|&m| (m.as_str().to_string(), json!(turn_prefill(c, m)))).collect();
        let line = json!({
            "record": "turn",
            "config_hash": hash,
            "seed": cfg.seed,
            "episode": log.episode,
            "turn": c.turn,
            "session": c.session,
            "session_start": c.session_start,
            "pose": rec.pose,
            "actions": rec.actions,
            "prefill_tokens": c.prefill_tokens,
            "decode_tokens": c.decode_tokens,
            "memory_rows": c.memory_rows,
            "mode_counts": counts,
        });
        writeln!(out, "{line}").unwrap();
    }
}

fn episode_record(cfg: &RunConfig, ep: &Episode, log: &EpisodeLog) -> String {
    let r = &log.result;
    let world: Value = serde_json::from_str(&ep.world.to_json()).expect("world json");
    json!({
        "record": "episode",
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "episode": log.episode,
        "world_seed": log.seed,
        "world": world,
        "instruction": log.instruction,
        "steps": log.steps,
        "stopped": log.stopped,
        "navigation_error": navigation_error(r),
        "success": success(r),
        "oracle_success": oracle_success(r),
        "path_length": r.path_length(),
        "shortest_length": r.shortest_length,
        "ndtw": ndtw(&r.positions, &r.reference, r.success_distance),
        "memory": log.memory.iter().map(|m| json!({
            "block": m.block,
            "turn": m.turn,
            "valid_tokens": m.valid_tokens,
            "retained_rows": m.retained_rows,
            "prune_ratio": m.prune_ratio,
        })).collect::<Vec<_>>(),
    })
    .to_string()
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: Summary,
    pub episodes_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Runs every configured episode; writes the JSONL log and the metrics summary.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutput, CommandError> {
    let decoder = Decoder::new(cfg.model_config());
    let eps = episodes(cfg)?;
    let logs = run_all(&decoder, &eps, &cfg.episode_config(), cfg.policy)?;

    let mut jsonl = String::new();
    for (ep, log) in eps.iter().zip(&logs) {
        turn_records(cfg, log, &mut jsonl);
        writeln!(jsonl, "{}", episode_record(cfg, ep, log)).unwrap();
    }
    let results: Vec<_> = logs.iter().map(|l| l.result.clone()).collect();
    let summary = summarize(&results)?;
    let episodes_path = write(&cfg.output_dir, EPISODES_FILE, &jsonl)?;
    let metrics_path = write(&cfg.output_dir, METRICS_FILE, &(header(cfg) + &summary_csv(&summary)))?;
    Ok(RunOutput { summary, episodes_path, metrics_path })
}

/// One row of the latency benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub turn: usize,
    pub mode: CacheMode,
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
    pub modeled_latency: f64,
}

/// Per-turn prefill counts and modeled latency of the three cache regimes on
/// one decoder-driven episode of `bench_turns` turns (Stop disabled).
pub fn bench_rows(cfg: &RunConfig) -> Result<Vec<BenchRow>, CommandError> {
    let decoder = Decoder::new(cfg.model_config());
    let ep = generate_episode(0, cfg.episode_seed(0), cfg.world_size, cfg.max_steps).map_err(|source| CommandError::World { episode: 0, source })?;
    let ecfg = EpisodeConfig {
        max_turns: Some(cfg.bench_turns),
        max_steps: usize::MAX,
        allow_stop: false,
        ..cfg.episode_config()
    };
    let log = run_episode(&decoder, &ep, &ecfg, Policy::Decoder).map_err(|source| CommandError::Episode { episode: 0, source })?;
    let costs = log.cost_log();
    let mut rows = Vec::with_capacity(costs.len() * 3);
    for c in &costs {
        for mode in CacheMode::ALL {
            let prefill = turn_prefill(c, mode);
            let latency = modeled_latency(&[(prefill, c.decode_tokens)], cfg.latency_prefill, cfg.latency_decode)[0];
            rows.push(BenchRow { turn: c.turn, mode, prefill_tokens: prefill, decode_tokens: c.decode_tokens, modeled_latency: latency });
        }
    }
    Ok(rows)
}

pub fn cmd_bench_latency(cfg: &RunConfig) -> Result<PathBuf, CommandError> {
    let rows = bench_rows(cfg)?;
    let mut out = header(cfg);
    writeln!(out, "{BENCH_HEADER}").unwrap();
    for r in &rows {
        writeln!(out, "{},{},{},{},{:.6}", r.turn, r.mode.as_str(), r.prefill_tokens, r.decode_tokens, r.modeled_latency).unwrap();
    }
    write(&cfg.output_dir, BENCH_FILE, &out)
}

/// Runs the configured episodes and writes per-frame and per-block pruning statistics.
pub fn cmd_prune_report(cfg: &RunConfig) -> Result<(PathBuf, PathBuf), CommandError> {
    let decoder = Decoder::new(cfg.model_config());
    let eps = episodes(cfg)?;
    let logs = run_all(&decoder, &eps, &cfg.episode_config(), cfg.policy)?;

    let mut frames = header(cfg);
    writeln!(frames, "{PRUNE_FRAMES_HEADER}").unwrap();
    let mut blocks = header(cfg);
    writeln!(blocks, "{PRUNE_BLOCKS_HEADER}").unwrap();
    for log in &logs {
        for m in &log.memory {
            for f in &m.frames {
                writeln!(
                    frames,
                    "{},{},{},{},{},{},{:.6}",
                    log.episode, m.block, f.t, f.valid_tokens, f.retained_tokens, f.frame_dropped as u8, f.cumulative_ratio
                )
                .unwrap();
            }
            writeln!(blocks, "{},{},{},{},{},{:.6}", log.episode, m.block, m.turn, m.valid_tokens, m.retained_rows, m.prune_ratio).unwrap();
        }
    }
    Ok((write(&cfg.output_dir, PRUNE_FRAMES_FILE, &frames)?, write(&cfg.output_dir, PRUNE_BLOCKS_FILE, &blocks)?))
}
