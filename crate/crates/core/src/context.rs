//! Slow-fast dialogue context.
//!
//! The fast context is the active window: up to `window` dialogue turns
//! whose token states live in the KV cache and are reused turn to turn.
//! When the window is full it slides: prompt, marker and action rows are
//! dropped, a fixed number of frames is sampled, their observation rows are
//! voxel-pruned jointly with all earlier memory frames and offloaded as a new
//! [`MemoryBlock`]. The next session binds every block's rows back into the
//! cache ahead of its own tokens.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{is_observation, Decoder, KvCache, KvRow, Logits};
use crate::geometry::{build_voxel_map, Intrinsics, DEFAULT_VOXEL_SIZE};
use crate::pruner::{frame_report, voxel_prune, FrameReport, PruneError, PruneParams};
use crate::tokenspace::{
    build_session_prompt, build_turn_prefix, encode_actions, Action, ActionScheme, PatchToken, PhraseMatcher, Token,
    ACTIONS_PER_TURN,
};
use crate::worldsim::Frame;

#[derive(Debug, Error, PartialEq)]
pub enum ContextError {
    #[error("the episode already ended with Stop")]
    EpisodeTerminated,
    #[error("window holds {have} of {need} turns")]
    WindowNotFull { have: usize, need: usize },
    #[error(transparent)]
    Prune(#[from] PruneError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextConfig {
    pub window: usize,
    pub memory_frames: usize,
    pub scheme: ActionScheme,
    /// `None` disables voxel pruning of memory.
    pub pruning: Option<PruneParams>,
    pub voxel_size: f64,
    pub intrinsics: Intrinsics,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            window: 8,
            memory_frames: 8,
            scheme: ActionScheme::SymbolicSingle,
            pruning: Some(PruneParams::default()),
            voxel_size: DEFAULT_VOXEL_SIZE,
            intrinsics: Intrinsics::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DialogueTurn {
    pub turn_index: usize,
    pub frame: Frame,
    pub actions: Vec<Action>,
}

/// Offloaded observation states of one completed window.
#[derive(Debug, Clone)]
pub struct MemoryBlock {
    pub index: usize,
    pub frames: Vec<Frame>,
    /// Keep flags, `frames x H x W`, row-major per frame.
    pub retained: Vec<bool>,
    pub rows: Vec<KvRow>,
}

impl MemoryBlock {
    pub fn retained_count(&self) -> usize {
        self.rows.len()
    }
}

/// Statistics of one memory assembly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub block: usize,
    pub turn: usize,
    /// Valid-depth tokens of the new block's frames.
    pub valid_tokens: usize,
    /// Rows the new block keeps.
    pub retained_rows: usize,
    /// Fraction of the new block's valid tokens removed.
    pub prune_ratio: f64,
    /// Per-frame statistics over every memory frame considered.
    pub frames: Vec<FrameReport>,
}

/// Token accounting of one turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnCost {
    pub turn: usize,
    pub session: usize,
    pub session_start: bool,
    /// Length of the current session's prompt.
    pub prompt_tokens: usize,
    pub prefix_tokens: usize,
    pub observation_tokens: usize,
    /// Memory rows bound in the cache during this turn.
    pub memory_rows: usize,
    /// Window tokens (prefixes, observations, actions) from earlier turns of this session.
    pub history_tokens: usize,
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CacheMode {
    FullTurns,
    SlidingWindow,
    SingleTurn,
}

impl CacheMode {
    pub const ALL: [CacheMode; 3] = [CacheMode::FullTurns, CacheMode::SlidingWindow, CacheMode::SingleTurn];

    pub fn as_str(self) -> &'static str {
        match self {
            CacheMode::FullTurns => "full_turns",
            CacheMode::SlidingWindow => "sliding_window",
            CacheMode::SingleTurn => "single_turn",
        }
    }
}

/// Prefill tokens a turn would cost under a cache-reuse regime.
///
/// * `FullTurns`: one cache for the whole episode; only new tokens are encoded.
/// * `SlidingWindow`: cache reused within a session; each session start
///   re-encodes memory and prompt.
/// * `SingleTurn`: no reuse; every turn re-encodes memory, prompt and the
///   whole window so far.
pub fn turn_prefill(cost: &TurnCost, mode: CacheMode) -> usize {
    let new = cost.prefix_tokens + cost.observation_tokens;
    match mode {
        CacheMode::FullTurns if cost.turn == 0 => cost.prompt_tokens + new,
        CacheMode::FullTurns => new,
        CacheMode::SlidingWindow if cost.session_start => cost.memory_rows + cost.prompt_tokens + new,
        CacheMode::SlidingWindow => new,
        CacheMode::SingleTurn => cost.memory_rows + cost.prompt_tokens + cost.history_tokens + new,
    }
}

pub fn prefill_count_curve(log: &[TurnCost], mode: CacheMode) -> Vec<usize> {
    log.iter().map(|c| turn_prefill(c, mode)).collect()
}

/// Linear latency model: `prefill_cost * prefill + decode_cost * decode` seconds.
pub fn modeled_latency(counts: &[(usize, usize)], prefill_cost: f64, decode_cost: f64) -> Vec<f64> {
    assert!(prefill_cost > 0.0 && decode_cost > 0.0, "latency constants must be positive");
    counts.iter().map(|&(p, d)| prefill_cost * p as f64 + decode_cost * d as f64).collect()
}

pub enum TurnPolicy<'a> {
    /// Greedy generation restricted to the action vocabulary.
    Generate { allow_stop: bool },
    /// Teacher-forced actions (truncated after the first Stop).
    Forced(&'a [Action]),
}

#[derive(Debug, Clone)]
pub struct TurnOutcome {
    pub actions: Vec<Action>,
    pub cost: TurnCost,
    /// Logits each action token was chosen from, in order.
    pub step_logits: Vec<Logits>,
    /// Cache position whose logits produced each action token.
    pub step_positions: Vec<u64>,
}

pub fn observation_tokens(frame: &Frame) -> Vec<Token> {
    let mut out = Vec::with_capacity(frame.grid_h * frame.grid_w);
    for x in 0..frame.grid_h {
        for y in 0..frame.grid_w {
            out.push(Token::patch(PatchToken {
                frame_t: frame.t,
                patch_x: x as u16,
                patch_y: y as u16,
                depth: frame.depth_at(x, y),
            }));
        }
    }
    out
}

/// Evenly spaced indices `floor(i * n / k)`; all of `0..n` when `n <= k`.
pub fn uniform_sample(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

#[derive(Debug, Clone)]
pub struct SessionState {
    cfg: ContextConfig,
    window: Vec<DialogueTurn>,
    cache: KvCache,
    memory: Vec<MemoryBlock>,
    reports: Vec<MemoryReport>,
    global_turn: usize,
    session: usize,
    session_prompt_tokens: usize,
    history_tokens: usize,
    cost_log: Vec<TurnCost>,
    terminated: bool,
}

impl SessionState {
    pub fn new(decoder: &Decoder, cfg: ContextConfig) -> Self {
        assert!(cfg.window >= 1 && cfg.memory_frames >= 1);
        SessionState {
            cfg,
            window: Vec::new(),
            cache: decoder.new_cache(),
            memory: Vec::new(),
            reports: Vec::new(),
            global_turn: 0,
            session: 0,
            session_prompt_tokens: 0,
            history_tokens: 0,
            cost_log: Vec::new(),
            terminated: false,
        }
    }

    pub fn config(&self) -> &ContextConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn window(&self) -> &[DialogueTurn] {
        &self.window
    }

    pub fn memory(&self) -> &[MemoryBlock] {
        &self.memory
    }

    pub fn memory_reports(&self) -> &[MemoryReport] {
        &self.reports
    }

    pub fn cost_log(&self) -> &[TurnCost] {
        &self.cost_log
    }

    pub fn global_turn(&self) -> usize {
        self.global_turn
    }

    pub fn session(&self) -> usize {
        self.session
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn memory_rows(&self) -> usize {
        self.memory.iter().map(MemoryBlock::retained_count).sum()
    }

    /// Encodes one observation and produces this turn's actions. A full window
    /// slides first, so the turn opens a new session.
    pub fn run_turn(&mut self, decoder: &Decoder, frame: &Frame, instruction: &str, policy: TurnPolicy<'_>) -> Result<TurnOutcome, ContextError> {
        if self.terminated {
            return Err(ContextError::EpisodeTerminated);
        }
        if self.window.len() == self.cfg.window {
            self.slide_window()?;
        }
        let session_start = self.window.is_empty();

        let mut tokens = Vec::new();
        if session_start {
            let prompt = build_session_prompt(instruction, self.session, !self.memory.is_empty());
            self.session_prompt_tokens = prompt.len();
            tokens.extend(prompt);
        }
        let prefix = build_turn_prefix(self.global_turn);
        let observation = observation_tokens(frame);
        let (prefix_len, obs_len) = (prefix.len(), observation.len());
        tokens.extend(prefix);
        tokens.extend(observation);

        let memory_rows = self.memory_rows();
        let prefill_tokens = tokens.len();
        let mut logits = decoder.prefill(&mut self.cache, &tokens);

        let forced: Option<Vec<Token>> = match policy {
            TurnPolicy::Forced(actions) => {
                let cut = actions.iter().position(|&a| a == Action::Stop).map_or(actions.len(), |i| i + 1);
                Some(encode_actions(&actions[..cut.min(ACTIONS_PER_TURN)], self.cfg.scheme))
            }
            TurnPolicy::Generate { .. } => None,
        };
        let allow_stop = !matches!(policy, TurnPolicy::Generate { allow_stop: false });

        let mut matcher = PhraseMatcher::new(self.cfg.scheme);
        let mut actions = Vec::new();
        let mut step_logits = Vec::new();
        let mut step_positions = Vec::new();
        let mut decoded = 0;
        loop {
            let next = match &forced {
                Some(f) if decoded < f.len() => f[decoded].id,
                Some(_) => break,
                None if actions.len() == ACTIONS_PER_TURN => break,
                None => logits.argmax_over(&matcher.allowed(allow_stop)),
            };
            step_positions.push(self.cache.next_position() - 1);
            let (next_logits, _) = decoder.decode_step(&mut self.cache, Token::action(next), None);
            step_logits.push(std::mem::replace(&mut logits, next_logits));
            decoded += 1;
            if let Some(Ok(action)) = matcher.push(next) {
                actions.push(action);
                if action == Action::Stop {
                    self.terminated = true;
                    break;
                }
            }
        }

        let cost = TurnCost {
            turn: self.global_turn,
            session: self.session,
            session_start,
            prompt_tokens: self.session_prompt_tokens,
            prefix_tokens: prefix_len,
            observation_tokens: obs_len,
            memory_rows,
            history_tokens: self.history_tokens,
            prefill_tokens,
            decode_tokens: decoded,
        };
        self.history_tokens += prefix_len + obs_len + decoded;
        self.cost_log.push(cost);
        self.window.push(DialogueTurn { turn_index: self.global_turn, frame: frame.clone(), actions: actions.clone() });
        self.global_turn += 1;
        Ok(TurnOutcome { actions, cost, step_logits, step_positions })
    }

    /// Offloads the full window into a new memory block and empties it.
    pub fn slide_window(&mut self) -> Result<(), ContextError> {
        if self.window.len() != self.cfg.window {
            return Err(ContextError::WindowNotFull { have: self.window.len(), need: self.cfg.window });
        }
        let frame_of = |row: &KvRow| row.meta.token.role.patch().map(|p| p.frame_t);

        self.cache.evict(is_observation);
        let picks = uniform_sample(self.window.len(), self.cfg.memory_frames);
        let new_frames: Vec<Frame> = picks.iter().map(|&i| self.window[i].frame.clone()).collect();
        let keep_ts: HashSet<u32> = new_frames.iter().map(|f| f.t).collect();
        let window_ts: HashSet<u32> = self.window.iter().map(|t| t.frame.t).collect();
        let mut new_rows = self.cache.take_rows(|m| m.token.role.patch().is_some_and(|p| window_ts.contains(&p.frame_t)));
        new_rows.retain(|r| frame_of(r).is_some_and(|t| keep_ts.contains(&t)));

        let patches = self.cfg.intrinsics.patches();
        let block_index = self.memory.len();
        let turn = self.global_turn;
        let (retained, report) = match self.cfg.pruning {
            Some(params) => {
                let all_frames: Vec<Frame> = self.memory.iter().flat_map(|b| b.frames.iter().cloned()).chain(new_frames.iter().cloned()).collect();
                let mut voxels = build_voxel_map(&all_frames, &self.cfg.intrinsics, self.cfg.voxel_size);
                // Tokens already pruned from older blocks no longer compete.
                let (_, h, w) = voxels.shape();
                let old_flags: Vec<bool> = self.memory.iter().flat_map(|b| b.retained.iter().copied()).collect();
                for (i, &kept) in old_flags.iter().enumerate() {
                    if !kept {
                        voxels.set_invalid(i / (h * w), (i / w) % h, i % w);
                    }
                }
                let mask = voxel_prune(&voxels, params);

                let mut offset = 0;
                for block in &mut self.memory {
                    for (i, flag) in block.retained.iter_mut().enumerate() {
                        *flag &= mask.bits()[offset + i];
                    }
                    offset += block.retained.len();
                    let mut rows = Vec::with_capacity(block.rows.len());
                    for row in block.rows.drain(..) {
                        if let Some(p) = row.meta.token.role.patch() {
                            if !mask.keeps(p)? {
                                continue;
                            }
                        }
                        rows.push(row);
                    }
                    block.rows = rows;
                }
                let mut kept_rows = Vec::with_capacity(new_rows.len());
                for row in new_rows.drain(..) {
                    let p = row.meta.token.role.patch().expect("observation row");
                    if mask.keeps(p)? {
                        kept_rows.push(row);
                    }
                }
                new_rows = kept_rows;

                let retained = mask.bits()[offset..].to_vec();
                let new_valid = voxels.raw()[offset..].iter().filter(|&&v| v >= 0).count();
                let new_kept = retained.iter().filter(|&&b| b).count();
                let ratio = if new_valid == 0 { 0.0 } else { (new_valid - new_kept) as f64 / new_valid as f64 };
                let report = MemoryReport {
                    block: block_index,
                    turn,
                    valid_tokens: new_valid,
                    retained_rows: new_rows.len(),
                    prune_ratio: ratio,
                    frames: frame_report(&mask, &voxels),
                };
                (retained, report)
            }
            None => {
                let valid = new_frames.iter().flat_map(|f| f.depth.iter()).filter(|&&d| self.cfg.intrinsics.depth_valid(d)).count();
                let frames = new_frames
                    .iter()
                    .map(|f| {
                        let v = f.depth.iter().filter(|&&d| self.cfg.intrinsics.depth_valid(d)).count();
                        FrameReport { t: f.t, valid_tokens: v, retained_tokens: v, frame_dropped: false, cumulative_ratio: 0.0 }
                    })
                    .collect();
                let report = MemoryReport {
                    block: block_index,
                    turn,
                    valid_tokens: valid,
                    retained_rows: new_rows.len(),
                    prune_ratio: 0.0,
                    frames,
                };
                (vec![true; new_frames.len() * patches], report)
            }
        };

        self.memory.push(MemoryBlock { index: block_index, frames: new_frames, retained, rows: new_rows });
        self.reports.push(report);

        self.cache.clear();
        for block in &self.memory {
            for row in &block.rows {
                self.cache.push_row(row);
            }
        }
        self.window.clear();
        self.history_tokens = 0;
        self.session += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{survivor_sequence, ModelConfig};
    use crate::geometry::Pose;
    use crate::tokenspace::TokenRole;

    fn small_intr() -> Intrinsics {
        Intrinsics { grid_h: 3, grid_w: 3, ..Intrinsics::default() }
    }

    fn small_decoder() -> Decoder {
        Decoder::new(ModelConfig { grid_h: 3, grid_w: 3, ..ModelConfig::toy(21) })
    }

    fn frame(t: u32, depth: f64) -> Frame {
        Frame { t, pose: Pose::new(1.0, 1.0, 0.6, 0.0), grid_h: 3, grid_w: 3, depth: vec![depth; 9] }
    }

    fn cfg(window: usize, pruning: Option<PruneParams>) -> ContextConfig {
        ContextConfig { window, memory_frames: window, pruning, intrinsics: small_intr(), ..ContextConfig::default() }
    }

    #[test]
    fn uniform_sampling() {
        assert_eq!(uniform_sample(8, 8), (0..8).collect::<Vec<_>>());
        assert_eq!(uniform_sample(8, 4), vec![0, 2, 4, 6]);
        assert_eq!(uniform_sample(3, 8), vec![0, 1, 2]);
    }

    #[test]
    fn first_turn_prefills_prompt_prefix_and_observation() {
        let dec = small_decoder();
        let mut s = SessionState::new(&dec, cfg(4, None));
        let out = s.run_turn(&dec, &frame(0, 2.0), "walk forward", TurnPolicy::Generate { allow_stop: false }).unwrap();
        let prompt = build_session_prompt("walk forward", 0, false).len();
        assert_eq!(out.cost.prefill_tokens, prompt + 2 + 9);
        assert_eq!(out.cost.decode_tokens, 4);
        assert_eq!(out.actions.len(), 4);
        let out = s.run_turn(&dec, &frame(1, 2.0), "walk forward", TurnPolicy::Generate { allow_stop: false }).unwrap();
        assert_eq!(out.cost.prefill_tokens, 2 + 9);
        assert_eq!(s.cache().cost.prefill_tokens as usize, prompt + 2 * 11);
        assert_eq!(s.cache().cost.decode_tokens, 8);
    }

    #[test]
    fn stop_terminates_episode() {
        let dec = small_decoder();
        let mut s = SessionState::new(&dec, cfg(4, None));
        let out = s.run_turn(&dec, &frame(0, 2.0), "stop", TurnPolicy::Forced(&[Action::MoveForward, Action::Stop, Action::TurnLeft])).unwrap();
        assert_eq!(out.actions, vec![Action::MoveForward, Action::Stop]);
        assert_eq!(out.cost.decode_tokens, 2);
        assert!(s.is_terminated());
        assert_eq!(
            s.run_turn(&dec, &frame(1, 2.0), "stop", TurnPolicy::Generate { allow_stop: true }).unwrap_err(),
            ContextError::EpisodeTerminated
        );
    }

    #[test]
    fn slide_requires_full_window() {
        let dec = small_decoder();
        let mut s = SessionState::new(&dec, cfg(3, None));
        s.run_turn(&dec, &frame(0, 2.0), "go", TurnPolicy::Generate { allow_stop: false }).unwrap();
        assert_eq!(s.slide_window(), Err(ContextError::WindowNotFull { have: 1, need: 3 }));
    }

    #[test]
    fn slide_discards_non_observation_rows() {
        let dec = small_decoder();
        let mut s = SessionState::new(&dec, cfg(3, None));
        for t in 0..3 {
            s.run_turn(&dec, &frame(t, 2.0 + t as f64), "go", TurnPolicy::Generate { allow_stop: false }).unwrap();
        }
        s.slide_window().unwrap();
        let c = s.cache();
        assert_eq!(c.count_role(|r| matches!(r, TokenRole::ActionTok | TokenRole::Prompt | TokenRole::MemoryTok)), 0);
        assert_eq!(c.len(), 3 * 9);
        assert_eq!(s.memory().len(), 1);
        assert!(s.window().is_empty());
        assert_eq!(s.session(), 1);
    }

    #[test]
    fn memory_rows_are_bound_and_counted() {
        let dec = small_decoder();
        let mut s = SessionState::new(&dec, cfg(2, None));
        for t in 0..3 {
            s.run_turn(&dec, &frame(t, 2.0), "go", TurnPolicy::Generate { allow_stop: false }).unwrap();
        }
        let log = s.cost_log();
        assert!(log[2].session_start);
        assert_eq!(log[2].memory_rows, 18);
        let prompt = build_session_prompt("go", 1, true).len();
        assert_eq!(log[2].prompt_tokens, prompt);
        assert_eq!(log[2].prefill_tokens, prompt + 11);
    }

    #[test]
    fn managed_decoding_matches_survivor_recompute() {
        let dec = small_decoder();
        let mut s = SessionState::new(&dec, cfg(2, Some(PruneParams::new(2, 0.0))));
        for t in 0..7u32 {
            let f = Frame { pose: Pose::new(1.0 + 0.25 * t as f64, 1.0, 0.6, 0.1 * t as f64), ..frame(t, 1.0 + 0.4 * (t % 3) as f64) };
            let out = s.run_turn(&dec, &f, "walk forward 2 meters", TurnPolicy::Generate { allow_stop: false }).unwrap();
            let (toks, pos) = survivor_sequence(s.cache());
            let oracle = dec.full_recompute_at(&toks, &pos);
            for (logits, p) in out.step_logits.iter().zip(&out.step_positions) {
                let i = pos.iter().position(|q| q == p).unwrap();
                assert!(logits.max_abs_diff(&oracle[i]) <= 1e-5, "turn {t}");
            }
        }
    }

    #[test]
    fn cost_curves_follow_accounting_rules() {
        let log: Vec<TurnCost> = (0..6)
            .map(|t| TurnCost {
                turn: t,
                session: t / 3,
                session_start: t % 3 == 0,
                prompt_tokens: if t < 3 { 50 } else { 58 },
                prefix_tokens: 2,
                observation_tokens: 196,
                memory_rows: if t < 3 { 0 } else { 300 },
                history_tokens: (t % 3) * 202,
                prefill_tokens: 0,
                decode_tokens: 4,
            })
            .collect();
        assert_eq!(prefill_count_curve(&log, CacheMode::FullTurns), vec![248, 198, 198, 198, 198, 198]);
        assert_eq!(prefill_count_curve(&log, CacheMode::SlidingWindow), vec![248, 198, 198, 556, 198, 198]);
        assert_eq!(prefill_count_curve(&log, CacheMode::SingleTurn), vec![248, 450, 652, 556, 758, 960]);
    }

    #[test]
    fn latency_model() {
        assert_eq!(modeled_latency(&[(0, 0)], 1e-3, 5e-3), vec![0.0]);
        let l = modeled_latency(&[(200, 4), (100, 4)], 1e-3, 5e-3);
        assert!((l[0] - 0.22).abs() < 1e-12);
        assert!(l[0] > l[1]);
    }
}
