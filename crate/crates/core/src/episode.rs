//! Drives one navigation episode through the slow-fast context.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextConfig, ContextError, MemoryReport, SessionState, TurnCost, TurnPolicy};
use crate::decoder::Decoder;
use crate::geometry::Pose;
use crate::metrics::{EpisodeResult, DEFAULT_SUCCESS_DISTANCE};
use crate::tokenspace::{Action, ACTIONS_PER_TURN};
use crate::worldsim::{render_frame, shortest_path_length, step_agent, Episode, Expert, WorldError};

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Context(#[from] ContextError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Shortest-path expert actions, teacher-forced through the decoder.
    Expert,
    /// Greedy decoding restricted to the action vocabulary.
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub context: ContextConfig,
    pub max_steps: usize,
    /// Hard cap on dialogue turns, regardless of steps.
    pub max_turns: Option<usize>,
    /// Whether the decoder policy may emit Stop.
    pub allow_stop: bool,
    pub success_distance: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            context: ContextConfig::default(),
            max_steps: 500,
            max_turns: None,
            allow_stop: true,
            success_distance: DEFAULT_SUCCESS_DISTANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnRecord {
    pub pose: Pose,
    pub actions: Vec<Action>,
    pub cost: TurnCost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub seed: u64,
    pub instruction: String,
    pub turns: Vec<TurnRecord>,
    pub memory: Vec<MemoryReport>,
    pub result: EpisodeResult,
    pub steps: usize,
    pub stopped: bool,
}

impl EpisodeLog {
    pub fn cost_log(&self) -> Vec<TurnCost> {
        self.turns.iter().map(|t| t.cost).collect()
    }
}

pub fn run_episode(decoder: &Decoder, episode: &Episode, cfg: &EpisodeConfig, policy: Policy) -> Result<EpisodeLog, EpisodeError> {
    let world = &episode.world;
    let intr = cfg.context.intrinsics;
    let expert = Expert::new(world, world.goal);
    let mut state = SessionState::new(decoder, cfg.context.clone());
    let mut pose = world.start;
    let mut positions = vec![pose.position()];
    let mut turns = Vec::new();
    let mut steps = 0;
    let mut stopped = false;

    while steps < cfg.max_steps && !stopped && cfg.max_turns.is_none_or(|m| turns.len() < m) {
        let frame = render_frame(world, &pose, state.global_turn() as u32, &intr)?;
        let budget = ACTIONS_PER_TURN.min(cfg.max_steps - steps);
        let outcome = match policy {
            Policy::Expert => {
                let mut planned = Vec::with_capacity(budget);
                let mut p = pose;
                while planned.len() < budget {
                    let a = expert.action(&p)?;
                    planned.push(a);
                    if a == Action::Stop {
                        break;
                    }
                    p = step_agent(world, &p, a);
                }
                state.run_turn(decoder, &frame, &episode.instruction, TurnPolicy::Forced(&planned))?
            }
            Policy::Decoder => state.run_turn(decoder, &frame, &episode.instruction, TurnPolicy::Generate { allow_stop: cfg.allow_stop })?,
        };
        let record_pose = pose;
        for &a in outcome.actions.iter().take(budget) {
            steps += 1;
            if a == Action::Stop {
                stopped = true;
                break;
            }
            pose = step_agent(world, &pose, a);
            positions.push(pose.position());
        }
        turns.push(TurnRecord { pose: record_pose, actions: outcome.actions, cost: outcome.cost });
    }

    let result = EpisodeResult {
        goal: world.goal,
        positions,
        reference: episode.reference_path(),
        shortest_length: shortest_path_length(world, world.start.position(), world.goal),
        success_distance: cfg.success_distance,
    };
    Ok(EpisodeLog {
        episode: episode.id,
        seed: episode.seed,
        instruction: episode.instruction.clone(),
        turns,
        memory: state.memory_reports().to_vec(),
        result,
        steps,
        stopped,
    })
}
