use proptest::prelude::*;

use slowfast::context::{ContextConfig, SessionState, TurnPolicy};
use slowfast::decoder::{survivor_sequence, Decoder, ModelConfig};
use slowfast::geometry::Intrinsics;
use slowfast::pruner::PruneParams;
use slowfast::tokenspace::{ActionScheme, TokenRole};
use slowfast::worldsim::{generate_world, render_frame, step_agent};

const GRID: usize = 6;

#[derive(Debug, Clone)]
struct Setup {
    window: usize,
    memory_frames: usize,
    pruning: Option<PruneParams>,
    scheme: ActionScheme,
    world_seed: u64,
    turns: usize,
}

fn setup() -> impl Strategy<Value = Setup> {
    (
        1usize..=4,
        1usize..=4,
        prop::option::of((1usize..=4, prop::sample::select(vec![0.0, 0.1, 0.3]))),
        prop::sample::select(vec![ActionScheme::SymbolicSingle, ActionScheme::WordSingle, ActionScheme::NaturalPhrase]),
        0u64..1000,
        4usize..=14,
    )
        .prop_map(|(window, memory_frames, pruning, scheme, world_seed, turns)| Setup {
            window,
            memory_frames,
            pruning: pruning.map(|(k, th)| PruneParams::new(k, th)),
            scheme,
            world_seed,
            turns,
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    /// Every logit produced through reuse, eviction, offload and pruning
    /// equals a fresh forward pass over the surviving tokens at their
    /// original positions; the window and memory invariants hold throughout.
    #[test]
    fn managed_episode_matches_recompute(s in setup()) {
        let intr = Intrinsics { grid_h: GRID, grid_w: GRID, ..Intrinsics::default() };
        let dec = Decoder::new(ModelConfig { grid_h: GRID, grid_w: GRID, ..ModelConfig::toy(s.world_seed) });
        let world = generate_world(s.world_seed, 20);
        let cfg = ContextConfig { window: s.window, memory_frames: s.memory_frames, scheme: s.scheme, pruning: s.pruning, voxel_size: 0.5, intrinsics: intr };
        let mut state = SessionState::new(&dec, cfg);
        let mut pose = world.start;
        let mut blocks_before: Vec<Vec<(u64, Vec<f64>)>> = Vec::new();

        for t in 0..s.turns {
            let frame = render_frame(&world, &pose, t as u32, &intr).unwrap();
            let out = state.run_turn(&dec, &frame, "walk forward then turn left", TurnPolicy::Generate { allow_stop: false }).unwrap();
            for &a in &out.actions {
                pose = step_agent(&world, &pose, a);
            }

            let (toks, pos) = survivor_sequence(state.cache());
            let oracle = dec.full_recompute_at(&toks, &pos);
            for (logits, p) in out.step_logits.iter().zip(&out.step_positions) {
                let i = pos.iter().position(|q| q == p).unwrap();
                prop_assert!(logits.max_abs_diff(&oracle[i]) <= 1e-5, "turn {t}");
            }

            // Window bound.
            prop_assert!(state.window().len() <= s.window);
            let obs = state.cache().count_role(TokenRole::is_observation);
            prop_assert!(obs <= s.window * GRID * GRID + state.memory_rows());

            // Memory blocks are appended once per window and only ever shrink,
            // with surviving rows unchanged.
            prop_assert_eq!(state.memory().len(), t / s.window);
            for (j, before) in blocks_before.iter().enumerate() {
                let now = &state.memory()[j];
                prop_assert!(now.rows.len() <= before.len());
                for row in &now.rows {
                    let old = before.iter().find(|(p, _)| *p == row.meta.position);
                    prop_assert!(old.is_some_and(|(_, k)| *k == row.keys[0]));
                }
                prop_assert_eq!(now.rows.len(), now.retained.iter().filter(|&&b| b).count());
            }
            blocks_before = state.memory().iter().map(|b| b.rows.iter().map(|r| (r.meta.position, r.keys[0].clone())).collect()).collect();
        }
    }
}

#[test]
fn unpruned_block_holds_every_sampled_patch() {
    let intr = Intrinsics::default();
    let dec = Decoder::new(ModelConfig::toy(9));
    let world = generate_world(3, 24);
    let mut state = SessionState::new(&dec, ContextConfig { pruning: None, ..ContextConfig::default() });
    for t in 0..9 {
        let frame = render_frame(&world, &world.start, t, &intr).unwrap();
        state.run_turn(&dec, &frame, "stop at the goal", TurnPolicy::Generate { allow_stop: false }).unwrap();
    }
    assert_eq!(state.memory().len(), 1);
    assert_eq!(state.memory()[0].rows.len(), 8 * 196);
    assert_eq!(state.memory_reports()[0].prune_ratio, 0.0);
}
