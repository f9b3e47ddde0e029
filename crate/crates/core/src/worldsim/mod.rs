//! Synthetic occupancy-grid worlds, depth rendering, agent kinematics and
//! a shortest-path expert.

mod nav;
mod render;

pub use nav::{expert_action, shortest_path_length, step_agent, DistanceField, Expert};
pub use render::{render_depth, render_frame};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::tokenspace::{Action, TURN_DEGREES};

pub const CELL_SIZE: f64 = 0.25;
pub const WALL_HEIGHT: f64 = 2.0;
pub const CAMERA_HEIGHT: f64 = 0.6;
/// The expert stops once this close to the goal (one forward step).
pub const EXPERT_GOAL_RADIUS: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("pose ({x:.3}, {y:.3}) is inside an occupied cell")]
    PoseInCollision { x: f64, y: f64 },
    #[error("goal is unreachable from ({x:.3}, {y:.3})")]
    Unreachable { x: f64, y: f64 },
    #[error("invalid world file: {0}")]
    Format(String),
}

/// Integer grid cell `(column, row)`; column runs along `x`, row along `y`.
pub type Cell = (i32, i32);

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    width: usize,
    height: usize,
    occupied: Vec<bool>,
    pub cell_size: f64,
    pub wall_height: f64,
    pub camera_height: f64,
    pub start: Pose,
    pub goal: [f64; 2],
}

impl World {
    /// A world from `'#'`/`'.'` rows. Row 0 is `y` in `[0, cell)`.
    pub fn from_rows(rows: &[&str], start: Pose, goal: [f64; 2]) -> Result<World, WorldError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if height == 0 || width == 0 {
            return Err(WorldError::Format("empty grid".into()));
        }
        let mut occupied = Vec::with_capacity(width * height);
        for row in rows {
            if row.chars().count() != width {
                return Err(WorldError::Format("ragged grid rows".into()));
            }
            for c in row.chars() {
                occupied.push(match c {
                    '#' => true,
                    '.' => false,
                    other => return Err(WorldError::Format(format!("unexpected cell character `{other}`"))),
                });
            }
        }
        let world = World {
            width,
            height,
            occupied,
            cell_size: CELL_SIZE,
            wall_height: WALL_HEIGHT,
            camera_height: CAMERA_HEIGHT,
            start: Pose { z: CAMERA_HEIGHT, ..start },
            goal,
        };
        if !world.border_closed() {
            return Err(WorldError::Format("border cells must be occupied".into()));
        }
        if !world.occupied.iter().any(|o| !o) {
            return Err(WorldError::Format("no free cell".into()));
        }
        Ok(world)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rows(&self) -> Vec<String> {
        (0..self.height)
            .map(|r| (0..self.width).map(|c| if self.occupied[r * self.width + c] { '#' } else { '.' }).collect())
            .collect()
    }

    fn border_closed(&self) -> bool {
        (0..self.width).all(|c| self.occupied[c] && self.occupied[(self.height - 1) * self.width + c])
            && (0..self.height).all(|r| self.occupied[r * self.width] && self.occupied[r * self.width + self.width - 1])
    }

    /// Out-of-bounds cells count as occupied.
    pub fn is_occupied(&self, cell: Cell) -> bool {
        let (c, r) = cell;
        if c < 0 || r < 0 || c as usize >= self.width || r as usize >= self.height {
            return true;
        }
        self.occupied[r as usize * self.width + c as usize]
    }

    pub fn cell_of(&self, p: [f64; 2]) -> Cell {
        ((p[0] / self.cell_size).floor() as i32, (p[1] / self.cell_size).floor() as i32)
    }

    pub fn cell_center(&self, cell: Cell) -> [f64; 2] {
        [(cell.0 as f64 + 0.5) * self.cell_size, (cell.1 as f64 + 0.5) * self.cell_size]
    }

    pub fn is_free_point(&self, p: [f64; 2]) -> bool {
        !self.is_occupied(self.cell_of(p))
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for r in 0..self.height as i32 {
            for c in 0..self.width as i32 {
                if !self.is_occupied((c, r)) {
                    out.push((c, r));
                }
            }
        }
        out
    }

    fn set(&mut self, cell: Cell, occupied: bool) {
        self.occupied[cell.1 as usize * self.width + cell.0 as usize] = occupied;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&WorldFile {
            rows: self.rows(),
            start: self.start,
            goal: self.goal,
        })
        .expect("world serializes")
    }

    pub fn from_json(src: &str) -> Result<World, WorldError> {
        let file: WorldFile = serde_json::from_str(src).map_err(|e| WorldError::Format(e.to_string()))?;
        let rows: Vec<&str> = file.rows.iter().map(String::as_str).collect();
        World::from_rows(&rows, file.start, file.goal)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WorldFile {
    rows: Vec<String>,
    start: Pose,
    goal: [f64; 2],
}

/// One observation: patch-center depths at a pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: u32,
    pub pose: Pose,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major depths in meters, `-1.0` where invalid.
    pub depth: Vec<f64>,
}

impl Frame {
    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[x * self.grid_w + y]
    }
}

fn carve_rect(world: &mut World, c0: i32, r0: i32, c1: i32, r1: i32) {
    let (w, h) = (world.width as i32, world.height as i32);
    for r in r0.max(1)..=r1.min(h - 2) {
        for c in c0.max(1)..=c1.min(w - 2) {
            world.set((c, r), false);
        }
    }
}

/// A seeded world of rectangular rooms joined by 3-cell-wide corridors, with
/// a start pose and a reachable goal at least 2 m (and at least 60% of the
/// farthest reachable distance) away along the grid.
pub fn generate_world(seed: u64, size: usize) -> World {
    assert!(size >= 8, "world size must be at least 8x8 cells");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut world = World {
            width: size,
            height: size,
            occupied: vec![true; size * size],
            cell_size: CELL_SIZE,
            wall_height: WALL_HEIGHT,
            camera_height: CAMERA_HEIGHT,
            start: Pose::new(0.0, 0.0, CAMERA_HEIGHT, 0.0),
            goal: [0.0, 0.0],
        };
        let s = size as i32;
        let rooms = rng.gen_range(2..=5);
        let mut centers = Vec::new();
        for _ in 0..rooms {
            let rw = rng.gen_range(3..=(s / 2).max(3));
            let rh = rng.gen_range(3..=(s / 2).max(3));
            let c0 = rng.gen_range(1..=(s - 1 - rw).max(1));
            let r0 = rng.gen_range(1..=(s - 1 - rh).max(1));
            carve_rect(&mut world, c0, r0, c0 + rw - 1, r0 + rh - 1);
            centers.push((c0 + rw / 2, r0 + rh / 2));
        }
        for pair in centers.windows(2) {
            let ((ca, ra), (cb, rb)) = (pair[0], pair[1]);
            if rng.gen_bool(0.5) {
                carve_rect(&mut world, ca.min(cb) - 1, ra - 1, ca.max(cb) + 1, ra + 1);
                carve_rect(&mut world, cb - 1, ra.min(rb) - 1, cb + 1, ra.max(rb) + 1);
            } else {
                carve_rect(&mut world, ca - 1, ra.min(rb) - 1, ca + 1, ra.max(rb) + 1);
                carve_rect(&mut world, ca.min(cb) - 1, rb - 1, ca.max(cb) + 1, rb + 1);
            }
        }

        let free = world.free_cells();
        if free.len() < 2 {
            continue;
        }
        let start_cell = free[rng.gen_range(0..free.len())];
        let start_xy = world.cell_center(start_cell);
        let field = DistanceField::new(&world, start_cell);
        // Goals come from the far part of the reachable region so routes span several windows.
        let reach = free.iter().map(|&c| field.get(c)).filter(|d| d.is_finite()).fold(0.0, f64::max);
        let min_goal = (0.6 * reach).max(2.0);
        let far: Vec<Cell> = free.iter().copied().filter(|&c| field.get(c).is_finite() && field.get(c) >= min_goal).collect();
        if far.is_empty() {
            continue;
        }
        let goal_cell = far[rng.gen_range(0..far.len())];
        let heading = rng.gen_range(0..24) as f64 * TURN_DEGREES;
        world.start = Pose::new(start_xy[0], start_xy[1], CAMERA_HEIGHT, heading.to_radians());
        world.goal = world.cell_center(goal_cell);
        return world;
    }
}

/// A generated world plus its expert reference rollout.
#[derive(Debug, Clone)]
pub struct Episode {
    pub id: usize,
    pub seed: u64,
    pub world: World,
    pub instruction: String,
    pub reference_poses: Vec<Pose>,
    pub reference_actions: Vec<Action>,
}

impl Episode {
    pub fn start(&self) -> Pose {
        self.world.start
    }

    pub fn goal(&self) -> [f64; 2] {
        self.world.goal
    }

    pub fn reference_path(&self) -> Vec<[f64; 2]> {
        self.reference_poses.iter().map(Pose::position).collect()
    }
}

/// Rolls the expert from the world's start until Stop or `max_steps` actions.
pub fn expert_rollout(world: &World, max_steps: usize) -> Result<(Vec<Pose>, Vec<Action>), WorldError> {
    let expert = Expert::new(world, world.goal);
    let mut pose = world.start;
    let mut poses = vec![pose];
    let mut actions = Vec::new();
    while actions.len() < max_steps {
        let a = expert.action(&pose)?;
        actions.push(a);
        if a == Action::Stop {
            break;
        }
        pose = step_agent(world, &pose, a);
        poses.push(pose);
    }
    Ok((poses, actions))
}

/// Landmark-free instruction text summarizing an action sequence.
pub fn describe_route(actions: &[Action]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut i = 0;
    while i < actions.len() {
        let a = actions[i];
        let mut j = i;
        while j < actions.len() && actions[j] == a {
            j += 1;
        }
        match a {
            Action::MoveForward => {
                let meters = (((j - i) as f64 * 0.25).round() as usize).max(1);
                let unit = if meters == 1 { "meter" } else { "meters" };
                parts.push(format!("walk forward {meters} {unit}"));
            }
            Action::TurnLeft => parts.push("turn left".into()),
            Action::TurnRight => parts.push("turn right".into()),
            Action::Stop => {}
        }
        i = j;
    }
    parts.truncate(6);
    if parts.is_empty() {
        return "stop at the goal".into();
    }
    format!("{} and stop at the goal", parts.join(" then "))
}

pub fn generate_episode(id: usize, seed: u64, size: usize, max_steps: usize) -> Result<Episode, WorldError> {
    let world = generate_world(seed, size);
    let (reference_poses, reference_actions) = expert_rollout(&world, max_steps)?;
    Ok(Episode {
        id,
        seed,
        instruction: describe_route(&reference_actions),
        world,
        reference_poses,
        reference_actions,
    })
}
