use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;

use super::{Cell, World, WorldError, EXPERT_GOAL_RADIUS};
use crate::geometry::{normalize_yaw, Pose};
use crate::tokenspace::{Action, FORWARD_METERS, TURN_DEGREES};

pub fn step_agent(world: &World, pose: &Pose, action: Action) -> Pose {
    let turn = TURN_DEGREES.to_radians();
    match action {
        Action::TurnLeft => Pose { yaw: normalize_yaw(pose.yaw + turn), ..*pose },
        Action::TurnRight => Pose { yaw: normalize_yaw(pose.yaw - turn), ..*pose },
        Action::MoveForward => {
            let f = pose.forward();
            let target = [pose.x + FORWARD_METERS * f[0], pose.y + FORWARD_METERS * f[1]];
            if world.is_free_point(target) {
                Pose { x: target[0], y: target[1], ..*pose }
            } else {
                *pose
            }
        }
        Action::Stop => *pose,
    }
}

const NEIGHBORS: [(i32, i32); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

/// Grid moves out of `cell` with their length in cells. Diagonals need both
/// adjacent orthogonal cells free.
pub(crate) fn moves(world: &World, cell: Cell) -> impl Iterator<Item = (Cell, f64)> + '_ {
    NEIGHBORS.iter().filter_map(move |&(dc, dr)| {
        let next = (cell.0 + dc, cell.1 + dr);
        if world.is_occupied(next) {
            return None;
        }
        if dc != 0 && dr != 0 {
            if world.is_occupied((cell.0 + dc, cell.1)) || world.is_occupied((cell.0, cell.1 + dr)) {
                return None;
            }
            return Some((next, SQRT_2));
        }
        Some((next, 1.0))
    })
}

#[derive(PartialEq)]
struct Entry(f64, Cell);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra distances in meters from every cell to a source cell.
#[derive(Debug, Clone)]
pub struct DistanceField {
    width: usize,
    height: usize,
    dist: Vec<f64>,
}

impl DistanceField {
    pub fn new(world: &World, source: Cell) -> Self {
        let (width, height) = (world.width(), world.height());
        let mut dist = vec![f64::INFINITY; width * height];
        let mut field = DistanceField { width, height, dist: Vec::new() };
        if world.is_occupied(source) {
            field.dist = dist;
            return field;
        }
        let idx = |c: Cell| c.1 as usize * width + c.0 as usize;
        let mut heap = BinaryHeap::new();
        dist[idx(source)] = 0.0;
        heap.push(Entry(0.0, source));
        while let Some(Entry(d, cell)) = heap.pop() {
            if d > dist[idx(cell)] {
                continue;
            }
            for (next, len) in moves(world, cell) {
                let nd = d + len * world.cell_size;
                if nd < dist[idx(next)] {
                    dist[idx(next)] = nd;
                    heap.push(Entry(nd, next));
                }
            }
        }
        field.dist = dist;
        field
    }

    pub fn get(&self, cell: Cell) -> f64 {
        let (c, r) = cell;
        if c < 0 || r < 0 || c as usize >= self.width || r as usize >= self.height {
            return f64::INFINITY;
        }
        self.dist[r as usize * self.width + c as usize]
    }
}

/// 8-connected grid distance between the cells holding `a` and `b`; infinite when unreachable.
pub fn shortest_path_length(world: &World, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (ca, cb) = (world.cell_of(a), world.cell_of(b));
    if world.is_occupied(ca) || world.is_occupied(cb) {
        return f64::INFINITY;
    }
    DistanceField::new(world, cb).get(ca)
}

/// Shortest-path follower toward a fixed goal. The distance field is built once.
#[derive(Debug, Clone)]
pub struct Expert<'w> {
    world: &'w World,
    goal: [f64; 2],
    goal_cell: Cell,
    field: DistanceField,
    pub goal_radius: f64,
}

const LOS_STEP: f64 = 0.05;
const CLEARANCE: f64 = 0.08;

impl<'w> Expert<'w> {
    pub fn new(world: &'w World, goal: [f64; 2]) -> Self {
        let goal_cell = world.cell_of(goal);
        Expert {
            world,
            goal,
            goal_cell,
            field: DistanceField::new(world, goal_cell),
            goal_radius: EXPERT_GOAL_RADIUS,
        }
    }

    /// Cells from `start` (exclusive) down the distance field to the goal cell.
    fn path_from(&self, start: Cell) -> Vec<Cell> {
        let mut path = Vec::new();
        let mut cur = start;
        while cur != self.goal_cell {
            let here = self.field.get(cur);
            let next = moves(self.world, cur)
                .map(|(n, len)| (n, self.field.get(n) + len * self.world.cell_size))
                .filter(|(n, _)| self.field.get(*n) < here)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            match next {
                Some((n, _)) => {
                    path.push(n);
                    cur = n;
                }
                None => break,
            }
        }
        path
    }

    fn clear_point(&self, p: [f64; 2]) -> bool {
        [(0.0, 0.0), (CLEARANCE, 0.0), (-CLEARANCE, 0.0), (0.0, CLEARANCE), (0.0, -CLEARANCE)]
            .iter()
            .all(|(dx, dy)| self.world.is_free_point([p[0] + dx, p[1] + dy]))
    }

    fn line_of_sight(&self, from: [f64; 2], to: [f64; 2]) -> bool {
        let len = (to[0] - from[0]).hypot(to[1] - from[1]);
        let n = (len / LOS_STEP).ceil() as usize;
        (1..=n).all(|i| {
            let s = i as f64 / n as f64;
            let p = [from[0] + s * (to[0] - from[0]), from[1] + s * (to[1] - from[1])];
            // Points right next to the agent only need to be free.
            if s * len < 0.1 {
                self.world.is_free_point(p)
            } else {
                self.clear_point(p)
            }
        })
    }

    /// Yaw the agent ends up at when turning toward `target` under the 7.5 degree rule.
    fn aligned_yaw(&self, pose: &Pose, target: [f64; 2]) -> f64 {
        let desired = (target[1] - pose.y).atan2(target[0] - pose.x);
        let turn = TURN_DEGREES.to_radians();
        let err = normalize_yaw(desired - pose.yaw);
        let steps = (err.abs() / turn - 0.5 - 1e-9).ceil().max(0.0);
        normalize_yaw(pose.yaw + err.signum() * steps * turn)
    }

    fn forward_free(&self, pose: &Pose, yaw: f64) -> bool {
        let p = [pose.x + FORWARD_METERS * yaw.cos(), pose.y + FORWARD_METERS * yaw.sin()];
        self.world.is_free_point(p)
    }

    pub fn action(&self, pose: &Pose) -> Result<Action, WorldError> {
        let here = pose.position();
        if pose.distance_to(self.goal) <= self.goal_radius {
            return Ok(Action::Stop);
        }
        let cell = self.world.cell_of(here);
        if !self.field.get(cell).is_finite() {
            return Err(WorldError::Unreachable { x: pose.x, y: pose.y });
        }

        let mut waypoints: Vec<[f64; 2]> = self.path_from(cell).into_iter().map(|c| self.world.cell_center(c)).collect();
        if let Some(last) = waypoints.last_mut() {
            *last = self.goal;
        } else {
            waypoints.push(self.goal);
        }
        let target = waypoints
            .iter()
            .rev()
            .copied()
            .find(|&w| self.line_of_sight(here, w) && self.forward_free(pose, self.aligned_yaw(pose, w)))
            .unwrap_or(waypoints[0]);

        let desired = (target[1] - pose.y).atan2(target[0] - pose.x);
        let err = normalize_yaw(desired - pose.yaw).to_degrees();
        let tolerance = TURN_DEGREES / 2.0 + 1e-9;
        Ok(if err > tolerance {
            Action::TurnLeft
        } else if err < -tolerance {
            Action::TurnRight
        } else {
            Action::MoveForward
        })
    }
}

/// One-off expert decision; builds a fresh distance field.
pub fn expert_action(world: &World, pose: &Pose, goal: [f64; 2]) -> Result<Action, WorldError> {
    Expert::new(world, goal).action(pose)
}
