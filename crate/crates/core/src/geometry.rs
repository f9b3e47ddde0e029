//! Patch back-projection and voxelization.
//!
//! Conventions: world `x`/`y` span the floor plane, `z` points up. A pose's
//! yaw is the heading about `z`, measured counter-clockwise from `+x`.
//! Patch `(px, py)` is row `px` (top to bottom) and column `py` (left to
//! right) of the `grid_h x grid_w` patch grid. Depth is the distance along
//! the camera forward axis (z-depth), not the ray length.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::worldsim::Frame;

pub const DEFAULT_HFOV_DEG: f64 = 79.0;
pub const DEFAULT_GRID: usize = 14;
pub const DEFAULT_MAX_RANGE: f64 = 10.0;
pub const DEFAULT_VOXEL_SIZE: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid depth {0} (must be in (0, max_range])")]
    InvalidDepth(f64),
}

pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*PI
    if y >= PI {
        y - 2.0 * PI
    } else {
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose { x, y, z, yaw: normalize_yaw(yaw) }
    }

    pub fn forward(&self) -> [f64; 2] {
        [self.yaw.cos(), self.yaw.sin()]
    }

    /// Unit vector to the camera's right on the floor plane.
    pub fn right(&self) -> [f64; 2] {
        [self.yaw.sin(), -self.yaw.cos()]
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        (self.x - p[0]).hypot(self.y - p[1])
    }
}

/// A rigid motion of the floor plane: rotation about the origin, then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarMotion {
    pub yaw: f64,
    pub tx: f64,
    pub ty: f64,
}

impl PlanarMotion {
    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.tx, s * p[0] + c * p[1] + self.ty, p[2]]
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let p = self.apply_point([pose.x, pose.y, pose.z]);
        Pose::new(p[0], p[1], p[2], pose.yaw + self.yaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    /// Horizontal field of view in radians; the vertical one is equal.
    pub hfov: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub max_range: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            hfov: DEFAULT_HFOV_DEG.to_radians(),
            grid_h: DEFAULT_GRID,
            grid_w: DEFAULT_GRID,
            max_range: DEFAULT_MAX_RANGE,
        }
    }
}

impl Intrinsics {
    /// Focal length in patch units.
    pub fn focal(&self) -> f64 {
        (self.grid_w as f64 / 2.0) / (self.hfov / 2.0).tan()
    }

    pub fn principal(&self) -> (f64, f64) {
        (self.grid_h as f64 / 2.0, self.grid_w as f64 / 2.0)
    }

    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Camera-frame slopes `(right, up)` per meter of depth for the patch center.
    pub fn ray_slopes(&self, px: usize, py: usize) -> (f64, f64) {
        let f = self.focal();
        let (cv, cu) = self.principal();
        let u = py as f64 + 0.5;
        let v = px as f64 + 0.5;
        ((u - cu) / f, -(v - cv) / f)
    }

    /// World-frame direction through the patch center, scaled so its forward
    /// component is one meter.
    pub fn ray_world(&self, px: usize, py: usize, pose: &Pose) -> [f64; 3] {
        let (r, u) = self.ray_slopes(px, py);
        let fw = pose.forward();
        let rt = pose.right();
        [fw[0] + r * rt[0], fw[1] + r * rt[1], u]
    }

    pub fn depth_valid(&self, depth: f64) -> bool {
        depth > 0.0 && depth <= self.max_range && depth.is_finite()
    }
}

pub fn backproject_patch(px: usize, py: usize, depth: f64, intr: &Intrinsics, pose: &Pose) -> Result<[f64; 3], GeometryError> {
    if !intr.depth_valid(depth) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    let dir = intr.ray_world(px, py, pose);
    Ok([pose.x + depth * dir[0], pose.y + depth * dir[1], pose.z + depth * dir[2]])
}

pub fn voxel_coord(point: [f64; 3], voxel_size: f64) -> [i64; 3] {
    point.map(|c| (c / voxel_size).floor() as i64)
}

/// Dense ids for voxel cells in first-seen order. Ids never change once assigned.
#[derive(Debug, Clone, Default)]
pub struct IdTable {
    ids: HashMap<[i64; 3], u32>,
}

impl IdTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, cell: [i64; 3]) -> Option<u32> {
        self.ids.get(&cell).copied()
    }

    pub fn intern(&mut self, cell: [i64; 3]) -> u32 {
        let next = self.ids.len() as u32;
        *self.ids.entry(cell).or_insert(next)
    }
}

pub fn voxelize(point: [f64; 3], voxel_size: f64, table: &mut IdTable) -> u32 {
    debug_assert!(point.iter().all(|c| c.is_finite()));
    table.intern(voxel_coord(point, voxel_size))
}

/// Integer voxel ids for a `T x H x W` block of patch tokens; `-1` marks invalid depth.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    t_len: usize,
    h: usize,
    w: usize,
    ids: Vec<i64>,
    /// Global frame index of each slice.
    frame_ids: Vec<u32>,
}

impl VoxelMap {
    /// Builds a map from raw ids laid out `t`-major, then row, then column.
    pub fn from_raw(t_len: usize, h: usize, w: usize, ids: Vec<i64>) -> Self {
        assert_eq!(ids.len(), t_len * h * w, "voxel map shape mismatch");
        assert!(ids.iter().all(|&v| v >= -1), "voxel ids must be >= -1");
        VoxelMap { t_len, h, w, ids, frame_ids: (0..t_len as u32).collect() }
    }

    pub fn with_frame_ids(mut self, frame_ids: Vec<u32>) -> Self {
        assert_eq!(frame_ids.len(), self.t_len);
        self.frame_ids = frame_ids;
        self
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.t_len, self.h, self.w)
    }

    pub fn frame_ids(&self) -> &[u32] {
        &self.frame_ids
    }

    pub fn get(&self, t: usize, x: usize, y: usize) -> i64 {
        self.ids[(t * self.h + x) * self.w + y]
    }

    pub fn set_invalid(&mut self, t: usize, x: usize, y: usize) {
        self.ids[(t * self.h + x) * self.w + y] = -1;
    }

    pub fn raw(&self) -> &[i64] {
        &self.ids
    }

    pub fn slice(&self, t: usize) -> &[i64] {
        &self.ids[t * self.h * self.w..(t + 1) * self.h * self.w]
    }

    pub fn valid_count(&self) -> usize {
        self.ids.iter().filter(|&&v| v >= 0).count()
    }

    /// CSV dump with header `t,x,y,voxel_id`; `t` is the global frame index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,voxel_id\n");
        for t in 0..self.t_len {
            for x in 0..self.h {
                for y in 0..self.w {
                    writeln!(out, "{},{},{},{}", self.frame_ids[t], x, y, self.get(t, x, y)).unwrap();
                }
            }
        }
        out
    }
}

/// Voxel ids of every patch of every frame, sharing one id table.
pub fn build_voxel_map(frames: &[Frame], intr: &Intrinsics, voxel_size: f64) -> VoxelMap {
    let mut table = IdTable::new();
    build_voxel_map_with(frames, intr, voxel_size, &mut table)
}

pub fn build_voxel_map_with(frames: &[Frame], intr: &Intrinsics, voxel_size: f64, table: &mut IdTable) -> VoxelMap {
    debug_assert!(frames.windows(2).all(|w| w[0].t < w[1].t), "frames must be ordered by t");
    let (h, w) = (intr.grid_h, intr.grid_w);
    let mut ids = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        for x in 0..h {
            for y in 0..w {
                let id = match backproject_patch(x, y, f.depth_at(x, y), intr, &f.pose) {
                    Ok(p) => voxelize(p, voxel_size, table) as i64,
                    Err(_) => -1,
                };
                ids.push(id);
            }
        }
    }
    VoxelMap { t_len: frames.len(), h, w, ids, frame_ids: frames.iter().map(|f| f.t).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3]) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9)
    }

    fn odd_grid() -> Intrinsics {
        Intrinsics { grid_h: 15, grid_w: 15, ..Intrinsics::default() }
    }

    #[test]
    fn yaw_normalization_range() {
        assert_eq!(normalize_yaw(PI), -PI);
        assert!((normalize_yaw(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        for k in -50..50 {
            let y = normalize_yaw(k as f64 * 0.37);
            assert!((-PI..PI).contains(&y));
        }
    }

    #[test]
    fn center_patch_lies_on_forward_axis() {
        let intr = odd_grid();
        let p = backproject_patch(7, 7, 2.5, &intr, &Pose::new(0.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(close(p, [2.5, 0.0, 0.0]));
        let p = backproject_patch(7, 7, 2.5, &intr, &Pose::new(0.0, 0.0, 0.0, PI / 2.0)).unwrap();
        assert!(close(p, [0.0, 2.5, 0.0]));
    }

    #[test]
    fn translation_carries_points() {
        let intr = Intrinsics::default();
        let a = backproject_patch(3, 11, 4.0, &intr, &Pose::new(0.0, 0.0, 0.6, 0.4)).unwrap();
        let b = backproject_patch(3, 11, 4.0, &intr, &Pose::new(1.5, -2.0, 0.6, 0.4)).unwrap();
        assert!(close(b, [a[0] + 1.5, a[1] - 2.0, a[2]]));
    }

    #[test]
    fn corner_patch_offsets_by_hand() {
        // 14x14 grid, hfov 79 deg: f = 7 / tan(39.5 deg); patch (0,0) center is
        // 6.5 patches left of and 6.5 above the principal point.
        let intr = Intrinsics::default();
        let f = 7.0 / (39.5f64).to_radians().tan();
        assert!((intr.focal() - 8.491_679).abs() < 1e-5);
        let p = backproject_patch(0, 0, 1.0, &intr, &Pose::new(0.0, 0.0, 0.0, 0.0)).unwrap();
        let lateral = 6.5 / f;
        assert!((lateral - 0.765_455).abs() < 1e-5);
        // yaw 0: forward +x, right -y, so a left patch has +y.
        assert!(close(p, [1.0, lateral, lateral]));
    }

    #[test]
    fn invalid_depth_rejected() {
        let intr = Intrinsics::default();
        let pose = Pose::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(backproject_patch(0, 0, 0.0, &intr, &pose), Err(GeometryError::InvalidDepth(0.0)));
        assert!(backproject_patch(0, 0, -1.0, &intr, &pose).is_err());
        assert!(backproject_patch(0, 0, 10.5, &intr, &pose).is_err());
        assert!(backproject_patch(0, 0, 10.0, &intr, &pose).is_ok());
    }

    #[test]
    fn voxel_cells() {
        let mut t = IdTable::new();
        assert_eq!(voxelize([0.1, 0.1, 0.1], 0.5, &mut t), voxelize([0.4, 0.3, 0.2], 0.5, &mut t));
        assert_ne!(voxelize([0.1, 0.1, 0.1], 0.5, &mut t), voxelize([0.6, 0.1, 0.1], 0.5, &mut t));
        assert_eq!(voxel_coord([-0.1, 0.0, 1.0], 0.5), [-1, 0, 2]);
    }

    #[test]
    fn ids_follow_first_seen_order() {
        let pts = [[0.1, 0.0, 0.0], [1.2, 0.0, 0.0], [0.2, 0.1, 0.1], [-3.0, 2.0, 0.0], [1.3, 0.1, 0.4]];
        // Replay: cells (0,0,0), (2,0,0), (0,0,0), (-6,4,0), (2,0,0)
        let mut t = IdTable::new();
        let ids: Vec<u32> = pts.iter().map(|&p| voxelize(p, 0.5, &mut t)).collect();
        assert_eq!(ids, vec![0, 1, 0, 2, 1]);
        assert_eq!(t.len(), 3);
    }
}
