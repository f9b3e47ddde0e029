use super::{Frame, World, WorldError};
use crate::geometry::{Intrinsics, Pose};

/// Forward distance along `dir` (scaled so its horizontal forward component
/// is one) to the first wall, floor or ceiling hit.
fn cast(world: &World, origin: [f64; 3], dir: [f64; 3], limit: f64) -> Option<f64> {
    let plane = if dir[2] < 0.0 {
        -origin[2] / dir[2]
    } else if dir[2] > 0.0 {
        (world.wall_height - origin[2]) / dir[2]
    } else {
        f64::INFINITY
    };
    let limit = limit.min(plane);

    let c = world.cell_size;
    let (mut cx, mut cy) = world.cell_of([origin[0], origin[1]]);
    let step_x = if dir[0] > 0.0 { 1 } else { -1 };
    let step_y = if dir[1] > 0.0 { 1 } else { -1 };
    let boundary = |cell: i32, step: i32| (cell + (step > 0) as i32) as f64 * c;
    let mut t_max_x = if dir[0] != 0.0 { (boundary(cx, step_x) - origin[0]) / dir[0] } else { f64::INFINITY };
    let mut t_max_y = if dir[1] != 0.0 { (boundary(cy, step_y) - origin[1]) / dir[1] } else { f64::INFINITY };
    let dt_x = if dir[0] != 0.0 { c / dir[0].abs() } else { f64::INFINITY };
    let dt_y = if dir[1] != 0.0 { c / dir[1].abs() } else { f64::INFINITY };

    loop {
        let t = if t_max_x < t_max_y {
            cx += step_x;
            let t = t_max_x;
            t_max_x += dt_x;
            t
        } else {
            cy += step_y;
            let t = t_max_y;
            t_max_y += dt_y;
            t
        };
        if t > limit {
            break;
        }
        if world.is_occupied((cx, cy)) {
            return Some(t);
        }
    }
    plane.is_finite().then_some(plane)
}

/// Patch-center depths seen from `pose`; `-1` beyond `max_range`.
pub fn render_depth(world: &World, pose: &Pose, intr: &Intrinsics) -> Result<Vec<f64>, WorldError> {
    if !world.is_free_point(pose.position()) {
        return Err(WorldError::PoseInCollision { x: pose.x, y: pose.y });
    }
    let origin = [pose.x, pose.y, pose.z];
    let mut depth = Vec::with_capacity(intr.patches());
    for px in 0..intr.grid_h {
        for py in 0..intr.grid_w {
            let dir = intr.ray_world(px, py, pose);
            let d = match cast(world, origin, dir, intr.max_range) {
                Some(t) if intr.depth_valid(t) => t,
                _ => -1.0,
            };
            depth.push(d);
        }
    }
    Ok(depth)
}

pub fn render_frame(world: &World, pose: &Pose, t: u32, intr: &Intrinsics) -> Result<Frame, WorldError> {
    Ok(Frame {
        t,
        pose: *pose,
        grid_h: intr.grid_h,
        grid_w: intr.grid_w,
        depth: render_depth(world, pose, intr)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject_patch;
    use std::f64::consts::PI;

    fn box_world(rows: &[&str]) -> World {
        World::from_rows(rows, Pose::new(0.0, 0.0, 0.6, 0.0), [0.0, 0.0]).unwrap()
    }

    fn odd() -> Intrinsics {
        Intrinsics { grid_h: 15, grid_w: 15, ..Intrinsics::default() }
    }

    #[test]
    fn wall_one_meter_ahead() {
        // Agent at x = 0.5 facing +x; the wall column starts at x = 1.5.
        let w = box_world(&[
            "#########",
            "#.....#.#",
            "#.....#.#",
            "#.....#.#",
            "#########",
        ]);
        let pose = Pose::new(0.5, 0.625, 0.6, 0.0);
        let depth = render_depth(&w, &pose, &odd()).unwrap();
        let center = depth[7 * 15 + 7];
        assert!((center - 1.0).abs() <= w.cell_size, "center depth {center}");
        assert!((center - 1.0).abs() < 1e-9);
    }

    #[test]
    fn collision_is_rejected() {
        let w = box_world(&["###", "#.#", "###"]);
        let err = render_depth(&w, &Pose::new(0.1, 0.1, 0.6, 0.0), &Intrinsics::default());
        assert!(matches!(err, Err(WorldError::PoseInCollision { .. })));
    }

    #[test]
    fn turning_around_in_asymmetric_room_changes_depth() {
        let w = box_world(&[
            "##########",
            "#........#",
            "#........#",
            "#........#",
            "##########",
        ]);
        let intr = Intrinsics::default();
        let a = render_depth(&w, &Pose::new(0.6, 0.625, 0.6, 0.0), &intr).unwrap();
        let b = render_depth(&w, &Pose::new(0.6, 0.625, 0.6, PI), &intr).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn long_corridor_is_out_of_range_at_center() {
        let row_wall = "#".repeat(60);
        let row_free = format!("#{}#", ".".repeat(58));
        let mut rows: Vec<&str> = vec![&row_wall];
        rows.extend(std::iter::repeat_n(row_free.as_str(), 11));
        rows.push(&row_wall);
        let w = box_world(&rows);
        let depth = render_depth(&w, &Pose::new(0.375, 1.625, 0.6, 0.0), &Intrinsics::default()).unwrap();
        // Rows 6 and 7 straddle the horizon; floor and ceiling hits there exceed 10 m.
        for (x, y) in [(6, 6), (6, 7), (7, 6), (7, 7)] {
            assert_eq!(depth[x * 14 + y], -1.0);
        }
        assert!(depth.iter().any(|&d| d > 0.0));
    }

    #[test]
    fn back_projected_hits_lie_on_surfaces() {
        let w = crate::worldsim::generate_world(5, 20);
        let intr = Intrinsics::default();
        let pose = w.start;
        let depth = render_depth(&w, &pose, &intr).unwrap();
        for px in 0..14 {
            for py in 0..14 {
                let d = depth[px * 14 + py];
                if d < 0.0 {
                    continue;
                }
                let p = backproject_patch(px, py, d, &intr, &pose).unwrap();
                let on_plane = p[2].abs() < 1e-6 || (p[2] - w.wall_height).abs() < 1e-6;
                // A wall hit sits on the boundary of an occupied cell: nudging the
                // point by a hair lands inside one.
                let eps = 1e-6;
                let near_wall = [(-eps, 0.0), (eps, 0.0), (0.0, -eps), (0.0, eps)]
                    .iter()
                    .any(|(dx, dy)| w.is_occupied(w.cell_of([p[0] + dx, p[1] + dy])));
                assert!(on_plane || near_wall, "patch ({px},{py}) at {p:?}");
            }
        }
    }
}
