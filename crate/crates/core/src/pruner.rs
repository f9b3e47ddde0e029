//! Voxel-based spatial pruning of observation tokens.
//!
//! Frames are grouped into periods of `stride` consecutive slices. Inside a
//! period, tokens that fall into the same voxel compete and only the newest
//! one survives. A frame left with fewer than `threshold * H * W` survivors
//! is then dropped entirely.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{KvCache, RowMeta};
use crate::geometry::VoxelMap;
use crate::tokenspace::PatchToken;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneParams {
    pub stride: usize,
    pub threshold: f64,
}

impl Default for PruneParams {
    fn default() -> Self {
        PruneParams { stride: 8, threshold: 0.1 }
    }
}

impl PruneParams {
    pub fn new(stride: usize, threshold: f64) -> Self {
        assert!(stride >= 1, "stride must be >= 1");
        assert!((0.0..=1.0).contains(&threshold), "threshold must lie in [0, 1]");
        PruneParams { stride, threshold }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("patch (t={frame_t}, x={x}, y={y}) lies outside the mask")]
    CoordinateMismatch { frame_t: u32, x: u16, y: u16 },
}

/// Binary keep-mask with the same shape and frame ids as its voxel map.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    t_len: usize,
    h: usize,
    w: usize,
    bits: Vec<bool>,
    dropped: Vec<bool>,
    frame_ids: Vec<u32>,
}

impl PruneMask {
    pub fn all(v: &VoxelMap, keep: bool) -> Self {
        let (t_len, h, w) = v.shape();
        PruneMask {
            t_len,
            h,
            w,
            bits: vec![keep; t_len * h * w],
            dropped: vec![false; t_len],
            frame_ids: v.frame_ids().to_vec(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.t_len, self.h, self.w)
    }

    pub fn get(&self, t: usize, x: usize, y: usize) -> bool {
        self.bits[(t * self.h + x) * self.w + y]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Whether the frame-threshold rule zeroed slice `t`.
    pub fn frame_dropped(&self, t: usize) -> bool {
        self.dropped[t]
    }

    pub fn retained(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn retained_in(&self, t: usize) -> usize {
        self.bits[t * self.h * self.w..(t + 1) * self.h * self.w].iter().filter(|&&b| b).count()
    }

    fn slot(&self, frame_t: u32, x: u16, y: u16) -> Option<usize> {
        let t = self.frame_ids.iter().position(|&f| f == frame_t)?;
        let (x, y) = (x as usize, y as usize);
        (x < self.h && y < self.w).then(|| (t * self.h + x) * self.w + y)
    }

    /// Keep-bit for a patch token, or an error when it lies outside the mask.
    pub fn keeps(&self, patch: &PatchToken) -> Result<bool, PruneError> {
        self.slot(patch.frame_t, patch.patch_x, patch.patch_y)
            .map(|i| self.bits[i])
            .ok_or(PruneError::CoordinateMismatch { frame_t: patch.frame_t, x: patch.patch_x, y: patch.patch_y })
    }
}

pub fn voxel_prune(v: &VoxelMap, params: PruneParams) -> PruneMask {
    let (t_len, h, w) = v.shape();
    let mut latest: HashMap<(usize, i64), (usize, usize, usize)> = HashMap::new();
    for t in 0..t_len {
        let period = t / params.stride;
        for x in 0..h {
            for y in 0..w {
                let voxel = v.get(t, x, y);
                if voxel < 0 {
                    continue;
                }
                // Scan order is (t, x, y) ascending, so `>=` also lets the later
                // patch win a same-frame tie.
                match latest.get(&(period, voxel)) {
                    Some(&(lt, _, _)) if t < lt => {}
                    _ => {
                        latest.insert((period, voxel), (t, x, y));
                    }
                }
            }
        }
    }

    let mut mask = PruneMask::all(v, false);
    for &(t, x, y) in latest.values() {
        mask.bits[(t * h + x) * w + y] = true;
    }
    let floor = params.threshold * (h * w) as f64;
    for t in 0..t_len {
        if (mask.retained_in(t) as f64) < floor {
            mask.bits[t * h * w..(t + 1) * h * w].iter_mut().for_each(|b| *b = false);
            mask.dropped[t] = true;
        }
    }
    mask
}

/// Filters `items` by the mask. Items without patch coordinates pass through.
pub fn apply_mask<T>(items: Vec<T>, patch_of: impl Fn(&T) -> Option<PatchToken>, mask: &PruneMask) -> Result<Vec<T>, PruneError> {
    let keep: Vec<bool> = items
        .iter()
        .map(|it| patch_of(it).map_or(Ok(true), |p| mask.keeps(&p)))
        .collect::<Result<_, _>>()?;
    Ok(items.into_iter().zip(keep).filter_map(|(it, k)| k.then_some(it)).collect())
}

/// Evicts observation rows the mask drops. Returns the number of rows removed.
pub fn apply_mask_to_cache(cache: &mut KvCache, mask: &PruneMask) -> Result<usize, PruneError> {
    let keep: Vec<bool> = cache
        .rows()
        .iter()
        .map(|m: &RowMeta| m.token.role.patch().map_or(Ok(true), |p| mask.keeps(p)))
        .collect::<Result<_, _>>()?;
    let before = cache.len();
    let mut it = keep.into_iter();
    cache.evict(|_| it.next().unwrap());
    Ok(before - cache.len())
}

/// Fraction of valid tokens removed; 0 when there are none.
pub fn prune_ratio(mask: &PruneMask, v: &VoxelMap) -> f64 {
    assert_eq!(mask.shape(), v.shape(), "mask/voxel map shape mismatch");
    let valid = v.valid_count();
    if valid == 0 {
        return 0.0;
    }
    let retained = v.raw().iter().zip(mask.bits()).filter(|(&id, &b)| id >= 0 && b).count();
    (valid - retained) as f64 / valid as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    pub t: u32,
    pub valid_tokens: usize,
    pub retained_tokens: usize,
    pub frame_dropped: bool,
    pub cumulative_ratio: f64,
}

/// Per-frame pruning statistics; `cumulative_ratio` covers frames up to and including this one.
pub fn frame_report(mask: &PruneMask, v: &VoxelMap) -> Vec<FrameReport> {
    let (t_len, _, _) = v.shape();
    let (mut valid_sum, mut kept_sum) = (0usize, 0usize);
    (0..t_len)
        .map(|t| {
            let valid = v.slice(t).iter().filter(|&&id| id >= 0).count();
            let kept = mask.retained_in(t);
            valid_sum += valid;
            kept_sum += kept;
            let ratio = if valid_sum == 0 { 0.0 } else { (valid_sum - kept_sum) as f64 / valid_sum as f64 };
            FrameReport {
                t: v.frame_ids()[t],
                valid_tokens: valid,
                retained_tokens: kept,
                frame_dropped: mask.frame_dropped(t),
                cumulative_ratio: ratio,
            }
        })
        .collect()
}

pub fn report_csv(rows: &[FrameReport]) -> String {
    let mut out = String::from("t,valid_tokens,retained_tokens,frame_dropped_flag,cumulative_ratio\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{:.6}", r.t, r.valid_tokens, r.retained_tokens, r.frame_dropped as u8, r.cumulative_ratio).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_frame_map() -> VoxelMap {
        VoxelMap::from_raw(2, 2, 2, vec![0, 1, 2, 3, 0, 5, 2, 7])
    }

    fn bits(m: &PruneMask) -> Vec<u8> {
        m.bits().iter().map(|&b| b as u8).collect()
    }

    #[test]
    fn distinct_voxels_keep_everything() {
        let v = VoxelMap::from_raw(1, 3, 3, (0..9).collect());
        let m = voxel_prune(&v, PruneParams::new(1, 0.0));
        assert!(m.bits().iter().all(|&b| b));
        assert_eq!(prune_ratio(&m, &v), 0.0);
    }

    #[test]
    fn hand_traced_collisions() {
        let v = two_frame_map();
        let m = voxel_prune(&v, PruneParams::new(2, 0.0));
        assert_eq!(bits(&m), vec![0, 1, 0, 1, 1, 1, 1, 1]);
        assert_eq!(prune_ratio(&m, &v), 0.25);
    }

    #[test]
    fn threshold_drops_sparse_frame() {
        let v = two_frame_map();
        let m = voxel_prune(&v, PruneParams::new(2, 0.75));
        assert_eq!(bits(&m), vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert!(m.frame_dropped(0));
        assert!(!m.frame_dropped(1));
    }

    #[test]
    fn stride_one_isolates_frames() {
        let v = two_frame_map();
        let m = voxel_prune(&v, PruneParams::new(1, 0.0));
        assert!(m.bits().iter().all(|&b| b));
    }

    #[test]
    fn same_frame_tie_goes_to_later_scan_position() {
        let v = VoxelMap::from_raw(1, 2, 2, vec![4, 4, -1, 4]);
        let m = voxel_prune(&v, PruneParams::new(1, 0.0));
        assert_eq!(bits(&m), vec![0, 0, 0, 1]);
    }

    #[test]
    fn invalid_tokens_never_kept() {
        let v = VoxelMap::from_raw(1, 1, 3, vec![-1, -1, -1]);
        let m = voxel_prune(&v, PruneParams::new(1, 0.0));
        assert_eq!(m.retained(), 0);
        assert_eq!(prune_ratio(&m, &v), 0.0);
    }

    #[test]
    fn apply_mask_filters_and_checks_shape() {
        let v = two_frame_map();
        let m = voxel_prune(&v, PruneParams::new(2, 0.0));
        let patch = |t: u32, x: u16, y: u16| PatchToken { frame_t: t, patch_x: x, patch_y: y, depth: 1.0 };
        let items: Vec<Option<PatchToken>> = vec![Some(patch(0, 0, 0)), Some(patch(0, 0, 1)), None, Some(patch(1, 1, 0))];
        let kept = apply_mask(items, |p| *p, &m).unwrap();
        assert_eq!(kept, vec![Some(patch(0, 0, 1)), None, Some(patch(1, 1, 0))]);

        let bad = vec![Some(patch(0, 2, 0))];
        assert_eq!(apply_mask(bad, |p| *p, &m), Err(PruneError::CoordinateMismatch { frame_t: 0, x: 2, y: 0 }));
        let unknown_frame = vec![Some(patch(9, 0, 0))];
        assert!(apply_mask(unknown_frame, |p| *p, &m).is_err());
    }

    #[test]
    fn identity_and_empty_masks() {
        let v = two_frame_map();
        let items: Vec<PatchToken> = (0..8)
            .map(|i| PatchToken { frame_t: i / 4, patch_x: ((i % 4) / 2) as u16, patch_y: (i % 2) as u16, depth: 1.0 })
            .collect();
        let all = apply_mask(items.clone(), |p| Some(*p), &PruneMask::all(&v, true)).unwrap();
        assert_eq!(all, items);
        let none = apply_mask(items, |p| Some(*p), &PruneMask::all(&v, false)).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn report_accumulates() {
        let v = two_frame_map();
        let m = voxel_prune(&v, PruneParams::new(2, 0.0));
        let rows = frame_report(&m, &v);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].valid_tokens, rows[0].retained_tokens), (4, 2));
        assert_eq!(rows[0].cumulative_ratio, 0.5);
        assert_eq!(rows[1].cumulative_ratio, 0.25);
        let csv = report_csv(&rows);
        assert!(csv.starts_with("t,valid_tokens,retained_tokens,frame_dropped_flag,cumulative_ratio\n0,4,2,0,0.500000\n"));
    }
}
