//! Navigation metrics: NE, SR, OS, SPL and nDTW.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SUCCESS_DISTANCE: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("episode {0} has zero shortest-path length (start equals goal)")]
    DegenerateEpisode(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub goal: [f64; 2],
    /// Positions visited, start first, final position last.
    pub positions: Vec<[f64; 2]>,
    /// Reference (expert) path used by nDTW.
    pub reference: Vec<[f64; 2]>,
    pub shortest_length: f64,
    pub success_distance: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl EpisodeResult {
    pub fn final_position(&self) -> [f64; 2] {
        *self.positions.last().expect("episode has at least one position")
    }

    pub fn path_length(&self) -> f64 {
        self.positions.windows(2).map(|w| dist(w[0], w[1])).sum()
    }
}

pub fn navigation_error(r: &EpisodeResult) -> f64 {
    dist(r.final_position(), r.goal)
}

pub fn success(r: &EpisodeResult) -> bool {
    navigation_error(r) <= r.success_distance
}

pub fn oracle_success(r: &EpisodeResult) -> bool {
    r.positions.iter().any(|&p| dist(p, r.goal) <= r.success_distance)
}

pub fn spl(results: &[EpisodeResult]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, r) in results.iter().enumerate() {
        let l = r.shortest_length;
        if l <= 0.0 {
            return Err(MetricsError::DegenerateEpisode(i));
        }
        if success(r) {
            total += l / r.path_length().max(l);
        }
    }
    Ok(total / results.len() as f64)
}

/// Dynamic time warping cost with Euclidean point distance.
pub fn dtw(path: &[[f64; 2]], reference: &[[f64; 2]]) -> f64 {
    let (n, m) = (path.len(), reference.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = dist(path[i - 1], reference[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

pub fn ndtw(path: &[[f64; 2]], reference: &[[f64; 2]], success_distance: f64) -> f64 {
    assert!(!path.is_empty() && !reference.is_empty(), "nDTW needs nonempty paths");
    (-dtw(path, reference) / (reference.len() as f64 * success_distance)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub episodes: usize,
    pub ne_mean: f64,
    pub sr: f64,
    pub os: f64,
    pub spl: f64,
    pub ndtw_mean: f64,
}

pub fn summarize(results: &[EpisodeResult]) -> Result<Summary, MetricsError> {
    let n = results.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(Summary {
        episodes: results.len(),
        ne_mean: mean(&navigation_error),
        sr: mean(&|r| success(r) as u8 as f64),
        os: mean(&|r| oracle_success(r) as u8 as f64),
        spl: spl(results)?,
        ndtw_mean: mean(&|r| ndtw(&r.positions, &r.reference, r.success_distance)),
    })
}

pub const SUMMARY_HEADER: &str = "episodes,NE_mean,SR,OS,SPL,nDTW_mean";

pub fn summary_csv(s: &Summary) -> String {
    let mut out = String::new();
    writeln!(out, "{SUMMARY_HEADER}").unwrap();
    writeln!(out, "{},{:.6},{:.6},{:.6},{:.6},{:.6}", s.episodes, s.ne_mean, s.sr, s.os, s.spl, s.ndtw_mean).unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(positions: Vec<[f64; 2]>, goal: [f64; 2], shortest: f64) -> EpisodeResult {
        EpisodeResult {
            goal,
            reference: positions.clone(),
            positions,
            shortest_length: shortest,
            success_distance: 3.0,
        }
    }

    #[test]
    fn navigation_error_cases() {
        assert_eq!(navigation_error(&result(vec![[0.0, 0.0], [5.0, 0.0]], [5.0, 0.0], 5.0)), 0.0);
        assert_eq!(navigation_error(&result(vec![[0.0, 0.0], [3.0, 0.0]], [5.0, 0.0], 5.0)), 2.0);
    }

    #[test]
    fn oracle_success_without_success() {
        let r = result(vec![[0.0, 0.0], [9.0, 0.0], [0.0, 0.0]], [10.0, 0.0], 10.0);
        assert!(oracle_success(&r));
        assert!(!success(&r));
    }

    #[test]
    fn spl_contributions() {
        let direct = result(vec![[0.0, 0.0], [4.0, 0.0]], [4.0, 0.0], 4.0);
        assert!((spl(&[direct]).unwrap() - 1.0).abs() < 1e-12);
        let detour = result(vec![[0.0, 0.0], [0.0, 3.0], [4.0, 3.0], [4.0, 0.0]], [4.0, 0.0], 5.0);
        assert!((spl(&[detour]).unwrap() - 0.5).abs() < 1e-12);
        let degenerate = result(vec![[1.0, 1.0]], [1.0, 1.0], 0.0);
        assert_eq!(spl(&[degenerate]), Err(MetricsError::DegenerateEpisode(0)));
    }

    #[test]
    fn ndtw_identity_and_monotone_shift() {
        let path = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]];
        assert_eq!(ndtw(&path, &path, 3.0), 1.0);
        let mut last = 1.0;
        for k in 1..6 {
            let shifted: Vec<[f64; 2]> = path.iter().map(|p| [p[0], p[1] + k as f64 * 0.5]).collect();
            let v = ndtw(&shifted, &path, 3.0);
            assert!(v < last && v > 0.0);
            last = v;
        }
    }

    #[test]
    fn summary_csv_layout() {
        let r = result(vec![[0.0, 0.0], [4.0, 0.0]], [4.0, 0.0], 4.0);
        let s = summarize(&[r]).unwrap();
        assert_eq!(summary_csv(&s), "episodes,NE_mean,SR,OS,SPL,nDTW_mean\n1,0.000000,1.000000,1.000000,1.000000,1.000000\n");
    }
}
