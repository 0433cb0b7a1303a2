//! Copy localization as a maximum-score monotone path through a sparse similarity matrix.
//!
//! The nodes are the matrix entries. Consecutive path nodes must advance by
//! `1..=max_step` in both row and column, and the two advances may differ by less
//! than `max_diff` (exactly zero when `max_diff == 0`). Since every edge strictly
//! increases the row, the graph is a DAG and a single pass over row-sorted nodes
//! finds the best path exactly.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::simmatrix::{Entry, SparseSimMatrix, DEFAULT_SIM_TH, DEFAULT_TOP_K_ONE};

pub const DEFAULT_MAX_STEP: usize = 5;
pub const DEFAULT_MAX_DIFF: usize = 5;
/// Node count above which [`brute_force_best_path`] refuses to run.
pub const BRUTE_FORCE_MAX_NODES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathParams {
    pub max_step: usize,
    pub max_diff: usize,
    pub sim_th: f32,
    pub top_k_one: usize,
}

impl Default for PathParams {
    fn default() -> Self {
        Self {
            max_step: DEFAULT_MAX_STEP,
            max_diff: DEFAULT_MAX_DIFF,
            sim_th: DEFAULT_SIM_TH,
            top_k_one: DEFAULT_TOP_K_ONE,
        }
    }
}

impl PathParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_step == 0 {
            return Err(Error::InvalidArgument("max_step must be >= 1".into()));
        }
        if self.top_k_one == 0 {
            return Err(Error::InvalidArgument("top_k_one must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether a path may go from `a` to `b`.
    #[inline]
    pub fn can_step(&self, a: (u32, u32), b: (u32, u32)) -> bool {
        if b.0 <= a.0 || b.1 <= a.1 {
            return false;
        }
        let dr = (b.0 - a.0) as usize;
        let dc = (b.1 - a.1) as usize;
        if dr > self.max_step || dc > self.max_step {
            return false;
        }
        if self.max_diff == 0 {
            dr == dc
        } else {
            dr.abs_diff(dc) < self.max_diff
        }
    }
}

/// A localized copy: query frames `q_start..=q_end` match reference frames `r_start..=r_end`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CopySegment {
    pub q_start: usize,
    pub q_end: usize,
    pub r_start: usize,
    pub r_end: usize,
    /// Number of path nodes.
    pub length: usize,
    pub score: f64,
    /// `score / length`.
    pub sim: f64,
    pub path: Vec<(u32, u32)>,
}

impl CopySegment {
    fn from_path(nodes: &[Entry], path: &[usize]) -> Self {
        let first = nodes[path[0]];
        let last = nodes[*path.last().unwrap()];
        let score = path.iter().fold(0.0, |acc, &i| acc + nodes[i].sim as f64);
        Self {
            q_start: first.row as usize,
            q_end: last.row as usize,
            r_start: first.col as usize,
            r_end: last.col as usize,
            length: path.len(),
            score,
            sim: score / path.len() as f64,
            path: path.iter().map(|&i| (nodes[i].row, nodes[i].col)).collect(),
        }
    }
}

/// Objective key: higher score, then longer, then earlier start.
#[derive(Debug, Clone, Copy)]
struct Key {
    score: f64,
    len: usize,
    start: (u32, u32),
}

impl Key {
    fn beats(&self, other: &Key) -> bool {
        if self.score != other.score {
            return self.score > other.score;
        }
        if self.len != other.len {
            return self.len > other.len;
        }
        self.start < other.start
    }
}

/// Best path through the entries of `m` under `params`, or `None` for an empty matrix.
///
/// Ties on score go to the longer path, then to the smaller `(q_start, r_start)`,
/// then to the path ending first in `(row, col)` order.
pub fn temporal_network(m: &SparseSimMatrix, params: &PathParams) -> Option<CopySegment> {
    let nodes = m.entries();
    if nodes.is_empty() {
        return None;
    }
    let mut best: Vec<Key> = Vec::with_capacity(nodes.len());
    let mut pred: Vec<Option<usize>> = Vec::with_capacity(nodes.len());
    let mut lo = 0;
    for (k, node) in nodes.iter().enumerate() {
        while (nodes[lo].row as usize) + params.max_step < node.row as usize {
            lo += 1;
        }
        let mut key = Key {
            score: node.sim as f64,
            len: 1,
            start: (node.row, node.col),
        };
        let mut from = None;
        for i in lo..k {
            let prev = nodes[i];
            if prev.row == node.row {
                break;
            }
            if !params.can_step((prev.row, prev.col), (node.row, node.col)) {
                continue;
            }
            let cand = Key {
                score: best[i].score + node.sim as f64,
                len: best[i].len + 1,
                start: best[i].start,
            };
            if cand.beats(&key) {
                key = cand;
                from = Some(i);
            }
        }
        best.push(key);
        pred.push(from);
    }

    let mut end = 0;
    for k in 1..nodes.len() {
        if best[k].beats(&best[end]) {
            end = k;
        }
    }
    let mut path = vec![end];
    while let Some(p) = pred[*path.last().unwrap()] {
        path.push(p);
    }
    path.reverse();
    Some(CopySegment::from_path(nodes, &path))
}

/// Exhaustive enumeration of every valid path; exponential, for verification only.
///
/// Refuses matrices with more than [`BRUTE_FORCE_MAX_NODES`] entries.
pub fn brute_force_best_path(
    m: &SparseSimMatrix,
    params: &PathParams,
) -> Result<Option<CopySegment>> {
    let nodes = m.entries();
    if nodes.len() > BRUTE_FORCE_MAX_NODES {
        return Err(Error::InvalidArgument(format!(
            "brute force is capped at {BRUTE_FORCE_MAX_NODES} nodes, got {}",
            nodes.len()
        )));
    }

    fn walk(
        nodes: &[Entry],
        params: &PathParams,
        path: &mut Vec<usize>,
        best: &mut Option<(Key, (u32, u32), Vec<usize>)>,
    ) {
        let score = path.iter().fold(0.0, |acc, &i| acc + nodes[i].sim as f64);
        let first = nodes[path[0]];
        let last = nodes[*path.last().unwrap()];
        let key = Key {
            score,
            len: path.len(),
            start: (first.row, first.col),
        };
        let end = (last.row, last.col);
        let better = match best {
            None => true,
            Some((bk, be, _)) => {
                key.beats(bk) || (!bk.beats(&key) && key.start == bk.start && end < *be)
            }
        };
        if better {
            *best = Some((key, end, path.clone()));
        }
        for next in 0..nodes.len() {
            let n = nodes[next];
            if params.can_step((last.row, last.col), (n.row, n.col)) {
                path.push(next);
                walk(nodes, params, path, best);
                path.pop();
            }
        }
    }

    let mut best = None;
    for start in 0..nodes.len() {
        walk(nodes, params, &mut vec![start], &mut best);
    }
    Ok(best.map(|(_, _, path)| CopySegment::from_path(nodes, &path)))
}

/// Repeatedly extracts the best path, each time removing every node inside the
/// winner's row-span × column-span rectangle, until `max_segments` are found or
/// no nodes remain.
pub fn extract_segments(
    m: &SparseSimMatrix,
    params: &PathParams,
    max_segments: usize,
) -> Vec<CopySegment> {
    let mut remaining = m.clone();
    let mut out = Vec::new();
    while out.len() < max_segments {
        let Some(seg) = temporal_network(&remaining, params) else {
            break;
        };
        let (rows, cols) = (seg.q_start..=seg.q_end, seg.r_start..=seg.r_end);
        remaining.retain(|e| !(rows.contains(&(e.row as usize)) && cols.contains(&(e.col as usize))));
        out.push(seg);
    }
    out
}
