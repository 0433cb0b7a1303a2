//! Query-versus-reference similarity matrices, dense or rebuilt from KNN hits,
//! and the per-row top-K / threshold filter applied before localization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::index::Hit;

pub const DEFAULT_TOP_K_ONE: usize = 20;
pub const DEFAULT_SIM_TH: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: u32,
    pub col: u32,
    pub sim: f32,
}

/// A `n_rows × n_cols` matrix storing only its populated entries, sorted by `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSimMatrix {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<Entry>,
}

impl SparseSimMatrix {
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            entries: Vec::new(),
        }
    }

    /// Builds from arbitrary-order entries; rejects duplicates, out-of-range
    /// coordinates and non-finite values.
    pub fn from_entries(n_rows: usize, n_cols: usize, mut entries: Vec<Entry>) -> Result<Self> {
        entries.sort_by_key(|e| (e.row, e.col));
        for w in entries.windows(2) {
            if (w[0].row, w[0].col) == (w[1].row, w[1].col) {
                return Err(Error::Inconsistent(format!(
                    "duplicate entry at ({}, {})",
                    w[0].row, w[0].col
                )));
            }
        }
        if let Some(e) = entries
            .iter()
            .find(|e| e.row as usize >= n_rows || e.col as usize >= n_cols || !e.sim.is_finite())
        {
            return Err(Error::Inconsistent(format!(
                "entry ({}, {}, {}) outside a {n_rows}x{n_cols} matrix or non-finite",
                e.row, e.col, e.sim
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            entries,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f32> {
        self.entries
            .binary_search_by_key(&(row as u32, col as u32), |e| (e.row, e.col))
            .ok()
            .map(|i| self.entries[i].sim)
    }

    /// Keeps the entries for which `keep` is true.
    pub fn retain(&mut self, keep: impl FnMut(&Entry) -> bool) {
        self.entries.retain(keep);
    }

    /// `row,col,sim` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,sim\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.row, e.col, e.sim);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Every pairwise dot product between rows of `query` and `reference` (both row-major, width `dim`).
pub fn dense_similarity(query: &[f32], reference: &[f32], dim: usize) -> Result<SparseSimMatrix> {
    if dim == 0 || !query.len().is_multiple_of(dim) || !reference.len().is_multiple_of(dim) {
        return Err(Error::Dimension(format!(
            "matrices of {} and {} values do not share row width {dim}",
            query.len(),
            reference.len()
        )));
    }
    let t = query.len() / dim;
    let m = reference.len() / dim;
    let mut entries = Vec::with_capacity(t * m);
    for (i, q) in query.chunks_exact(dim).enumerate() {
        for (j, r) in reference.chunks_exact(dim).enumerate() {
            entries.push(Entry {
                row: i as u32,
                col: j as u32,
                sim: crate::dot(q, r),
            });
        }
    }
    Ok(SparseSimMatrix {
        n_rows: t,
        n_cols: m,
        entries,
    })
}

/// Sparse matrix holding only the hits that landed in `video_index`; every other cell is absent.
///
/// `frame_count` is the candidate's number of frames.
pub fn reconstructed_similarity(
    hits_per_frame: &[Vec<Hit>],
    video_index: u32,
    frame_count: usize,
) -> Result<SparseSimMatrix> {
    let mut entries = Vec::new();
    for (t, hits) in hits_per_frame.iter().enumerate() {
        for h in hits.iter().filter(|h| h.frame_ref.video_index == video_index) {
            if h.frame_ref.frame_index as usize >= frame_count {
                return Err(Error::Inconsistent(format!(
                    "hit frame {} of video {video_index} beyond its {frame_count} frames",
                    h.frame_ref.frame_index
                )));
            }
            entries.push(Entry {
                row: t as u32,
                col: h.frame_ref.frame_index,
                sim: h.similarity,
            });
        }
    }
    SparseSimMatrix::from_entries(hits_per_frame.len(), frame_count, entries)
}

/// Per row keeps the `top_k_one` highest entries (ties to the lower column),
/// then drops everything below `sim_th`.
pub fn filter_top_k_one(m: &SparseSimMatrix, top_k_one: usize, sim_th: f32) -> SparseSimMatrix {
    let mut kept = Vec::with_capacity(m.entries.len().min(m.n_rows * top_k_one));
    for row in m.entries.chunk_by(|a, b| a.row == b.row) {
        let mut ranked: Vec<Entry> = row.to_vec();
        ranked.sort_by(|a, b| b.sim.total_cmp(&a.sim).then(a.col.cmp(&b.col)));
        ranked.truncate(top_k_one);
        ranked.retain(|e| e.sim >= sim_th);
        ranked.sort_by_key(|e| e.col);
        kept.extend(ranked);
    }
    SparseSimMatrix {
        n_rows: m.n_rows,
        n_cols: m.n_cols,
        entries: kept,
    }
}
