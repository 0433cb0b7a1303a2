//! The global feature database: every reference frame in one searchable store.
//!
//! Rows are unit-norm and ordered ascending by `(video_index, frame_index)`, so the
//! row number alone fixes tie order. Search is exact (flat) or restricted to the
//! `n_probe` nearest cells of a k-means coarse quantizer (IVF).
//!
//! Index file layout (little-endian): magic `PVCI`, version u16 = 1, dim u32,
//! row_count u32, n_videos u32, then per video an id (u16 length + UTF-8 bytes) and
//! frame_count u32, then all rows as f32, then an IVF flag u8. When the flag is 1 it
//! is followed by n_cells u32, the centroids as f32, and for each cell a u32 length
//! followed by that many u32 row indices.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::VideoFeatures;
use crate::kmeans;

pub const INDEX_MAGIC: &[u8; 4] = b"PVCI";
pub const INDEX_VERSION: u16 = 1;
pub const DEFAULT_TOP_K_ALL: usize = 200;
pub const DEFAULT_KMEANS_ITERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_index: u32,
    pub frame_index: u32,
}

/// One KNN answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub frame_ref: FrameRef,
    pub similarity: f32,
}

#[derive(Debug, Clone, PartialEq)]
struct VideoEntry {
    id: String,
    first_row: usize,
    frame_count: usize,
}

/// Coarse quantizer: centroids plus the rows assigned to each.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfCells {
    pub n_cells: usize,
    pub centroids: Vec<f32>,
    pub lists: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalIndex {
    dim: usize,
    rows: Vec<f32>,
    videos: Vec<VideoEntry>,
    id_map: Vec<FrameRef>,
    by_id: HashMap<String, usize>,
    coarse: Option<IvfCells>,
}

/// Heap entry ordered so that "greater" means a better answer:
/// higher similarity, then lower row.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked {
    sim: f32,
    row: u32,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.row.cmp(&self.row))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded selection of the `k` best rows.
struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Ranked>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, cand: Ranked) {
        if self.heap.len() < self.k {
            self.heap.push(Reverse(cand));
        } else if let Some(Reverse(worst)) = self.heap.peek() {
            if cand > *worst {
                self.heap.pop();
                self.heap.push(Reverse(cand));
            }
        }
    }

    fn into_sorted(self) -> Vec<Ranked> {
        // ascending Reverse == descending Ranked
        self.heap.into_sorted_vec().into_iter().map(|r| r.0).collect()
    }
}

impl GlobalIndex {
    /// Builds an exact index over all frames of `videos`, normalizing every row.
    pub fn build_flat(videos: &[VideoFeatures]) -> Result<Self> {
        let first = videos
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot build an index from zero videos".into()))?;
        let dim = first.dim();
        if let Some(v) = videos.iter().find(|v| v.dim() != dim) {
            return Err(Error::Dimension(format!(
                "video {:?} has dim {} but video {:?} has dim {dim}",
                v.video_id,
                v.dim(),
                first.video_id
            )));
        }

        let total: usize = videos.iter().map(VideoFeatures::frame_count).sum();
        if total > u32::MAX as usize {
            return Err(Error::InvalidArgument("more than u32::MAX rows".into()));
        }
        let mut rows = Vec::with_capacity(total * dim);
        let mut entries = Vec::with_capacity(videos.len());
        let mut id_map = Vec::with_capacity(total);
        let mut by_id = HashMap::with_capacity(videos.len());
        for (vi, v) in videos.iter().enumerate() {
            if by_id.insert(v.video_id.clone(), vi).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate video id {:?}",
                    v.video_id
                )));
            }
            let normalized = v.clone().normalize_rows()?;
            entries.push(VideoEntry {
                id: v.video_id.clone(),
                first_row: id_map.len(),
                frame_count: v.frame_count(),
            });
            rows.extend_from_slice(normalized.as_slice());
            id_map.extend((0..v.frame_count()).map(|j| FrameRef {
                video_index: vi as u32,
                frame_index: j as u32,
            }));
        }
        Ok(Self {
            dim,
            rows,
            videos: entries,
            id_map,
            by_id,
            coarse: None,
        })
    }

    /// Builds the index and an IVF coarse quantizer with `n_cells` seeded k-means cells.
    pub fn build_ivf(
        videos: &[VideoFeatures],
        n_cells: usize,
        kmeans_iters: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build_flat(videos)?.with_ivf(n_cells, kmeans_iters, seed)
    }

    /// Replaces any existing coarse quantizer with a fresh one.
    pub fn with_ivf(mut self, n_cells: usize, kmeans_iters: usize, seed: u64) -> Result<Self> {
        let n = self.row_count();
        if n_cells == 0 || n_cells > n {
            return Err(Error::InvalidArgument(format!(
                "n_cells must be in 1..={n}, got {n_cells}"
            )));
        }
        let (centroids, assign) = kmeans::kmeans(&self.rows, self.dim, n_cells, kmeans_iters, seed);
        let mut lists = vec![Vec::new(); n_cells];
        for (row, &cell) in assign.iter().enumerate() {
            lists[cell as usize].push(row as u32);
        }
        self.coarse = Some(IvfCells {
            n_cells,
            centroids,
            lists,
        });
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_count(&self) -> usize {
        self.id_map.len()
    }

    pub fn video_count(&self) -> usize {
        self.videos.len()
    }

    pub fn video_id(&self, video_index: usize) -> &str {
        &self.videos[video_index].id
    }

    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn frame_count(&self, video_index: usize) -> usize {
        self.videos[video_index].frame_count
    }

    /// The stored (normalized) rows of one video, row-major.
    pub fn video_rows(&self, video_index: usize) -> &[f32] {
        let e = &self.videos[video_index];
        &self.rows[e.first_row * self.dim..(e.first_row + e.frame_count) * self.dim]
    }

    pub fn video_features(&self, video_index: usize) -> VideoFeatures {
        VideoFeatures::new(
            self.videos[video_index].id.clone(),
            self.dim,
            self.video_rows(video_index).to_vec(),
        )
        .expect("stored videos are non-empty and finite")
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.rows[row * self.dim..(row + 1) * self.dim]
    }

    pub fn frame_ref(&self, row: usize) -> FrameRef {
        self.id_map[row]
    }

    pub fn row_of(&self, frame_ref: FrameRef) -> Option<usize> {
        let e = self.videos.get(frame_ref.video_index as usize)?;
        let j = frame_ref.frame_index as usize;
        (j < e.frame_count).then_some(e.first_row + j)
    }

    pub fn ivf(&self) -> Option<&IvfCells> {
        self.coarse.as_ref()
    }

    fn check_query(&self, query: &[f32], top_k: usize) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::Dimension(format!(
                "query has dim {} but index has dim {}",
                query.len(),
                self.dim
            )));
        }
        if top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be >= 1".into()));
        }
        Ok(())
    }

    fn hits(&self, ranked: Vec<Ranked>) -> Vec<Hit> {
        ranked
            .into_iter()
            .map(|r| Hit {
                frame_ref: self.id_map[r.row as usize],
                similarity: r.sim,
            })
            .collect()
    }

    /// Top-`top_k` rows by dot product, best first, ties by ascending row.
    ///
    /// With an IVF quantizer only the `n_probe` nearest cells are scanned;
    /// without one `n_probe` is ignored.
    pub fn knn_search(&self, query: &[f32], top_k: usize, n_probe: usize) -> Result<Vec<Hit>> {
        self.check_query(query, top_k)?;
        let mut top = TopK::new(top_k);
        match &self.coarse {
            None => {
                for (row, stored) in self.rows.chunks_exact(self.dim).enumerate() {
                    top.push(Ranked {
                        sim: crate::dot(query, stored),
                        row: row as u32,
                    });
                }
            }
            Some(ivf) => {
                if n_probe == 0 || n_probe > ivf.n_cells {
                    return Err(Error::InvalidArgument(format!(
                        "n_probe must be in 1..={}, got {n_probe}",
                        ivf.n_cells
                    )));
                }
                for cell in self.probe_order(ivf, query).into_iter().take(n_probe) {
                    for &row in &ivf.lists[cell] {
                        top.push(Ranked {
                            sim: crate::dot(query, self.row(row as usize)),
                            row,
                        });
                    }
                }
            }
        }
        Ok(self.hits(top.into_sorted()))
    }

    /// Exact flat search ignoring any IVF structure.
    pub fn knn_search_flat(&self, query: &[f32], top_k: usize) -> Result<Vec<Hit>> {
        self.check_query(query, top_k)?;
        let mut top = TopK::new(top_k);
        for (row, stored) in self.rows.chunks_exact(self.dim).enumerate() {
            top.push(Ranked {
                sim: crate::dot(query, stored),
                row: row as u32,
            });
        }
        Ok(self.hits(top.into_sorted()))
    }

    /// Scores every row, fully sorts, and truncates: the matrix-multiplication baseline.
    pub fn full_sort_search(&self, query: &[f32], top_k: usize) -> Result<Vec<Hit>> {
        self.check_query(query, top_k)?;
        let mut all: Vec<Ranked> = self
            .rows
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(row, stored)| Ranked {
                sim: crate::dot(query, stored),
                row: row as u32,
            })
            .collect();
        all.sort_unstable_by(|a, b| b.cmp(a));
        all.truncate(top_k);
        Ok(self.hits(all))
    }

    fn probe_order(&self, ivf: &IvfCells, query: &[f32]) -> Vec<usize> {
        let mut cells: Vec<(f64, usize)> = ivf
            .centroids
            .chunks_exact(self.dim)
            .map(|c| kmeans::squared_distance(query, c))
            .zip(0..)
            .collect();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cells.into_iter().map(|(_, c)| c).collect()
    }

    /// Searches every row of a row-major `T × dim` query matrix; output order follows input rows.
    pub fn knn_search_batch(
        &self,
        queries: &[f32],
        top_k: usize,
        n_probe: usize,
    ) -> Result<Vec<Vec<Hit>>> {
        if queries.is_empty() {
            return Err(Error::InvalidArgument("query matrix has no rows".into()));
        }
        if !queries.len().is_multiple_of(self.dim) {
            return Err(Error::Dimension(format!(
                "query matrix of {} values is not a multiple of dim {}",
                queries.len(),
                self.dim
            )));
        }
        queries
            .par_chunks_exact(self.dim)
            .map(|q| self.knn_search(q, top_k, n_probe))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.rows.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.row_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.videos.len() as u32).to_le_bytes());
        for v in &self.videos {
            out.extend_from_slice(&(v.id.len() as u16).to_le_bytes());
            out.extend_from_slice(v.id.as_bytes());
            out.extend_from_slice(&(v.frame_count as u32).to_le_bytes());
        }
        for x in &self.rows {
            out.extend_from_slice(&x.to_le_bytes());
        }
        match &self.coarse {
            None => out.push(0),
            Some(ivf) => {
                out.push(1);
                out.extend_from_slice(&(ivf.n_cells as u32).to_le_bytes());
                for x in &ivf.centroids {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                for list in &ivf.lists {
                    out.extend_from_slice(&(list.len() as u32).to_le_bytes());
                    for r in list {
                        out.extend_from_slice(&r.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::format(0, "bad magic, expected PVCI"));
        }
        let version = r.u16()?;
        if version != INDEX_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let row_count = r.u32()? as usize;
        let n_videos = r.u32()? as usize;
        if dim == 0 || n_videos == 0 {
            return Err(Error::format(6, "dim and video count must be >= 1"));
        }
        let mut videos = Vec::with_capacity(n_videos);
        let mut by_id = HashMap::with_capacity(n_videos);
        let mut id_map = Vec::with_capacity(row_count);
        for vi in 0..n_videos {
            let len = r.u16()? as usize;
            let at = r.pos;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at as u64, "video id is not UTF-8"))?
                .to_string();
            let frame_count = r.u32()? as usize;
            by_id.insert(id.clone(), vi);
            videos.push(VideoEntry {
                id,
                first_row: id_map.len(),
                frame_count,
            });
            id_map.extend((0..frame_count).map(|j| FrameRef {
                video_index: vi as u32,
                frame_index: j as u32,
            }));
        }
        if id_map.len() != row_count {
            return Err(Error::format(
                r.pos as u64,
                format!("frame counts sum to {} but row_count is {row_count}", id_map.len()),
            ));
        }
        let rows = r.f32s(row_count * dim)?;
        let coarse = match r.u8()? {
            0 => None,
            1 => {
                let n_cells = r.u32()? as usize;
                let centroids = r.f32s(n_cells * dim)?;
                let mut lists = Vec::with_capacity(n_cells);
                let mut seen = vec![false; row_count];
                for _ in 0..n_cells {
                    let len = r.u32()? as usize;
                    let mut list = Vec::with_capacity(len);
                    for _ in 0..len {
                        let at = r.pos;
                        let row = r.u32()?;
                        if row as usize >= row_count || std::mem::replace(&mut seen[row as usize], true) {
                            return Err(Error::format(at as u64, format!("bad IVF row index {row}")));
                        }
                        list.push(row);
                    }
                    lists.push(list);
                }
                if seen.iter().any(|s| !s) {
                    return Err(Error::format(r.pos as u64, "IVF lists do not cover all rows"));
                }
                Some(IvfCells {
                    n_cells,
                    centroids,
                    lists,
                })
            }
            flag => return Err(Error::format(r.pos as u64 - 1, format!("bad IVF flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes"));
        }
        Ok(Self {
            dim,
            rows,
            videos,
            id_map,
            by_id,
            coarse,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let at = self.pos;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(at as u64, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(id: &str, rows: &[Vec<f32>]) -> VideoFeatures {
        VideoFeatures::from_rows(id, rows).unwrap()
    }

    #[test]
    fn rows_follow_video_then_frame_order() {
        let a = video("a", &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let b = video("b", &[vec![-1.0, 0.0], vec![0.0, -1.0]]);
        let idx = GlobalIndex::build_flat(&[a, b]).unwrap();
        assert_eq!(idx.row_count(), 5);
        assert_eq!(
            idx.frame_ref(3),
            FrameRef {
                video_index: 1,
                frame_index: 0
            }
        );
        assert_eq!(idx.video_index("b"), Some(1));
        assert_eq!(idx.row_of(idx.frame_ref(4)), Some(4));
    }

    #[test]
    fn empty_and_mismatched_builds_fail() {
        assert!(GlobalIndex::build_flat(&[]).is_err());
        let a = video("a", &[vec![1.0, 0.0]]);
        let b = video("b", &[vec![1.0, 0.0, 0.0]]);
        match GlobalIndex::build_flat(&[a, b]).unwrap_err() {
            Error::Dimension(m) => assert!(m.contains("\"a\"") && m.contains("\"b\"")),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn hand_dot_products() {
        let a = video("a", &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let idx = GlobalIndex::build_flat(&[a]).unwrap();
        let hits = idx.knn_search(&[1.0, 0.0], 2, 1).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].frame_ref.frame_index, 0);
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
        assert_eq!(hits[1].frame_ref.frame_index, 2);
        assert!((hits[1].similarity - 0.6).abs() < 1e-6);
    }

    #[test]
    fn ties_break_by_row() {
        let a = video("a", &[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let b = video("b", &[vec![1.0, 0.0]]);
        let idx = GlobalIndex::build_flat(&[a, b]).unwrap();
        let hits = idx.knn_search(&[1.0, 0.0], 2, 1).unwrap();
        let refs: Vec<_> = hits.iter().map(|h| (h.frame_ref.video_index, h.frame_ref.frame_index)).collect();
        assert_eq!(refs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn query_errors() {
        let idx = GlobalIndex::build_flat(&[video("a", &[vec![1.0, 0.0]])]).unwrap();
        assert!(matches!(idx.knn_search(&[1.0], 1, 1), Err(Error::Dimension(_))));
        assert!(idx.knn_search(&[1.0, 0.0], 0, 1).is_err());
        assert!(idx.knn_search_batch(&[], 1, 1).is_err());
        let ivf = idx.with_ivf(1, 5, 0).unwrap();
        assert!(ivf.knn_search(&[1.0, 0.0], 1, 2).is_err());
    }

    #[test]
    fn k_larger_than_rows() {
        let idx = GlobalIndex::build_flat(&[video("a", &[vec![1.0, 0.0], vec![0.0, 1.0]])]).unwrap();
        assert_eq!(idx.knn_search(&[1.0, 0.0], 10, 1).unwrap().len(), 2);
    }

    #[test]
    fn too_many_cells() {
        let a = video("a", &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(GlobalIndex::build_ivf(std::slice::from_ref(&a), 3, 5, 0).is_err());
        assert!(GlobalIndex::build_ivf(&[a], 0, 5, 0).is_err());
    }

    #[test]
    fn bytes_round_trip_with_ivf() {
        let a = video("alpha", &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let b = video("β", &[vec![-1.0, 0.2]]);
        let idx = GlobalIndex::build_ivf(&[a, b], 2, 5, 11).unwrap();
        let back = GlobalIndex::from_bytes(&idx.to_bytes()).unwrap();
        assert_eq!(back, idx);
        let flat = GlobalIndex::build_flat(&[video("x", &[vec![1.0]])]).unwrap();
        assert_eq!(GlobalIndex::from_bytes(&flat.to_bytes()).unwrap(), flat);
    }

    #[test]
    fn truncated_index_rejected() {
        let idx = GlobalIndex::build_flat(&[video("x", &[vec![1.0, 2.0]])]).unwrap();
        let bytes = idx.to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                GlobalIndex::from_bytes(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
    }
}
