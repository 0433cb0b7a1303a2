//! End-to-end query path: optional encoding, KNN over the global index, candidate
//! shortlisting, per-candidate similarity matrix, filtering and localization.
//! Also the scan-everything baseline and the search timing harness.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::features::VideoFeatures;
use crate::index::{GlobalIndex, Hit, DEFAULT_TOP_K_ALL};
use crate::localize::{extract_segments, CopySegment, PathParams, DEFAULT_MAX_DIFF, DEFAULT_MAX_STEP};
use crate::scoring::{score_videos, top_videos, DEFAULT_TOP_K_VIDEO};
use crate::simmatrix::{
    dense_similarity, filter_top_k_one, reconstructed_similarity, SparseSimMatrix, DEFAULT_SIM_TH,
    DEFAULT_TOP_K_ONE,
};

/// How the per-candidate similarity matrix is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixMode {
    /// Only the KNN hits that landed in the candidate.
    Reconstructed,
    /// Every query-frame × candidate-frame dot product.
    Original,
    /// No shortlist: dense matrices against every reference.
    Scan,
}

impl FromStr for MatrixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstructed" => Ok(Self::Reconstructed),
            "original" => Ok(Self::Original),
            "scan" => Ok(Self::Scan),
            other => Err(Error::InvalidArgument(format!("unknown matrix mode {other:?}"))),
        }
    }
}

impl fmt::Display for MatrixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reconstructed => "reconstructed",
            Self::Original => "original",
            Self::Scan => "scan",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueryParams {
    pub top_k_all: usize,
    pub top_k_one: usize,
    pub top_k_video: usize,
    pub sim_th: f32,
    pub max_step: usize,
    pub max_diff: usize,
    pub mode: MatrixMode,
    pub use_encoder: bool,
    /// Cells probed when the index has an IVF quantizer.
    pub n_probe: usize,
    pub max_segments: usize,
    /// Frame rate of both query and reference features.
    pub fps: f64,
}

impl Default for QueryParams {
    fn default() -> Self {
        Self {
            top_k_all: DEFAULT_TOP_K_ALL,
            top_k_one: DEFAULT_TOP_K_ONE,
            top_k_video: DEFAULT_TOP_K_VIDEO,
            sim_th: DEFAULT_SIM_TH,
            max_step: DEFAULT_MAX_STEP,
            max_diff: DEFAULT_MAX_DIFF,
            mode: MatrixMode::Reconstructed,
            use_encoder: false,
            n_probe: 1,
            max_segments: 1,
            fps: 1.0,
        }
    }
}

impl QueryParams {
    pub fn validate(&self) -> Result<()> {
        let ks = [
            ("top_k_all", self.top_k_all),
            ("top_k_one", self.top_k_one),
            ("top_k_video", self.top_k_video),
            ("max_step", self.max_step),
            ("n_probe", self.n_probe),
            ("max_segments", self.max_segments),
        ];
        if let Some((name, _)) = ks.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if !(-1.0..=1.0).contains(&self.sim_th) {
            return Err(Error::InvalidArgument(format!("sim_th {} outside [-1, 1]", self.sim_th)));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("fps {} must be positive", self.fps)));
        }
        Ok(())
    }

    pub fn path_params(&self) -> PathParams {
        PathParams {
            max_step: self.max_step,
            max_diff: self.max_diff,
            sim_th: self.sim_th,
            top_k_one: self.top_k_one,
        }
    }
}

/// A localized copy inside one reference video, before conversion to seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedCopy {
    pub video_index: usize,
    /// Position of the video in the candidate ranking (or reference order when scanning).
    pub rank: usize,
    pub segment: CopySegment,
}

fn localize_matrix(m: &SparseSimMatrix, params: &QueryParams) -> Vec<CopySegment> {
    let filtered = filter_top_k_one(m, params.top_k_one, params.sim_th);
    extract_segments(&filtered, &params.path_params(), params.max_segments)
}

/// Shortlist candidates from KNN hits and localize copies in each.
///
/// `query` must already be normalized (and encoded, when the index holds encoded rows).
pub fn localize_query(
    index: &GlobalIndex,
    query: &VideoFeatures,
    params: &QueryParams,
) -> Result<Vec<LocalizedCopy>> {
    params.validate()?;
    if query.dim() != index.dim() {
        return Err(Error::Dimension(format!(
            "query {:?} has dim {} but index has dim {}",
            query.video_id,
            query.dim(),
            index.dim()
        )));
    }
    if params.mode == MatrixMode::Scan {
        return Ok(scan_rows(
            (0..index.video_count()).map(|i| index.video_rows(i)),
            query,
            params,
        ));
    }
    let hits: Vec<Vec<Hit>> = index.knn_search_batch(query.as_slice(), params.top_k_all, params.n_probe)?;
    let candidates = top_videos(&score_videos(&hits), params.top_k_video);
    let per_candidate: Result<Vec<Vec<LocalizedCopy>>> = candidates
        .par_iter()
        .enumerate()
        .map(|(rank, c)| {
            let vi = c.video_index as usize;
            let m = match params.mode {
                MatrixMode::Reconstructed => {
                    reconstructed_similarity(&hits, c.video_index, index.frame_count(vi))?
                }
                _ => dense_similarity(query.as_slice(), index.video_rows(vi), index.dim())?,
            };
            Ok(localize_matrix(&m, params)
                .into_iter()
                .map(|segment| LocalizedCopy {
                    video_index: vi,
                    rank,
                    segment,
                })
                .collect())
        })
        .collect();
    Ok(per_candidate?.into_iter().flatten().collect())
}

fn scan_rows<'a>(
    references: impl Iterator<Item = &'a [f32]>,
    query: &VideoFeatures,
    params: &QueryParams,
) -> Vec<LocalizedCopy> {
    let refs: Vec<&[f32]> = references.collect();
    refs.par_iter()
        .enumerate()
        .map(|(vi, rows)| {
            let m = dense_similarity(query.as_slice(), rows, query.dim())
                .expect("dimensions checked by caller");
            localize_matrix(&m, params)
                .into_iter()
                .map(|segment| LocalizedCopy {
                    video_index: vi,
                    rank: vi,
                    segment,
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn prepare_query(
    query: &VideoFeatures,
    params: &QueryParams,
    encoder: Option<&Encoder>,
) -> Result<VideoFeatures> {
    params.validate()?;
    let normalized = query.clone().normalize_rows()?;
    match (params.use_encoder, encoder) {
        (true, Some(enc)) => enc.encode_features(&normalized),
        (false, None) => Ok(normalized),
        (true, None) => Err(Error::InvalidArgument("use_encoder is set but no encoder weights were given".into())),
        (false, Some(_)) => Err(Error::InvalidArgument("encoder weights given but use_encoder is not set".into())),
    }
}

fn to_detection(
    query_id: &str,
    reference_id: &str,
    seg: &CopySegment,
    fps: f64,
) -> Detection {
    Detection {
        query_id: query_id.to_string(),
        reference_id: reference_id.to_string(),
        q_start_s: seg.q_start as f64 / fps,
        q_end_s: seg.q_end as f64 / fps,
        r_start_s: seg.r_start as f64 / fps,
        r_end_s: seg.r_end as f64 / fps,
        sim: seg.sim,
        length: seg.length,
    }
}

fn sort_detections(dets: &mut [(usize, Detection)]) {
    dets.sort_by(|(ra, a), (rb, b)| {
        b.sim
            .total_cmp(&a.sim)
            .then(ra.cmp(rb))
            .then(a.q_start_s.total_cmp(&b.q_start_s))
            .then(a.r_start_s.total_cmp(&b.r_start_s))
    });
}

/// Runs one query segment against the index and returns its detections, best first.
///
/// When `params.use_encoder` is set, `encoder` must be given and the index is expected
/// to hold reference rows encoded with the same weights.
pub fn run_query(
    index: &GlobalIndex,
    query: &VideoFeatures,
    params: &QueryParams,
    encoder: Option<&Encoder>,
) -> Result<Vec<Detection>> {
    let prepared = prepare_query(query, params, encoder)?;
    let copies = localize_query(index, &prepared, params)?;
    let mut dets: Vec<(usize, Detection)> = copies
        .iter()
        .map(|c| {
            (
                c.rank,
                to_detection(&query.video_id, index.video_id(c.video_index), &c.segment, params.fps),
            )
        })
        .collect();
    sort_detections(&mut dets);
    Ok(dets.into_iter().map(|(_, d)| d).collect())
}

/// Localizes the query against every reference with dense matrices; no index, no shortlist.
pub fn run_scan(
    references: &[VideoFeatures],
    query: &VideoFeatures,
    params: &QueryParams,
) -> Result<Vec<Detection>> {
    let prepared = prepare_query(query, &QueryParams { use_encoder: false, ..*params }, None)?;
    if let Some(r) = references.iter().find(|r| r.dim() != prepared.dim()) {
        return Err(Error::Dimension(format!(
            "reference {:?} has dim {} but query has dim {}",
            r.video_id,
            r.dim(),
            prepared.dim()
        )));
    }
    let normalized: Vec<VideoFeatures> = references
        .iter()
        .map(|r| r.clone().normalize_rows())
        .collect::<Result<_>>()?;
    let copies = scan_rows(normalized.iter().map(VideoFeatures::as_slice), &prepared, params);
    let mut dets: Vec<(usize, Detection)> = copies
        .iter()
        .map(|c| {
            (
                c.rank,
                to_detection(&query.video_id, &references[c.video_index].video_id, &c.segment, params.fps),
            )
        })
        .collect();
    sort_detections(&mut dets);
    Ok(dets.into_iter().map(|(_, d)| d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub n_probe: Option<usize>,
    /// Mean wall time per query frame, milliseconds.
    pub ms_per_frame: f64,
    /// Matrix-multiplication time divided by this method's time.
    pub speedup: f64,
    /// Fraction of the exact top-K found.
    pub recall_at_k: f64,
    pub identical_to_flat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub repetitions: usize,
    pub top_k: usize,
    pub rows: Vec<BenchRow>,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "Average search time per frame ({} frames x {} reps, top-{})",
            self.frames, self.repetitions, self.top_k
        )?;
        writeln!(f, "{:<24} {:>12} {:>10} {:>10}", "method", "time(ms)", "speedup", "recall")?;
        for r in &self.rows {
            let name = match r.n_probe {
                Some(p) => format!("{} (n_probe={p})", r.method),
                None => r.method.clone(),
            };
            writeln!(
                f,
                "{:<24} {:>12.4} {:>10.2} {:>10.4}",
                name, r.ms_per_frame, r.speedup, r.recall_at_k
            )?;
        }
        Ok(())
    }
}

fn time_method(
    frames: &[&[f32]],
    repetitions: usize,
    search: impl Fn(&[f32]) -> Result<Vec<Hit>>,
) -> Result<(Duration, Vec<Vec<Hit>>)> {
    let mut results = Vec::new();
    let start = Instant::now();
    for rep in 0..repetitions {
        for f in frames {
            let hits = search(f)?;
            if rep == 0 {
                results.push(hits);
            }
        }
    }
    Ok((start.elapsed().max(Duration::from_nanos(1)), results))
}

fn recall(found: &[Vec<Hit>], exact: &[Vec<Hit>]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (f, e) in found.iter().zip(exact) {
        let got: HashSet<_> = f.iter().map(|h| h.frame_ref).collect();
        hit += e.iter().filter(|h| got.contains(&h.frame_ref)).count();
        total += e.len();
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Times full-sort matrix multiplication, exact flat search, and IVF search at each
/// `n_probe` (when the index has a quantizer) over every frame of `queries`.
pub fn bench_search(
    index: &GlobalIndex,
    queries: &[VideoFeatures],
    top_k: usize,
    n_probes: &[usize],
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
    }
    let normalized: Vec<VideoFeatures> = queries
        .iter()
        .map(|q| q.clone().normalize_rows())
        .collect::<Result<_>>()?;
    let frames: Vec<&[f32]> = normalized.iter().flat_map(|q| q.rows()).collect();
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no query frames to benchmark".into()));
    }
    let per_frame = |d: Duration| d.as_secs_f64() * 1e3 / (frames.len() * repetitions) as f64;

    let (mm_time, mm_hits) = time_method(&frames, repetitions, |q| index.full_sort_search(q, top_k))?;
    let (flat_time, flat_hits) = time_method(&frames, repetitions, |q| index.knn_search_flat(q, top_k))?;
    let mm_ms = per_frame(mm_time);
    let mut rows = vec![
        BenchRow {
            method: "matrix multiplication".into(),
            n_probe: None,
            ms_per_frame: mm_ms,
            speedup: 1.0,
            recall_at_k: recall(&mm_hits, &flat_hits),
            identical_to_flat: mm_hits == flat_hits,
        },
        BenchRow {
            method: "flat".into(),
            n_probe: None,
            ms_per_frame: per_frame(flat_time),
            speedup: mm_ms / per_frame(flat_time),
            recall_at_k: 1.0,
            identical_to_flat: true,
        },
    ];
    if let Some(ivf) = index.ivf() {
        let name = format!("ivf{}", ivf.n_cells);
        for &p in n_probes {
            let (t, hits) = time_method(&frames, repetitions, |q| index.knn_search(q, top_k, p))?;
            rows.push(BenchRow {
                method: name.clone(),
                n_probe: Some(p),
                ms_per_frame: per_frame(t),
                speedup: mm_ms / per_frame(t),
                recall_at_k: recall(&hits, &flat_hits),
                identical_to_flat: hits == flat_hits,
            });
        }
    }
    Ok(BenchReport {
        frames: frames.len(),
        repetitions,
        top_k,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis_video(id: &str, dim: usize, frames: std::ops::Range<usize>) -> VideoFeatures {
        let rows: Vec<Vec<f32>> = frames
            .map(|k| (0..dim).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
            .collect();
        VideoFeatures::from_rows(id, &rows).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(QueryParams::default().validate().is_ok());
        assert!(QueryParams { top_k_one: 0, ..Default::default() }.validate().is_err());
        assert!(QueryParams { sim_th: 1.5, ..Default::default() }.validate().is_err());
        assert!(QueryParams { fps: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!("scan".parse::<MatrixMode>().unwrap(), MatrixMode::Scan);
        assert!("diagonal".parse::<MatrixMode>().is_err());
    }

    #[test]
    fn encoder_flag_must_match_weights() {
        let v = basis_video("a", 4, 0..2);
        let idx = GlobalIndex::build_flat(std::slice::from_ref(&v)).unwrap();
        let p = QueryParams { use_encoder: true, ..Default::default() };
        assert!(run_query(&idx, &v, &p, None).is_err());
    }

    #[test]
    fn identity_copy_detected() {
        let a = basis_video("a", 8, 0..4);
        let b = basis_video("b", 8, 4..8);
        let idx = GlobalIndex::build_flat(&[a, b.clone()]).unwrap();
        let dets = run_query(&idx, &b, &QueryParams::default(), None).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!(d.reference_id, "b");
        assert_eq!((d.q_start_s, d.q_end_s, d.r_start_s, d.r_end_s), (0.0, 3.0, 0.0, 3.0));
        assert!((d.sim - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fps_scales_seconds() {
        let a = basis_video("a", 8, 0..6);
        let q = a.slice_frames(2, 6).unwrap();
        let idx = GlobalIndex::build_flat(&[a]).unwrap();
        let p = QueryParams { fps: 2.0, ..Default::default() };
        let d = &run_query(&idx, &q, &p, None).unwrap()[0];
        assert_eq!((d.q_start_s, d.q_end_s, d.r_start_s, d.r_end_s), (0.0, 1.5, 1.0, 2.5));
    }

    #[test]
    fn scan_of_empty_reference_set() {
        let q = basis_video("q", 4, 0..2);
        assert!(run_scan(&[], &q, &QueryParams::default()).unwrap().is_empty());
        let wrong = basis_video("r", 5, 0..2);
        assert!(run_scan(&[wrong], &q, &QueryParams::default()).is_err());
    }

    #[test]
    fn bench_rows_without_ivf() {
        let a = basis_video("a", 4, 0..4);
        let idx = GlobalIndex::build_flat(std::slice::from_ref(&a)).unwrap();
        let report = bench_search(&idx, &[a], 2, &[1], 1).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.ms_per_frame > 0.0));
        assert!(bench_search(&idx, &[], 2, &[1], 1).is_err());
    }
}
