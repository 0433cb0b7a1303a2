//! Training-set construction: positives from annotations, hard negatives from the
//! false positives of the encoder-free pipeline, padded with random reference crops.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{Label, TrainingSample};
use super::features_to_array;
use crate::error::{Error, Result};
use crate::eval::detection_matches;
use crate::features::{CopyAnnotation, VideoFeatures};
use crate::index::GlobalIndex;
use crate::pipeline::{localize_query, QueryParams};

const RANDOM_CROP_ATTEMPTS: usize = 100;

fn to_frame(seconds: f64, fps: f64) -> usize {
    (seconds * fps).round().max(0.0) as usize
}

fn crop(v: &VideoFeatures, start: usize, end_inclusive: usize) -> Result<ndarray::Array2<f64>> {
    Ok(features_to_array(&v.slice_frames(start, end_inclusive + 1)?))
}

/// One positive per annotation: the full query (`video_a`) against the full reference
/// (`video_b`), with the copy's start frames and the shorter span's length.
pub fn positive_samples(
    videos: &[VideoFeatures],
    annotations: &[CopyAnnotation],
    fps: f64,
) -> Result<Vec<TrainingSample>> {
    let by_id: HashMap<&str, &VideoFeatures> = videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut out = Vec::with_capacity(annotations.len());
    for a in annotations {
        let lookup = |id: &str| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::Inconsistent(format!("annotated video {id:?} has no features")))
        };
        let q = lookup(&a.video_a)?.clone().normalize_rows()?;
        let r = lookup(&a.video_b)?.clone().normalize_rows()?;
        let s_q = to_frame(a.a_start, fps);
        let s_r = to_frame(a.b_start, fps);
        if s_q >= q.frame_count() || s_r >= r.frame_count() {
            return Err(Error::Inconsistent(format!(
                "annotation {} / {} starts beyond the extracted frames",
                a.video_a, a.video_b
            )));
        }
        let span = to_frame(a.a_end, fps)
            .saturating_sub(s_q)
            .min(to_frame(a.b_end, fps).saturating_sub(s_r))
            + 1;
        let len = span.min(q.frame_count() - s_q).min(r.frame_count() - s_r);
        out.push(TrainingSample::new(
            features_to_array(&q),
            features_to_array(&r),
            Label::Positive { s_q, s_r, len },
        )?);
    }
    Ok(out)
}

/// Runs the encoder-free pipeline for every query against `references` and turns each
/// detection that matches no annotation into a negative sample (the detected query and
/// reference spans). If that yields fewer than `min_count` negatives, random reference
/// crops that overlap no annotation for the pair fill the gap.
pub fn mine_hard_negatives(
    references: &[VideoFeatures],
    queries: &[VideoFeatures],
    annotations: &[CopyAnnotation],
    params: &QueryParams,
    min_count: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    let params = QueryParams {
        use_encoder: false,
        ..*params
    };
    let index = GlobalIndex::build_flat(references)?;
    let normalized_refs: Vec<VideoFeatures> = references
        .iter()
        .map(|r| r.clone().normalize_rows())
        .collect::<Result<_>>()?;

    let mut negatives = Vec::new();
    for query in queries {
        let q = query.clone().normalize_rows()?;
        for copy in localize_query(&index, &q, &params)? {
            let seg = &copy.segment;
            let reference = &normalized_refs[copy.video_index];
            let det = crate::eval::Detection {
                query_id: q.video_id.clone(),
                reference_id: reference.video_id.clone(),
                q_start_s: seg.q_start as f64 / params.fps,
                q_end_s: seg.q_end as f64 / params.fps,
                r_start_s: seg.r_start as f64 / params.fps,
                r_end_s: seg.r_end as f64 / params.fps,
                sim: seg.sim,
                length: seg.length,
            };
            if q.video_id == reference.video_id || annotations.iter().any(|a| detection_matches(&det, a)) {
                continue;
            }
            negatives.push(TrainingSample::new(
                crop(&q, seg.q_start, seg.q_end)?,
                crop(reference, seg.r_start, seg.r_end)?,
                Label::Negative,
            )?);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0;
    while negatives.len() < min_count && !queries.is_empty() && attempts < RANDOM_CROP_ATTEMPTS * min_count.max(1) {
        attempts += 1;
        let q = &queries[rng.random_range(0..queries.len())];
        let r = &normalized_refs[rng.random_range(0..normalized_refs.len())];
        if q.video_id == r.video_id {
            continue;
        }
        let len = q.frame_count().min(r.frame_count());
        let start = rng.random_range(0..=r.frame_count() - len);
        let span = (start as f64 / params.fps, (start + len - 1) as f64 / params.fps);
        let overlaps = annotations.iter().any(|a| {
            let (ref_span, pair) = if a.video_a == q.video_id {
                ((a.b_start, a.b_end), a.video_b == r.video_id)
            } else {
                ((a.a_start, a.a_end), a.video_b == q.video_id && a.video_a == r.video_id)
            };
            pair && span.0 <= ref_span.1 && ref_span.0 <= span.1
        });
        if overlaps {
            continue;
        }
        let q = q.clone().normalize_rows()?;
        negatives.push(TrainingSample::new(
            features_to_array(&q),
            crop(r, start, start + len - 1)?,
            Label::Negative,
        )?);
    }
    Ok(negatives)
}
