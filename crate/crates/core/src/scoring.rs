//! Per-video accumulation of KNN hits and candidate shortlisting.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::index::Hit;

pub const DEFAULT_TOP_K_VIDEO: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VideoScore {
    pub video_index: u32,
    pub score: f64,
}

/// Sums hit similarities per video, unconditionally (negative similarities included).
///
/// Output is ordered by ascending video index.
pub fn score_videos(hits_per_frame: &[Vec<Hit>]) -> Vec<VideoScore> {
    let mut totals: BTreeMap<u32, f64> = BTreeMap::new();
    for hit in hits_per_frame.iter().flatten() {
        *totals.entry(hit.frame_ref.video_index).or_insert(0.0) += hit.similarity as f64;
    }
    totals
        .into_iter()
        .map(|(video_index, score)| VideoScore { video_index, score })
        .collect()
}

/// The `top_k_video` highest-scoring videos, best first, ties by ascending video index.
pub fn top_videos(scores: &[VideoScore], top_k_video: usize) -> Vec<VideoScore> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.video_index.cmp(&b.video_index))
    });
    ranked.truncate(top_k_video);
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::FrameRef;

    fn hit(v: u32, j: u32, s: f32) -> Hit {
        Hit {
            frame_ref: FrameRef {
                video_index: v,
                frame_index: j,
            },
            similarity: s,
        }
    }

    #[test]
    fn double_sum_per_video() {
        let hits = vec![vec![hit(0, 3, 0.9), hit(1, 1, 0.5)], vec![hit(0, 4, 0.8)]];
        let scores = score_videos(&hits);
        assert_eq!(scores.len(), 2);
        assert!((scores[0].score - 1.7).abs() < 1e-6);
        assert!((scores[1].score - 0.5).abs() < 1e-7);
    }

    #[test]
    fn single_hit_and_empty() {
        let scores = score_videos(&[vec![hit(7, 0, 0.7)]]);
        assert_eq!(scores, vec![VideoScore { video_index: 7, score: 0.7f32 as f64 }]);
        assert!(score_videos(&[]).is_empty());
        assert!(score_videos(&[vec![], vec![]]).is_empty());
    }

    #[test]
    fn negative_similarities_are_summed() {
        let scores = score_videos(&[vec![hit(0, 0, 0.5), hit(0, 1, -0.25)]]);
        assert_eq!(scores[0].score, 0.25);
    }

    #[test]
    fn ranking_and_truncation() {
        let s = vec![
            VideoScore { video_index: 0, score: 1.7 },
            VideoScore { video_index: 1, score: 0.5 },
        ];
        assert_eq!(top_videos(&s, 1), vec![s[0]]);
        assert_eq!(top_videos(&s, 10), s);
        let tied = vec![
            VideoScore { video_index: 4, score: 1.0 },
            VideoScore { video_index: 2, score: 1.0 },
        ];
        assert_eq!(top_videos(&tied, 2)[0].video_index, 2);
    }
}
