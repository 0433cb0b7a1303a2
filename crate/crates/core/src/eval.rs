//! Segment-level precision, recall and F1 under the any-overlap rule.
//!
//! A detection is a true positive when an annotation for the same (unordered) video
//! pair overlaps it on both the query span and the reference span. Spans are closed
//! intervals in seconds, so touching endpoints overlap. Recall counts annotations
//! covered by at least one true-positive detection.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::features::CopyAnnotation;

/// One reported copy, with spans in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub query_id: String,
    pub reference_id: String,
    pub q_start_s: f64,
    pub q_end_s: f64,
    pub r_start_s: f64,
    pub r_end_s: f64,
    pub sim: f64,
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl F1Scores {
    fn from_counts(tp: usize, detections: usize, covered: usize, annotations: usize) -> Self {
        let precision = if detections == 0 { 0.0 } else { tp as f64 / detections as f64 };
        let recall = if annotations == 0 { 0.0 } else { covered as f64 / annotations as f64 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp: detections - tp,
            fn_: annotations - covered,
        }
    }
}

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

fn pair_key<'a>(x: &'a str, y: &'a str) -> (&'a str, &'a str) {
    if x <= y {
        (x, y)
    } else {
        (y, x)
    }
}

/// Whether `d` overlaps `a` on both axes, in whichever orientation the ids match.
pub fn detection_matches(d: &Detection, a: &CopyAnnotation) -> bool {
    let q = (d.q_start_s, d.q_end_s);
    let r = (d.r_start_s, d.r_end_s);
    let (sa, sb) = ((a.a_start, a.a_end), (a.b_start, a.b_end));
    let forward = a.video_a == d.query_id
        && a.video_b == d.reference_id
        && overlaps(q, sa)
        && overlaps(r, sb);
    let backward = a.video_b == d.query_id
        && a.video_a == d.reference_id
        && overlaps(q, sb)
        && overlaps(r, sa);
    forward || backward
}

/// For each detection, the indices of the annotations it matches.
fn match_table(detections: &[Detection], annotations: &[CopyAnnotation]) -> Vec<Vec<usize>> {
    let mut by_pair: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (i, a) in annotations.iter().enumerate() {
        by_pair
            .entry(pair_key(&a.video_a, &a.video_b))
            .or_default()
            .push(i);
    }
    detections
        .iter()
        .map(|d| {
            by_pair
                .get(&pair_key(&d.query_id, &d.reference_id))
                .map(|cands| {
                    cands
                        .iter()
                        .copied()
                        .filter(|&i| detection_matches(d, &annotations[i]))
                        .collect()
                })
                .unwrap_or_default()
        })
        .collect()
}

pub fn segment_f1(detections: &[Detection], annotations: &[CopyAnnotation]) -> F1Scores {
    let table = match_table(detections, annotations);
    let tp = table.iter().filter(|m| !m.is_empty()).count();
    let mut covered = vec![false; annotations.len()];
    for &i in table.iter().flatten() {
        covered[i] = true;
    }
    let covered = covered.iter().filter(|&&c| c).count();
    F1Scores::from_counts(tp, detections.len(), covered, annotations.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdedF1 {
    /// Detections with `sim >= threshold` are kept; `-inf` keeps everything.
    pub threshold: f64,
    pub scores: F1Scores,
}

/// Evaluates every distinct detection score (and `-inf`) as a cut-off and returns
/// the best F1, ties to the lowest threshold.
pub fn best_f1_over_thresholds(
    detections: &[Detection],
    annotations: &[CopyAnnotation],
) -> ThresholdedF1 {
    let table = match_table(detections, annotations);
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].sim.total_cmp(&detections[a].sim));

    // Sweep from the highest threshold down, admitting detections as the cut-off drops.
    let mut cover_count = vec![0usize; annotations.len()];
    let (mut kept, mut tp, mut covered) = (0, 0, 0);
    let mut best = ThresholdedF1 {
        threshold: f64::NEG_INFINITY,
        scores: F1Scores::from_counts(0, 0, 0, annotations.len()),
    };
    let mut candidates = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let theta = detections[order[i]].sim;
        while i < order.len() && detections[order[i]].sim == theta {
            let m = &table[order[i]];
            kept += 1;
            if !m.is_empty() {
                tp += 1;
            }
            for &a in m {
                cover_count[a] += 1;
                if cover_count[a] == 1 {
                    covered += 1;
                }
            }
            i += 1;
        }
        candidates.push(ThresholdedF1 {
            threshold: theta,
            scores: F1Scores::from_counts(tp, kept, covered, annotations.len()),
        });
    }
    // -inf admits the same set as the lowest score; walk low to high so ties keep the lowest.
    let all = F1Scores::from_counts(tp, kept, covered, annotations.len());
    best.scores = all;
    for c in candidates.into_iter().rev() {
        if c.scores.f1 > best.scores.f1 {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairBreakdown {
    pub video_a: String,
    pub video_b: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// The JSON evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when no threshold was applied (or the sweep kept everything).
    pub threshold: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_pair: Vec<PairBreakdown>,
}

pub fn evaluation_report(
    detections: &[Detection],
    annotations: &[CopyAnnotation],
    sweep: bool,
) -> EvalReport {
    let threshold = if sweep {
        best_f1_over_thresholds(detections, annotations).threshold
    } else {
        f64::NEG_INFINITY
    };
    let kept: Vec<Detection> = detections
        .iter()
        .filter(|d| d.sim >= threshold)
        .cloned()
        .collect();
    let scores = segment_f1(&kept, annotations);
    let table = match_table(&kept, annotations);

    let mut pairs: BTreeMap<(String, String), PairBreakdown> = BTreeMap::new();
    let mut covered = vec![false; annotations.len()];
    for (d, m) in kept.iter().zip(&table) {
        let p = pair_entry(&mut pairs, &d.query_id, &d.reference_id);
        if m.is_empty() {
            p.fp += 1;
        } else {
            p.tp += 1;
        }
        for &i in m {
            covered[i] = true;
        }
    }
    for (a, c) in annotations.iter().zip(&covered) {
        let p = pair_entry(&mut pairs, &a.video_a, &a.video_b);
        if !c {
            p.fn_ += 1;
        }
    }

    EvalReport {
        precision: scores.precision,
        recall: scores.recall,
        f1: scores.f1,
        threshold: threshold.is_finite().then_some(threshold),
        tp: scores.tp,
        fp: scores.fp,
        fn_: scores.fn_,
        per_pair: pairs.into_values().collect(),
    }
}

fn pair_entry<'a>(
    pairs: &'a mut BTreeMap<(String, String), PairBreakdown>,
    x: &str,
    y: &str,
) -> &'a mut PairBreakdown {
    let (a, b) = pair_key(x, y);
    pairs
        .entry((a.to_string(), b.to_string()))
        .or_insert_with(|| PairBreakdown {
            video_a: a.to_string(),
            video_b: b.to_string(),
            tp: 0,
            fp: 0,
            fn_: 0,
        })
}
