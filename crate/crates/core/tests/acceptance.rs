//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use pvcd::encoder::{
    encode, gt_matrix, loss_gradient, similarity, train_encoder, weighted_mse_loss, EncoderConfig, EncoderWeights,
    Label, LossWeights, TrainConfig, TrainingSample,
};
use pvcd::eval::{best_f1_over_thresholds, segment_f1, Detection};
use pvcd::localize::{brute_force_best_path, temporal_network};
use pvcd::pipeline::{bench_search, run_query, run_scan, MatrixMode, QueryParams};
use pvcd::simmatrix::{filter_top_k_one, Entry, SparseSimMatrix};
use pvcd::{CopyAnnotation, GlobalIndex, PathParams, VideoFeatures};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    check(took < limit, format!("took {took:?}, limit {limit:?}"))?;
    Ok(took)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

fn random_video(rng: &mut ChaCha8Rng, id: &str, frames: usize, dim: usize) -> VideoFeatures {
    let rows: Vec<Vec<f32>> = (0..frames).map(|_| unit_vector(rng, dim)).collect();
    VideoFeatures::from_rows(id, &rows).unwrap()
}

/// 1,000 unit vectors in 20 videos of 50 frames, d = 64, plus 100 unit queries.
fn knn_fixture() -> (Vec<VideoFeatures>, Vec<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let videos = (0..20).map(|i| random_video(&mut rng, &format!("v{i:02}"), 50, 64)).collect();
    let queries = (0..100).map(|_| unit_vector(&mut rng, 64)).collect();
    (videos, queries)
}

/// Exhaustive oracle: every (similarity, row) pair, sorted by similarity then row.
fn brute_top_k(index: &GlobalIndex, q: &[f32], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..index.row_count())
        .map(|r| {
            let s: f64 = index.row(r).iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum();
            (r, s)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn criterion_1() -> Outcome {
    let (videos, queries) = knn_fixture();
    let start = Instant::now();
    let index = GlobalIndex::build_flat(&videos).map_err(|e| e.to_string())?;
    for (qi, q) in queries.iter().enumerate() {
        let hits = index.knn_search_flat(q, 10).map_err(|e| e.to_string())?;
        let oracle = brute_top_k(&index, q, 10);
        check(hits.len() == 10, format!("query {qi}: {} hits", hits.len()))?;
        for (h, (row, sim)) in hits.iter().zip(&oracle) {
            check(index.row_of(h.frame_ref) == Some(*row), format!("query {qi}: row mismatch"))?;
            check(
                (h.similarity as f64 - sim).abs() <= 1e-6,
                format!("query {qi}: similarity {} vs {sim}", h.similarity),
            )?;
        }
    }
    let took = within(start, Duration::from_secs(1))?;
    Ok(format!("100 queries exact against brute force in {took:?}"))
}

fn criterion_2() -> Outcome {
    let (videos, queries) = knn_fixture();
    let index = GlobalIndex::build_ivf(&videos, 16, 20, 7).map_err(|e| e.to_string())?;
    let mut recalls = Vec::new();
    for n_probe in 1..=16 {
        let mut found = 0usize;
        for (qi, q) in queries.iter().enumerate() {
            let flat = index.knn_search_flat(q, 10).map_err(|e| e.to_string())?;
            let ivf = index.knn_search(q, 10, n_probe).map_err(|e| e.to_string())?;
            if n_probe == 16 {
                check(ivf == flat, format!("query {qi}: n_probe=16 differs from flat"))?;
            }
            let got: HashSet<_> = ivf.iter().map(|h| h.frame_ref).collect();
            found += flat.iter().filter(|h| got.contains(&h.frame_ref)).count();
        }
        recalls.push(found as f64 / (10 * queries.len()) as f64);
    }
    check(
        recalls.windows(2).all(|w| w[1] >= w[0]),
        format!("recall not monotone: {recalls:?}"),
    )?;
    Ok(format!(
        "n_probe=16 identical to flat; recall@10 n_probe=1 {:.3}, 4 {:.3}, 8 {:.3}",
        recalls[0], recalls[3], recalls[7]
    ))
}

fn random_sparse(rng: &mut ChaCha8Rng) -> SparseSimMatrix {
    let rows = rng.random_range(1..=8);
    let cols = rng.random_range(1..=8);
    let nnz = rng.random_range(0..=12usize.min(rows * cols));
    let mut cells: Vec<(u32, u32)> = (0..rows as u32).flat_map(|r| (0..cols as u32).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    let entries = cells[..nnz]
        .iter()
        .map(|&(row, col)| Entry {
            row,
            col,
            sim: rng.random_range(-0.2f32..1.0),
        })
        .collect();
    SparseSimMatrix::from_entries(rows, cols, entries).unwrap()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Instant::now();
    let mut nonempty = 0;
    for i in 0..500 {
        let m = random_sparse(&mut rng);
        let params = PathParams {
            max_step: [1, 2, 5][rng.random_range(0..3)],
            max_diff: [0, 1, 5][rng.random_range(0..3)],
            sim_th: [0.0, 0.5][rng.random_range(0..2)],
            top_k_one: 20,
        };
        let m = filter_top_k_one(&m, params.top_k_one, params.sim_th);
        let dp = temporal_network(&m, &params).map(|s| s.score);
        let bf = brute_force_best_path(&m, &params).map_err(|e| e.to_string())?.map(|s| s.score);
        check(dp == bf, format!("instance {i}: dp {dp:?} vs brute force {bf:?} ({params:?})"))?;
        nonempty += dp.is_some() as usize;
    }
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!("500 instances ({nonempty} with a path) exact in {took:?}"))
}

struct PlantedFixture {
    references: Vec<VideoFeatures>,
    queries: Vec<VideoFeatures>,
    annotations: Vec<CopyAnnotation>,
}

/// 50 references × 60 random unit frames (d = 32); 20 queries, each 10 consecutive
/// reference frames plus N(0, 0.1²) noise, re-normalized.
fn planted_fixture() -> PlantedFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let references: Vec<VideoFeatures> = (0..50).map(|i| random_video(&mut rng, &format!("ref{i:02}"), 60, 32)).collect();
    let mut queries = Vec::new();
    let mut annotations = Vec::new();
    for i in 0..20 {
        let r = &references[rng.random_range(0..references.len())];
        let s = rng.random_range(0..=50usize);
        let rows: Vec<Vec<f32>> = (s..s + 10)
            .map(|f| {
                let v: Vec<f64> = r.row(f).iter().map(|&x| x as f64 + noise.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| (x / n) as f32).collect()
            })
            .collect();
        let id = format!("q{i:02}");
        queries.push(VideoFeatures::from_rows(&id, &rows).unwrap());
        annotations.push(CopyAnnotation::new(id, r.video_id.clone(), (0.0, 9.0), (s as f64, (s + 9) as f64)).unwrap());
    }
    PlantedFixture {
        references,
        queries,
        annotations,
    }
}

fn criterion_4() -> Outcome {
    let fx = planted_fixture();
    let start = Instant::now();
    let index = GlobalIndex::build_flat(&fx.references).map_err(|e| e.to_string())?;
    let mut report = Vec::new();
    for mode in [MatrixMode::Reconstructed, MatrixMode::Original] {
        let params = QueryParams {
            mode,
            ..QueryParams::default()
        };
        let mut dets = Vec::new();
        for q in &fx.queries {
            dets.extend(run_query(&index, q, &params, None).map_err(|e| e.to_string())?);
        }
        let best = best_f1_over_thresholds(&dets, &fx.annotations);
        check(
            best.scores.f1 >= 0.95,
            format!("{mode}: best f1 {:.4} at {}", best.scores.f1, best.threshold),
        )?;
        let raw = segment_f1(&dets, &fx.annotations).f1;
        report.push(format!(
            "{mode} f1 {:.4} at sim >= {:.3} (unthresholded {raw:.3})",
            best.scores.f1, best.threshold
        ));
    }
    let took = within(start, Duration::from_secs(30))?;
    Ok(format!("{} in {took:?}", report.join(", ")))
}

fn detection_key(d: &Detection) -> String {
    format!(
        "{}|{}|{}|{}|{}|{}|{}|{}",
        d.query_id, d.reference_id, d.q_start_s, d.q_end_s, d.r_start_s, d.r_end_s, d.sim, d.length
    )
}

fn criterion_5() -> Outcome {
    let fx = planted_fixture();
    let index = GlobalIndex::build_flat(&fx.references).map_err(|e| e.to_string())?;
    let params = QueryParams {
        mode: MatrixMode::Original,
        top_k_video: 50,
        ..QueryParams::default()
    };
    let mut total = 0;
    for q in &fx.queries {
        let a: Vec<String> = run_query(&index, q, &params, None).map_err(|e| e.to_string())?.iter().map(detection_key).collect();
        let b: Vec<String> = run_scan(&fx.references, q, &params).map_err(|e| e.to_string())?.iter().map(detection_key).collect();
        let (sa, sb): (HashSet<_>, HashSet<_>) = (a.iter().collect(), b.iter().collect());
        check(
            sa == sb && a.len() == b.len(),
            format!("{}: query {} vs scan {} detections", q.video_id, a.len(), b.len()),
        )?;
        total += a.len();
    }
    Ok(format!("20 queries, {total} detections identical"))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut cfg = EncoderConfig::new(4, 2);
    cfg.ffn_dim = 8;
    cfg.seed = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mat = |r: usize| Array2::from_shape_fn((r, 4), |_| rng.random_range(-1.0..1.0));
    let sample = TrainingSample::new(mat(3), mat(4), Label::Positive { s_q: 0, s_r: 1, len: 3 }).unwrap();
    let mut w = EncoderWeights::init(&cfg).map_err(|e| e.to_string())?;
    // Non-trivial biases and gains so every parameter's gradient is exercised.
    let mut flat = w.flatten();
    for v in flat.iter_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    w.assign_flat(&flat);

    let lw = LossWeights::default();
    let (_, grads) = loss_gradient(&sample, &w, &cfg, lw).map_err(|e| e.to_string())?;
    let analytic = grads.flatten();
    let loss_at = |values: &[f64]| {
        let mut p = w.clone();
        p.assign_flat(values);
        let q = encode(&sample.query, &p, &cfg).unwrap();
        let r = encode(&sample.reference, &p, &cfg).unwrap();
        weighted_mse_loss(&similarity(&q, &r), &sample.ground_truth().unwrap(), lw).unwrap()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut significant = 0;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs());
        check(
            abs <= 1e-7 || rel <= 1e-4,
            format!("parameter {i}: analytic {} vs numeric {numeric}", analytic[i]),
        )?;
        if numeric.abs() > 1e-5 {
            worst = worst.max(rel);
            significant += 1;
        }
    }
    let took = within(start, Duration::from_secs(10))?;
    check(significant * 2 > flat.len(), format!("only {significant} partials above 1e-5"))?;
    Ok(format!(
        "{} partials match, worst rel err {worst:.2e} over the {significant} above 1e-5, {took:?}",
        flat.len()
    ))
}

const TRAIN_DIM: usize = 16;

/// Frames share a common direction so that unrelated frames still have positive
/// similarity; copies are noisy versions of reference frames.
fn training_frame(rng: &mut ChaCha8Rng, common: &[f64]) -> Vec<f64> {
    common.iter().map(|c| c + rng.random_range(-1.0..1.0)).collect()
}

fn training_pair(rng: &mut ChaCha8Rng, common: &[f64], positive: bool) -> TrainingSample {
    let (t, m) = (6, 10);
    let reference: Vec<Vec<f64>> = (0..m).map(|_| training_frame(rng, common)).collect();
    let s_r = rng.random_range(0..=m - t);
    let query: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            if positive {
                reference[s_r + i].iter().map(|x| x + rng.random_range(-0.2..0.2)).collect()
            } else {
                training_frame(rng, common)
            }
        })
        .collect();
    let to_array = |rows: &[Vec<f64>]| Array2::from_shape_fn((rows.len(), TRAIN_DIM), |(i, j)| rows[i][j]);
    let label = if positive {
        Label::Positive { s_q: 0, s_r, len: t }
    } else {
        Label::Negative
    };
    TrainingSample::new(to_array(&query), to_array(&reference), label).unwrap()
}

fn diagonal_ratio(sample: &TrainingSample, w: &EncoderWeights, cfg: &EncoderConfig) -> f64 {
    let q = encode(&sample.query, w, cfg).unwrap();
    let r = encode(&sample.reference, w, cfg).unwrap();
    let p = similarity(&q, &r);
    let gt = sample.ground_truth().unwrap();
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0, 0.0, 0);
    for (s, g) in p.iter().zip(&gt) {
        if *g == 1.0 {
            on += s;
            n_on += 1;
        } else {
            off += s;
            n_off += 1;
        }
    }
    (on / n_on as f64) / (off / n_off as f64)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let common: Vec<f64> = (0..TRAIN_DIM).map(|_| 1.0).collect();
    let samples: Vec<TrainingSample> = (0..100).map(|i| training_pair(&mut rng, &common, i % 2 == 0)).collect();
    let held_out = training_pair(&mut rng, &common, true);

    let mut cfg = EncoderConfig::new(TRAIN_DIM, 2);
    cfg.ffn_dim = 32;
    cfg.seed = 7;
    let train = TrainConfig {
        epochs: 30,
        seed: 7,
        ..TrainConfig::default()
    };
    let before = EncoderWeights::init(&cfg).map_err(|e| e.to_string())?;
    let out = train_encoder(&samples, &cfg, &train).map_err(|e| e.to_string())?;
    let first = out.history.first().unwrap().mean_loss;
    let last = out.history.last().unwrap().mean_loss;
    check(last <= 0.8 * first, format!("loss {first:.5} -> {last:.5}"))?;
    let (r0, r1) = (diagonal_ratio(&held_out, &before, &cfg), diagonal_ratio(&held_out, &out.weights, &cfg));
    check(r1 > r0, format!("diagonal ratio {r0:.4} -> {r1:.4}"))?;
    Ok(format!("loss {first:.5} -> {last:.5}, held-out diagonal ratio {r0:.4} -> {r1:.4}"))
}

fn criterion_8() -> Outcome {
    let gt = gt_matrix(3, 4, 1, 2, 2).map_err(|e| e.to_string())?;
    let ones: Vec<(usize, usize)> = gt.indexed_iter().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
    check(ones == vec![(1, 2), (2, 3)], format!("ones at {ones:?}"))?;
    check(gt.iter().all(|&v| v == 0.0 || v == 1.0), "non-binary ground truth")?;
    let w = LossWeights { zero: 0.1, one: 1.1 };
    let loss = weighted_mse_loss(&Array2::from_elem((1, 1), 0.5), &Array2::from_elem((1, 1), 1.0), w)
        .map_err(|e| e.to_string())?;
    check((loss - 0.3025).abs() <= 1e-12, format!("loss {loss}"))?;
    Ok(format!("ground truth ones at {ones:?}, 1x1 loss {loss}"))
}

fn det(q: &str, r: &str, qs: (f64, f64), rs: (f64, f64), sim: f64) -> Detection {
    Detection {
        query_id: q.into(),
        reference_id: r.into(),
        q_start_s: qs.0,
        q_end_s: qs.1,
        r_start_s: rs.0,
        r_end_s: rs.1,
        sim,
        length: 1,
    }
}

fn random_detections(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<CopyAnnotation>) {
    let ids = ["a", "b", "c"];
    let span = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(0..20) as f64;
        (s, s + rng.random_range(0..6) as f64)
    };
    let anns = (0..rng.random_range(1..5))
        .map(|_| {
            let (q, r) = (ids[rng.random_range(0..3)], ids[rng.random_range(0..3)]);
            CopyAnnotation::new(q, r, span(rng), span(rng)).unwrap()
        })
        .collect();
    let dets = (0..rng.random_range(0..12))
        .map(|_| {
            let (q, r) = (ids[rng.random_range(0..3)], ids[rng.random_range(0..3)]);
            let sim = rng.random_range(0..10) as f64 / 10.0;
            det(q, r, span(rng), span(rng), sim)
        })
        .collect();
    (dets, anns)
}

fn criterion_9() -> Outcome {
    let a1 = CopyAnnotation::new("q", "r", (0.0, 10.0), (20.0, 30.0)).unwrap();
    let a2 = CopyAnnotation::new("q", "s", (40.0, 50.0), (0.0, 10.0)).unwrap();

    let s = segment_f1(&[det("q", "r", (0.0, 10.0), (20.0, 30.0), 0.9)], &[a1.clone(), a2.clone()]);
    check(
        s.precision == 1.0 && s.recall == 0.5 && s.f1 == 2.0 / 3.0,
        format!("one of two: {s:?}"),
    )?;
    let s = segment_f1(&[], &[a1.clone(), a2.clone()]);
    check(s.precision == 0.0 && s.recall == 0.0 && s.f1 == 0.0, format!("no detections: {s:?}"))?;
    let s = segment_f1(&[det("q", "r", (2.0, 8.0), (50.0, 60.0), 0.9)], std::slice::from_ref(&a1));
    check(s.tp == 0 && s.fp == 1 && s.f1 == 0.0, format!("query-only overlap: {s:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let (dets, anns) = random_detections(&mut rng);
        let best = best_f1_over_thresholds(&dets, &anns);
        let mut thresholds: Vec<f64> = dets.iter().map(|d| d.sim).collect();
        thresholds.extend([f64::NEG_INFINITY, -0.05, 0.05, 0.55, 1.5]);
        for th in thresholds {
            let kept: Vec<Detection> = dets.iter().filter(|d| d.sim >= th).cloned().collect();
            let f = segment_f1(&kept, &anns).f1;
            check(best.scores.f1 >= f, format!("set {i}: sweep {} < {f} at {th}", best.scores.f1))?;
        }
    }
    Ok("three hand cases exact; sweep dominates on 100 random sets".into())
}

fn criterion_10() -> Outcome {
    let (videos, queries) = knn_fixture();
    let index = GlobalIndex::build_ivf(&videos, 16, 20, 7).map_err(|e| e.to_string())?;
    let q = VideoFeatures::from_rows("bench", &queries[..20]).unwrap();
    let report = bench_search(&index, &[q], 10, &[1, 4, 16], 2).map_err(|e| e.to_string())?;
    let methods: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    check(
        methods == ["matrix multiplication", "flat", "ivf16", "ivf16", "ivf16"],
        format!("rows {methods:?}"),
    )?;
    for r in &report.rows {
        check(
            r.ms_per_frame > 0.0 && r.speedup > 0.0 && r.speedup.is_finite(),
            format!("{}: time {} speedup {}", r.method, r.ms_per_frame, r.speedup),
        )?;
    }
    check(report.rows[4].identical_to_flat, "ivf n_probe=16 differs from flat")?;
    check(report.rows[0].identical_to_flat, "matrix multiplication differs from flat")?;
    let text = report.to_string();
    check(text.contains("Average search time per frame"), "missing table title")?;
    Ok(format!("{} rows with positive times and speedups", report.rows.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("knn exactness", criterion_1),
        ("ivf completeness", criterion_2),
        ("localization optimality", criterion_3),
        ("planted copies end to end", criterion_4),
        ("scan equivalence", criterion_5),
        ("gradient correctness", criterion_6),
        ("training sanity", criterion_7),
        ("loss and ground truth", criterion_8),
        ("segment metrics", criterion_9),
        ("bench report", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
