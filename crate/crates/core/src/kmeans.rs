//! Seeded Lloyd k-means used as the IVF coarse quantizer.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub(crate) fn nearest(row: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Runs `iters` Lloyd iterations from `k` distinct seeded random rows.
///
/// Clusters that empty out are re-seeded from the row farthest from its
/// current centroid. Returns the centroids and each row's final assignment.
pub(crate) fn kmeans(
    data: &[f32],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> (Vec<f32>, Vec<u32>) {
    let n = data.len() / dim;
    assert!(k >= 1 && k <= n, "k-means needs 1 <= k <= n");
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, n, k).into_vec();
    picks.sort_unstable();
    let mut centroids: Vec<f32> = picks.iter().flat_map(|&i| row(i).iter().copied()).collect();

    let mut assign = vec![0u32; n];
    let mut dist = vec![0f64; n];
    for _ in 0..iters {
        for i in 0..n {
            let (c, d) = nearest(row(i), &centroids, dim);
            assign[i] = c as u32;
            dist[i] = d;
        }

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v as f64;
            }
        }

        let mut taken = vec![false; n];
        for c in 0..k {
            let target = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                for (t, &s) in target.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *t = (s / counts[c] as f64) as f32;
                }
                continue;
            }
            // farthest row not already used for a re-seed this round; ties -> lowest row
            let far = (0..n)
                .filter(|&i| !taken[i])
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                taken[i] = true;
                dist[i] = 0.0;
                target.copy_from_slice(row(i));
            }
        }
    }

    for (i, a) in assign.iter_mut().enumerate() {
        *a = nearest(row(i), &centroids, dim).0 as u32;
    }
    (centroids, assign)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equals_n_keeps_every_point() {
        let data = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let (centroids, assign) = kmeans(&data, 2, 3, 5, 7);
        let mut sorted = assign.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
        for (i, &c) in assign.iter().enumerate() {
            assert_eq!(&centroids[c as usize * 2..c as usize * 2 + 2], &data[i * 2..i * 2 + 2]);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let data: Vec<f32> = (0..200).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        assert_eq!(kmeans(&data, 4, 5, 10, 3), kmeans(&data, 4, 5, 10, 3));
    }

    #[test]
    fn duplicate_points_reseed_empty_cluster() {
        // three identical rows and one outlier, k = 3: identical seeds collapse onto one cluster
        let data = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0];
        let (_, assign) = kmeans(&data, 2, 3, 4, 0);
        assert_ne!(assign[3], assign[0]);
        assert_eq!(assign[0], assign[1]);
    }
}
