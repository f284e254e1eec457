use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Lloyd iteration cap.
pub const MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to assigned centers after seeding and after
    /// every Lloyd iteration.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means with k-means++ seeding. Fewer than `k` vectors are padded by
/// cycling through them; empty clusters are re-seeded from the point
/// farthest from its center.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(kmeans_detailed(vectors, k, seed)?.centers)
}

pub fn kmeans_detailed(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if vectors.is_empty() || k == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one vector and k >= 1".into()));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("kmeans", "vectors have different lengths"));
    }
    let points: Vec<&[f64]> = if vectors.len() < k {
        vectors.iter().cycle().take(k).map(Vec::as_slice).collect()
    } else {
        vectors.iter().map(Vec::as_slice).collect()
    };
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![points[rng.gen_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[pick].to_vec());
        let c = centers.last().unwrap();
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, c));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let assign = |centers: &[Vec<f64>], assignment: &mut [usize]| -> (bool, f64) {
        let mut changed = false;
        let mut obj = 0.0;
        for (a, p) in assignment.iter_mut().zip(&points) {
            let (j, d) = nearest(p, centers);
            changed |= *a != j;
            *a = j;
            obj += d;
        }
        (changed, obj)
    };
    let (_, obj) = assign(&centers, &mut assignment);
    objective.push(obj);

    for _ in 0..MAX_ITERATIONS {
        // update step
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centers[assignment[i]])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                centers[j] = points[far].to_vec();
                assignment[far] = j;
            }
        }
        let (changed, obj) = assign(&centers, &mut assignment);
        objective.push(obj);
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        centers,
        assignment,
        objective,
    })
}
