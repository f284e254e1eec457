//! Brute-force reference implementations shared by the integration tests
//! and the acceptance harness. Everything here is written as plain nested
//! loops over the definitions, independent of the library kernels.

#![allow(dead_code)]

use dfl_core::geom::Rect;
use dfl_core::init::PatchCandidate;
use dfl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct 7-loop cross-correlation with zero padding.
pub fn conv2d(input: &Tensor<f64>, weight: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for a in 0..kh {
                        for b in 0..kw {
                            let y = (i * stride + a) as i64 - pad as i64;
                            let xx = (j * stride + b) as i64 - pad as i64;
                            if y < 0 || xx < 0 || y >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            acc += x[(ic * h + y as usize) * w + xx as usize] * wt[((oc * c + ic) * kh + a) * kw + b];
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = acc;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out).unwrap()
}

/// Max pooling over windows, padding never selected.
pub fn max_pool2d(input: &Tensor<f64>, window: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oh = (h + 2 * pad - window) / stride + 1;
    let ow = (w + 2 * pad - window) / stride + 1;
    let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                for a in 0..window {
                    for b in 0..window {
                        let y = (i * stride + a) as i64 - pad as i64;
                        let x = (j * stride + b) as i64 - pad as i64;
                        if y >= 0 && x >= 0 && y < h as i64 && x < w as i64 {
                            let v = input.data()[(ch * h + y as usize) * w + x as usize];
                            let slot = &mut out[(ch * oh + i) * ow + j];
                            if v > *slot {
                                *slot = v;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

/// Per-channel maximum and the first (row-major) location attaining it.
pub fn global_max_pool(input: &Tensor<f64>) -> (Vec<f64>, Vec<(usize, usize)>) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut vals = Vec::new();
    let mut locs = Vec::new();
    for ch in 0..c {
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for i in 0..h {
            for j in 0..w {
                let v = input.data()[(ch * h + i) * w + j];
                if v > best.0 {
                    best = (v, (i, j));
                }
            }
        }
        vals.push(best.0);
        locs.push(best.1);
    }
    (vals, locs)
}

pub fn global_avg_pool(input: &Tensor<f64>) -> Vec<f64> {
    let (c, hw) = (input.shape()[0], input.shape()[1] * input.shape()[2]);
    (0..c)
        .map(|ch| input.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

pub fn cross_channel_avg_pool(input: &[f64], k: usize) -> Vec<f64> {
    (0..input.len() / k)
        .map(|g| (0..k).map(|i| input[g * k + i]).sum::<f64>() / k as f64)
        .collect()
}

pub fn fully_connected(input: &[f64], weight: &Tensor<f64>, bias: &[f64]) -> Vec<f64> {
    let (o, d) = (weight.shape()[0], weight.shape()[1]);
    (0..o)
        .map(|r| bias[r] + (0..d).map(|c| weight.data()[r * d + c] * input[c]).sum::<f64>())
        .collect()
}

/// NMS written as "repeatedly take the most energetic remaining candidate
/// that no kept box suppresses", scanning the whole list each round.
pub fn nms(candidates: &[PatchCandidate], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut alive = vec![true; candidates.len()];
    let mut kept: Vec<usize> = Vec::new();
    while kept.len() < max_keep {
        let mut best: Option<usize> = None;
        for i in 0..candidates.len() {
            if !alive[i] {
                continue;
            }
            if best.map_or(true, |b| candidates[i].energy > candidates[b].energy) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        if kept
            .iter()
            .all(|&k| candidates[k].bbox.iou(&candidates[b].bbox) <= iou_threshold)
        {
            kept.push(b);
        }
    }
    kept
}

pub fn candidate(id: usize, energy: f64, bbox: Rect) -> PatchCandidate {
    PatchCandidate {
        image_id: 0,
        location: (0, id),
        energy,
        feature: vec![energy],
        bbox,
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum k-means objective over every assignment of points to `k`
/// non-empty clusters (each cluster at its mean).
pub fn kmeans_exhaustive(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    loop {
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            let dim = points[0].len();
            let mut means = vec![vec![0.0; dim]; k];
            for (p, &a) in points.iter().zip(&assign) {
                for d in 0..dim {
                    means[a][d] += p[d] / counts[a] as f64;
                }
            }
            let obj: f64 = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &means[a])).sum();
            best = best.min(obj);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
    }
}

/// Population covariance by direct double sums.
pub fn covariance(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = features.len() as f64;
    let c = features[0].len();
    let mean: Vec<f64> = (0..c).map(|i| features.iter().map(|f| f[i]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            cov[i * c + j] = features.iter().map(|f| (f[i] - mean[i]) * (f[j] - mean[j])).sum::<f64>() / n;
        }
    }
    (mean, cov)
}

/// Inverse of a small dense matrix by Gauss-Jordan elimination with
/// partial pivoting.
pub fn invert(matrix: &[f64], n: usize) -> Vec<f64> {
    let mut a = matrix.to_vec();
    let mut inv: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .unwrap();
        for j in 0..n {
            a.swap(col * n + j, pivot * n + j);
            inv.swap(col * n + j, pivot * n + j);
        }
        let p = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r * n + col];
                for j in 0..n {
                    a[r * n + j] -= f * a[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    inv
}

/// `normalize((cov + ridge I)^-1 (center - mean))` via an explicit inverse.
pub fn whiten(center: &[f64], mean: &[f64], cov: &[f64], ridge: f64) -> Vec<f64> {
    let c = center.len();
    let mut reg = cov.to_vec();
    for i in 0..c {
        reg[i * c + i] += ridge;
    }
    let inv = invert(&reg, c);
    let d: Vec<f64> = center.iter().zip(mean).map(|(x, m)| x - m).collect();
    let v: Vec<f64> = (0..c).map(|i| (0..c).map(|j| inv[i * c + j] * d[j]).sum()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// Bilinear sample of an `[H, W]` grid at pixel centers mapped through
/// `u = (p + 0.5 - offset) / stride`, clamped, computed per pixel.
pub fn bilinear(values: &Tensor<f64>, offset: f64, stride: f64, size: usize) -> Vec<f64> {
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let at = |i: usize, j: usize| values.data()[i * w + j];
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = ((y as f64 + 0.5 - offset) / stride).max(0.0).min((h - 1) as f64);
            let v = ((x as f64 + 0.5 - offset) / stride).max(0.0).min((w - 1) as f64);
            let (i0, j0) = (u.floor() as usize, v.floor() as usize);
            let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
            let (fu, fv) = (u - i0 as f64, v - j0 as f64);
            out.push(
                at(i0, j0) * (1.0 - fu) * (1.0 - fv)
                    + at(i0, j1) * (1.0 - fu) * fv
                    + at(i1, j0) * fu * (1.0 - fv)
                    + at(i1, j1) * fu * fv,
            );
        }
    }
    out
}
