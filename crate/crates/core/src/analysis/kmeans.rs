//! Lloyd's k-means with seeded restarts. Restart initializations draw k
//! distinct points; the run with the lowest inertia wins. Deterministic for
//! a fixed seed and restart count.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ITERS: usize = 200;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    /// [k, d] final centroids.
    pub centroids: Tensor,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
}

pub fn kmeans(points: &Tensor, k: usize, restarts: usize, seed: u64) -> Result<KmeansResult> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument {
            op: "kmeans",
            message: format!("k = {k} out of range 1..={n}"),
        });
    }
    if restarts == 0 {
        return Err(Error::InvalidArgument {
            op: "kmeans",
            message: "restarts must be >= 1".to_string(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KmeansResult> = None;
    for _ in 0..restarts {
        let init = sample(&mut rng, n, k).into_vec();
        let result = lloyd(points, k, &init)?;
        if best.as_ref().map_or(true, |b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn lloyd(points: &Tensor, k: usize, init_points: &[usize]) -> Result<KmeansResult> {
    let (n, d) = (points.rows(), points.cols());
    let mut centroids: Vec<f64> = Vec::with_capacity(k * d);
    for &p in init_points {
        centroids.extend_from_slice(points.row(p));
    }
    let mut labels = vec![0usize; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for i in 0..n {
            let row = points.row(i);
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let cent = &centroids[c * d..(c + 1) * d];
                let mut acc = 0.0;
                for (x, y) in row.iter().zip(cent.iter()) {
                    let diff = x - y;
                    acc += diff * diff;
                }
                if acc < best_d {
                    best_d = acc;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0; k * d];
        for i in 0..n {
            counts[labels[i]] += 1;
            let row = points.row(i);
            let dst = &mut sums[labels[i] * d..(labels[i] + 1) * d];
            for (s, &v) in dst.iter_mut().zip(row.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Empty cluster: reseat it on the point farthest from its centroid.
                let far = farthest_point(points, &centroids, &labels, d);
                centroids[c * d..(c + 1) * d].copy_from_slice(points.row(far));
                changed = true;
                continue;
            }
            for j in 0..d {
                centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let mut inertia = 0.0;
    for i in 0..n {
        let row = points.row(i);
        let cent = &centroids[labels[i] * d..(labels[i] + 1) * d];
        for (x, y) in row.iter().zip(cent.iter()) {
            let diff = x - y;
            inertia += diff * diff;
        }
    }
    Ok(KmeansResult {
        labels,
        centroids: Tensor::new(vec![k, d], centroids)?,
        inertia,
    })
}

fn farthest_point(points: &Tensor, centroids: &[f64], labels: &[usize], d: usize) -> usize {
    let mut far = 0;
    let mut far_d = -1.0;
    for i in 0..points.rows() {
        let row = points.row(i);
        let cent = &centroids[labels[i] * d..(labels[i] + 1) * d];
        let mut acc = 0.0;
        for (x, y) in row.iter().zip(cent.iter()) {
            let diff = x - y;
            acc += diff * diff;
        }
        if acc > far_d {
            far_d = acc;
            far = i;
        }
    }
    far
}

/// Agreement between binary cluster labels and ground-truth side labels
/// (first `split` points are one side). Maximized over the label swap, so
/// the result is always in [0.5, 1.0].
pub fn agreement_with_split(labels: &[usize], split: usize) -> f64 {
    let n = labels.len();
    let matches = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| (*i < split) == (l == 0))
        .count();
    let frac = matches as f64 / n as f64;
    frac.max(1.0 - frac)
}
