//! Exact (quadratic) t-SNE. Per-point bandwidths are found by bisection so
//! every conditional distribution hits the target perplexity; the joint P is
//! symmetrized; the 2-D layout descends the KL divergence under a Student-t
//! kernel with early exaggeration and a momentum schedule.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum bisection steps when calibrating a point's bandwidth.
const MAX_BISECTIONS: usize = 64;
/// Realized conditional perplexity must land this close to the target.
const PERPLEXITY_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    /// Iterations that run with exaggerated P.
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub momentum_start: f64,
    pub momentum_final: f64,
    /// Iteration at which momentum switches to its final value.
    pub momentum_switch_iter: usize,
    pub seed: u64,
    /// Points sampled per side when the analysis pipeline drives this.
    pub sample_per_side: usize,
    /// KL divergence is recorded every this many iterations.
    pub kl_record_every: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            momentum_start: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            seed: 0,
            sample_per_side: 400,
            kl_record_every: 25,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if n_points < 4 {
            return Err(Error::Config(format!(
                "t-SNE needs at least 4 points, got {n_points}"
            )));
        }
        if !(self.perplexity > 1.0) || self.perplexity >= n_points as f64 {
            return Err(Error::Config(format!(
                "perplexity {} infeasible for {n_points} points (need 1 < perplexity < n)",
                self.perplexity
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// [n, 2] final layout.
    pub coords: Tensor,
    /// (iteration, KL) samples; always contains iteration 0 and the last one.
    pub kl_trace: Vec<(usize, f64)>,
    pub kl_initial: f64,
    pub kl_final: f64,
    /// Realized conditional perplexity per point after calibration.
    pub realized_perplexity: Vec<f64>,
}

/// Squared Euclidean distances between all point pairs, row-major [n, n].
pub fn pairwise_squared_distances(points: &Tensor) -> Vec<f64> {
    let n = points.rows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (points.row(i), points.row(j));
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                let diff = x - y;
                acc += diff * diff;
            }
            out[i * n + j] = acc;
            out[j * n + i] = acc;
        }
    }
    out
}

/// Conditional distributions P(j|i): for each point, bisects the Gaussian
/// precision until the realized perplexity matches the target. Returns the
/// row-normalized conditionals and the realized perplexity per point.
pub fn conditional_probabilities(
    distances: &[f64],
    n: usize,
    perplexity: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p = vec![0.0; n * n];
    let mut realized = vec![0.0; n];
    for i in 0..n {
        let row = &distances[i * n..(i + 1) * n];
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        let mut converged = false;
        for _ in 0..MAX_BISECTIONS {
            let perp = fill_conditional_row(row, i, beta, &mut p[i * n..(i + 1) * n])?;
            realized[i] = perp;
            let diff = perp - perplexity;
            if diff.abs() < PERPLEXITY_TOL {
                converged = true;
                break;
            }
            if diff > 0.0 {
                // Distribution too flat: sharpen.
                beta_min = beta;
                beta = if beta_max.is_infinite() {
                    beta * 2.0
                } else {
                    (beta + beta_max) / 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_infinite() {
                    beta / 2.0
                } else {
                    (beta + beta_min) / 2.0
                };
            }
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "perplexity calibration for point {i} did not converge \
                 (reached {} vs target {perplexity})",
                realized[i]
            )));
        }
    }
    Ok((p, realized))
}

/// Fills one conditional row for a given precision; returns its perplexity.
fn fill_conditional_row(
    dist_row: &[f64],
    i: usize,
    beta: f64,
    out: &mut [f64],
) -> Result<f64> {
    let mut sum = 0.0;
    for (j, (&d2, slot)) in dist_row.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *slot = 0.0;
            continue;
        }
        *slot = (-beta * d2).exp();
        sum += *slot;
    }
    if sum <= 0.0 || !sum.is_finite() {
        return Err(Error::Numeric(format!(
            "degenerate input: conditional distribution of point {i} collapsed (sum {sum})"
        )));
    }
    let mut entropy = 0.0;
    for slot in out.iter_mut() {
        *slot /= sum;
        if *slot > 0.0 {
            entropy -= *slot * slot.ln();
        }
    }
    Ok(entropy.exp())
}

/// Symmetrized joint distribution: (P(j|i) + P(i|j)) / 2n.
pub fn symmetrize(p_conditional: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    let norm = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (p_conditional[i * n + j] + p_conditional[j * n + i]) / norm;
        }
    }
    p
}

/// Exact t-SNE of `embeddings` [n, d] into 2 dimensions.
pub fn tsne(embeddings: &Tensor, config: &TsneConfig) -> Result<TsneResult> {
    let n = embeddings.rows();
    config.validate(n)?;

    let distances = pairwise_squared_distances(embeddings);
    if distances.iter().all(|&d| d == 0.0) {
        return Err(Error::Numeric(
            "degenerate input: all pairwise distances are zero".to_string(),
        ));
    }
    let (p_cond, realized_perplexity) =
        conditional_probabilities(&distances, n, config.perplexity)?;
    let p = symmetrize(&p_cond, n);

    // Layout init: small Gaussian noise, deterministic per seed.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut y: Vec<f64> = (0..n * 2)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * 1e-4
        })
        .collect();
    let mut velocity = vec![0.0; n * 2];
    let mut gains = vec![1.0; n * 2];
    let mut grad = vec![0.0; n * 2];
    let mut q_weights = vec![0.0; n * n];

    let mut kl_trace = Vec::new();
    let kl_initial = kl_divergence(&p, &mut q_weights, &y, n);
    kl_trace.push((0, kl_initial));

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iters {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch_iter {
            config.momentum_start
        } else {
            config.momentum_final
        };

        // Student-t weights w_ij = 1 / (1 + ||y_i - y_j||^2) and their sum.
        let mut w_sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i * 2] - y[j * 2];
                let dy = y[i * 2 + 1] - y[j * 2 + 1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q_weights[i * n + j] = w;
                q_weights[j * n + i] = w;
                w_sum += 2.0 * w;
            }
        }

        grad.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q_weights[i * n + j];
                let q = w / w_sum;
                let coeff = 4.0 * (exaggeration * p[i * n + j] - q) * w;
                let dx = y[i * 2] - y[j * 2];
                let dy = y[i * 2 + 1] - y[j * 2 + 1];
                grad[i * 2] += coeff * dx;
                grad[i * 2 + 1] += coeff * dy;
            }
        }

        // Per-parameter gain adaptation from the reference implementation:
        // grow the gain while the gradient keeps pushing against the
        // velocity, shrink it when they agree.
        for ((gain, v), g) in gains.iter_mut().zip(velocity.iter()).zip(grad.iter()) {
            if (*g > 0.0) != (*v > 0.0) {
                *gain += 0.2;
            } else {
                *gain *= 0.8;
            }
            if *gain < 0.01 {
                *gain = 0.01;
            }
        }
        for ((v, g), gain) in velocity.iter_mut().zip(grad.iter()).zip(gains.iter()) {
            *v = momentum * *v - config.learning_rate * gain * g;
        }
        for (p_y, v) in y.iter_mut().zip(velocity.iter()) {
            *p_y += v;
        }
        // Keep the layout centered; KL is translation invariant.
        for dim in 0..2 {
            let mean: f64 = y.iter().skip(dim).step_by(2).sum::<f64>() / n as f64;
            for v in y.iter_mut().skip(dim).step_by(2) {
                *v -= mean;
            }
        }

        let last = iter + 1 == config.iterations;
        if last || (iter + 1) % config.kl_record_every.max(1) == 0 {
            kl_trace.push((iter + 1, kl_divergence(&p, &mut q_weights, &y, n)));
        }
    }

    let kl_final = kl_trace.last().expect("trace non-empty").1;
    Ok(TsneResult {
        coords: Tensor::new(vec![n, 2], y)?,
        kl_trace,
        kl_initial,
        kl_final,
        realized_perplexity,
    })
}

/// KL(P || Q) against the unexaggerated P; `q_weights` is scratch space.
fn kl_divergence(p: &[f64], q_weights: &mut [f64], y: &[f64], n: usize) -> f64 {
    let mut w_sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i * 2] - y[j * 2];
            let dy = y[i * 2 + 1] - y[j * 2 + 1];
            let w = 1.0 / (1.0 + dx * dx + dy * dy);
            q_weights[i * n + j] = w;
            q_weights[j * n + i] = w;
            w_sum += 2.0 * w;
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j];
            if pij <= 0.0 {
                continue;
            }
            let qij = q_weights[i * n + j] / w_sum;
            kl += pij * (pij / qij).ln();
        }
    }
    kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_blobs(per_side: usize, dim: usize, separation: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(2 * per_side * dim);
        for side in 0..2 {
            let center = if side == 0 { 0.0 } else { separation };
            for _ in 0..per_side {
                for _ in 0..dim {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(center + z);
                }
            }
        }
        Tensor::new(vec![2 * per_side, dim], data).unwrap()
    }

    #[test]
    fn identical_points_are_a_degenerate_input_error() {
        let points = Tensor::new(vec![6, 3], vec![0.5; 18]).unwrap();
        let err = tsne(&points, &TsneConfig {
            perplexity: 2.0,
            iterations: 10,
            ..TsneConfig::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("degenerate"), "{err}");
    }

    #[test]
    fn infeasible_perplexity_is_a_config_error() {
        let points = gaussian_blobs(5, 3, 4.0, 0);
        let cfg = TsneConfig {
            perplexity: 10.0, // n = 10 points, need perplexity < n
            ..TsneConfig::default()
        };
        assert!(matches!(tsne(&points, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn conditional_rows_are_normalized_and_calibrated() {
        let points = gaussian_blobs(15, 4, 3.0, 2);
        let n = points.rows();
        let dists = pairwise_squared_distances(&points);
        let target = 8.0;
        let (p_cond, realized) = conditional_probabilities(&dists, n, target).unwrap();
        for i in 0..n {
            let sum: f64 = p_cond[i * n..(i + 1) * n].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
            assert!(
                (realized[i] - target).abs() < 1e-3,
                "point {i} realized perplexity {}",
                realized[i]
            );
        }
    }

    #[test]
    fn symmetrized_p_is_symmetric_and_sums_to_one() {
        let points = gaussian_blobs(12, 5, 2.0, 6);
        let n = points.rows();
        let dists = pairwise_squared_distances(&points);
        let (p_cond, _) = conditional_probabilities(&dists, n, 7.0).unwrap();
        let p = symmetrize(&p_cond, n);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(
                    p[i * n + j].to_bits(),
                    p[j * n + i].to_bits(),
                    "P not exactly symmetric at ({i},{j})"
                );
            }
        }
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "P sums to {total}");
    }

    #[test]
    fn kl_decreases_from_start_to_finish() {
        let points = gaussian_blobs(12, 6, 5.0, 8);
        let result = tsne(&points, &TsneConfig {
            perplexity: 6.0,
            iterations: 300,
            exaggeration_iters: 80,
            momentum_switch_iter: 80,
            seed: 1,
            ..TsneConfig::default()
        })
        .unwrap();
        assert!(
            result.kl_final < result.kl_initial,
            "KL went from {} to {}",
            result.kl_initial,
            result.kl_final
        );
        assert_eq!(result.kl_trace.first().unwrap().0, 0);
        assert_eq!(result.kl_trace.last().unwrap().0, 300);
    }

    #[test]
    fn well_separated_blobs_stay_separated_in_2d() {
        // 20 + 20 points, 8-dim, centers 10 sigma apart.
        let points = gaussian_blobs(20, 8, 10.0, 3);
        let result = tsne(&points, &TsneConfig {
            perplexity: 10.0,
            iterations: 400,
            exaggeration_iters: 100,
            momentum_switch_iter: 100,
            seed: 4,
            ..TsneConfig::default()
        })
        .unwrap();
        let clustering = crate::analysis::kmeans(&result.coords, 2, 20, 0).unwrap();
        let agreement = crate::analysis::agreement_with_split(&clustering.labels, 20);
        assert_eq!(agreement, 1.0, "blobs not separated in the projection");
    }

    #[test]
    fn tsne_is_deterministic_per_seed() {
        let points = gaussian_blobs(10, 4, 3.0, 5);
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 50,
            seed: 11,
            ..TsneConfig::default()
        };
        let a = tsne(&points, &cfg).unwrap();
        let b = tsne(&points, &cfg).unwrap();
        assert!(a.coords.bitwise_eq(&b.coords));
        assert_eq!(a.kl_final.to_bits(), b.kl_final.to_bits());
    }

    use rand_distr::StandardNormal;
}
