//! Exact (quadratic) t-SNE for projecting pooled features to 2-D.
//!
//! Input affinities are Gaussians with a per-point bandwidth found by binary
//! search so every point's conditional distribution hits the requested
//! perplexity; output affinities are Student-t with one degree of freedom.
//! Plain gradient descent with momentum, per-coordinate gains and an early
//! exaggeration phase — the original recipe, sized for a few thousand points.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::EvalError;
use crate::rng::mix2;

#[derive(Debug, Clone)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iters: usize,
    pub seed: u64,
    /// ≤ 0 selects n / early_exaggeration (floored at 10), which stays
    /// stable across dataset sizes.
    pub learning_rate: f64,
    /// P is multiplied by this during the first `exaggeration_iters` steps.
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions {
            perplexity: 30.0,
            iters: 500,
            seed: 0,
            learning_rate: 0.0,
            early_exaggeration: 4.0,
            exaggeration_iters: 100,
        }
    }
}

/// Project `n` rows of `dim`-dimensional data (row-major) to 2-D.
pub fn tsne_2d(data: &[f64], n: usize, dim: usize, opts: &TsneOptions) -> Result<Vec<[f64; 2]>, EvalError> {
    assert_eq!(data.len(), n * dim, "data length must be n*dim");
    let needed = (3.0 * opts.perplexity).ceil() as usize;
    if n < needed {
        return Err(EvalError::TooFewPoints {
            n,
            needed,
            perplexity: opts.perplexity,
        });
    }

    // Pairwise squared distances.
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = data[i * dim..(i + 1) * dim]
                .iter()
                .zip(&data[j * dim..(j + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }

    let (cond, _betas) = conditional_probs(&d2, n, opts.perplexity);

    // Symmetrize and normalize: p_ij = (p_{j|i} + p_{i|j}) / 2n, floored.
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }

    // Seeded small-variance init.
    let mut rng = ChaCha12Rng::seed_from_u64(mix2(opts.seed, 0x7453_4e45));
    let normal = Normal::new(0.0f64, 1e-4).unwrap();
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut vel = vec![[0.0f64; 2]; n];
    let mut gain = vec![[1.0f64; 2]; n];
    let lr = if opts.learning_rate > 0.0 {
        opts.learning_rate
    } else {
        (n as f64 / opts.early_exaggeration).max(10.0)
    };

    let mut num = vec![0.0f64; n * n]; // Student-t numerators
    for it in 0..opts.iters {
        let exaggeration = if it < opts.exaggeration_iters {
            opts.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < opts.iters / 2 { 0.5 } else { 0.8 };

        let mut z = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }

        for i in 0..n {
            let mut g = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let qn = num[i * n + j];
                let qij = (qn / z).max(1e-12);
                let coef = 4.0 * (exaggeration * p[i * n + j] - qij) * qn;
                g[0] += coef * (y[i][0] - y[j][0]);
                g[1] += coef * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                // Gains grow while the step keeps moving against the
                // gradient (vel ≈ -lr·g), shrink when the direction flips.
                gain[i][c] = if g[c].signum() != vel[i][c].signum() {
                    (gain[i][c] + 0.2).max(0.01)
                } else {
                    (gain[i][c] * 0.8).max(0.01)
                };
                vel[i][c] = momentum * vel[i][c] - lr * gain[i][c] * g[c];
                y[i][c] += vel[i][c];
            }
        }

        // Re-center so the embedding does not drift.
        let mut mean = [0.0f64; 2];
        for yi in &y {
            mean[0] += yi[0];
            mean[1] += yi[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for yi in y.iter_mut() {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
    }
    Ok(y)
}

/// Per-point binary search for the Gaussian bandwidth that makes the
/// conditional distribution's entropy equal log(perplexity) within 1e-4.
/// Returns the row-normalized conditionals and the precisions (beta = 1/2σ²).
fn conditional_probs(d2: &[f64], n: usize, perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    let target = perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    let mut betas = vec![1.0f64; n];
    for i in 0..n {
        let mut beta = 1.0f64;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        for _ in 0..64 {
            // H and the normalizer for the current beta. Shift by the row
            // minimum distance so exp never underflows to an all-zero row.
            let row = &d2[i * n..(i + 1) * n];
            let dmin = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &d)| d)
                .fold(f64::INFINITY, f64::min);
            let mut sum = 0.0f64;
            let mut dot = 0.0f64; // Σ d·exp(-beta·d)
            for (j, &d) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                let e = (-beta * (d - dmin)).exp();
                sum += e;
                dot += d * e;
            }
            let h = sum.ln() + beta * (dot / sum - dmin);
            let diff = h - target;
            if diff.abs() < 1e-4 {
                break;
            }
            if diff > 0.0 {
                // Entropy too high → sharpen.
                beta_min = beta;
                beta = if beta_max.is_finite() {
                    (beta + beta_max) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_finite() {
                    (beta + beta_min) / 2.0
                } else {
                    beta / 2.0
                };
            }
        }
        betas[i] = beta;
        let row = &d2[i * n..(i + 1) * n];
        let dmin = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &d)| d)
            .fold(f64::INFINITY, f64::min);
        let mut sum = 0.0f64;
        for (j, &d) in row.iter().enumerate() {
            if j != i {
                let e = (-beta * (d - dmin)).exp();
                p[i * n + j] = e;
                sum += e;
            }
        }
        for j in 0..n {
            if j != i {
                p[i * n + j] /= sum;
            }
        }
    }
    (p, betas)
}
