//! Exact t-SNE for embedding dumps. O(n^2) throughout, which is the right
//! trade at a few thousand rows and keeps the math auditable: Gaussian
//! neighbor probabilities with per-point bandwidths found by binary
//! search, Student-t low-dimensional affinities, and plain momentum
//! gradient descent with the reference early-exaggeration schedule.

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::{domain, RunRng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iters: usize,
    pub learning_rate: f64,
    /// P is multiplied by this for the first `exaggeration_iters` steps.
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Momentum is 0.5 before this iteration, 0.8 after.
    pub momentum_switch: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iters: 1000,
            // At a few hundred points and below, 200 leaves the descent
            // oscillating after exaggeration ends; 50 settles to a fixed
            // point well before the schedule runs out.
            learning_rate: 50.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_switch: 250,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// [n x 2] final coordinates.
    pub coords: Tensor,
    /// KL(P || Q) after every iteration, against the unexaggerated P.
    pub kl_history: Vec<f64>,
    /// Realized perplexity of each point's conditional distribution.
    pub perplexities: Vec<f64>,
}

const P_FLOOR: f64 = 1e-12;

/// Conditional distribution row p(.|i) for one bandwidth, returning the
/// Shannon entropy (nats). `dists` is the squared-distance row; entry i is
/// skipped.
fn row_probs(dists: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    // Shift by the row minimum so exp never underflows for the nearest
    // neighbor even at large beta.
    let min = dists
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, &d) in dists.iter().enumerate() {
        if j == i {
            out[j] = 0.0;
            continue;
        }
        let p = (-beta * (d - min)).exp();
        out[j] = p;
        sum += p;
    }
    let mut entropy = 0.0;
    for (j, p) in out.iter_mut().enumerate() {
        if j == i {
            continue;
        }
        *p /= sum;
        if *p > 0.0 {
            entropy -= *p * p.ln();
        }
    }
    entropy
}

/// Binary search for the bandwidth whose conditional distribution hits the
/// target perplexity, to 1e-5 in log-perplexity.
fn search_beta(dists: &[f64], i: usize, target_entropy: f64, out: &mut [f64]) -> Result<f64> {
    let mut beta = 1.0;
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for _ in 0..200 {
        let entropy = row_probs(dists, i, beta, out);
        let diff = entropy - target_entropy;
        if diff.abs() < 1e-5 {
            return Ok(beta);
        }
        if diff > 0.0 {
            // Distribution too spread out: sharpen.
            lo = beta;
            beta = if hi.is_finite() { (lo + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (lo + hi) / 2.0;
        }
    }
    Err(Error::Contract(format!(
        "bandwidth search for point {i} did not converge; the row may be degenerate"
    )))
}

/// Symmetrized joint probabilities P and the realized per-point
/// perplexities. P is row-major [n x n] with a 1e-12 floor off-diagonal.
fn joint_probabilities(x: &Tensor, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let sq = kernels::pairwise_sq_dists(x.data(), n, d);
    let target_entropy = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    let mut perplexities = Vec::with_capacity(n);
    let mut row = vec![0.0; n];
    for i in 0..n {
        search_beta(&sq[i * n..(i + 1) * n], i, target_entropy, &mut row)?;
        let entropy: f64 = row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        perplexities.push(entropy.exp());
        cond[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(P_FLOOR);
        }
    }
    Ok((p, perplexities))
}

/// Exact t-SNE to 2-D.
pub fn tsne_embed(x: &Tensor, cfg: &TsneConfig, seed: u64) -> Result<TsneResult> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("expected [n x h] input, got {shape:?}")));
    }
    let (n, h) = (shape[0], shape[1]);
    if h < 2 {
        return Err(Error::Config(format!("embedding width must be >= 2, got {h}")));
    }
    if cfg.perplexity <= 1.0 {
        return Err(Error::Config(format!(
            "perplexity must be > 1, got {}",
            cfg.perplexity
        )));
    }
    if (n as f64) < 3.0 * cfg.perplexity {
        return Err(Error::Config(format!(
            "{n} points cannot support perplexity {}; need n >= 3 * perplexity",
            cfg.perplexity
        )));
    }
    if cfg.iters == 0 || cfg.learning_rate <= 0.0 || cfg.early_exaggeration < 1.0 {
        return Err(Error::Config("bad t-SNE schedule".into()));
    }

    let (p, perplexities) = joint_probabilities(x, cfg.perplexity)?;

    let mut rng = RunRng::new(seed).stream(domain::TSNE, n as u64, 0);
    let mut y = Tensor::randn(vec![n, 2], 1e-4, &mut rng).into_data();
    let mut velocity: Vec<f64> = vec![0.0; n * 2];
    let mut gains: Vec<f64> = vec![1.0; n * 2];
    let mut grad = vec![0.0; n * 2];
    let mut kl_history = Vec::with_capacity(cfg.iters);

    for iter in 0..cfg.iters {
        let exaggeration = if iter < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < cfg.momentum_switch { 0.5 } else { 0.8 };

        // Student-t numerators and their total.
        let sq = kernels::pairwise_sq_dists(&y, n, 2);
        let mut q_sum = 0.0;
        let mut num = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let v = 1.0 / (1.0 + sq[i * n + j]);
                    num[i * n + j] = v;
                    q_sum += v;
                }
            }
        }

        // dKL/dy_i = 4 sum_j (p_ij - q_ij) num_ij (y_i - y_j).
        grad.fill(0.0);
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / q_sum).max(P_FLOOR);
                let coef = 4.0 * (exaggeration * pij - qij) * num[i * n + j];
                grad[i * 2] += coef * (y[i * 2] - y[j * 2]);
                grad[i * 2 + 1] += coef * (y[i * 2 + 1] - y[j * 2 + 1]);
                if j > i {
                    // KL against the true P, counted once per pair (P and
                    // Q are both symmetric).
                    kl += 2.0 * pij * (pij / qij).ln();
                }
            }
        }
        kl_history.push(kl);

        // Adaptive per-coordinate gains, then momentum step.
        for k in 0..n * 2 {
            let same_sign = grad[k].signum() == velocity[k].signum();
            gains[k] = if same_sign {
                (gains[k] * 0.8).max(0.01)
            } else {
                gains[k] + 0.2
            };
            velocity[k] = momentum * velocity[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        // Recenter so the embedding does not drift.
        for dim in 0..2 {
            let mean = (0..n).map(|i| y[i * 2 + dim]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[i * 2 + dim] -= mean;
            }
        }
    }

    Ok(TsneResult {
        coords: Tensor::new(vec![n, 2], y)?,
        kl_history,
        perplexities,
    })
}

/// Best accuracy of any axis-angle linear split of the 2-D points, found
/// by brute force over 360 directions and all thresholds. The oracle for
/// the "blobs stay separable" checks.
pub fn best_linear_split(coords: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = coords.shape()[0];
    if labels.len() != n || n == 0 {
        return Err(Error::Contract(format!(
            "{} labels for {n} points",
            labels.len()
        )));
    }
    let data = coords.data();
    let mut best = 0.0f64;
    for step in 0..360 {
        let theta = step as f64 * std::f64::consts::PI / 360.0;
        let (c, s) = (theta.cos(), theta.sin());
        let mut projected: Vec<(f64, usize)> = (0..n)
            .map(|i| (c * data[i * 2] + s * data[i * 2 + 1], labels[i]))
            .collect();
        projected.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Sweep the threshold between consecutive points; count class-1
        // on the left to score both orientations in one pass.
        let total_one = labels.iter().filter(|&&l| l == 1).count();
        let mut ones_left = 0usize;
        for (idx, &(_, label)) in projected.iter().enumerate() {
            if label == 1 {
                ones_left += 1;
            }
            let left = idx + 1;
            let zeros_left = left - ones_left;
            let ones_right = total_one - ones_left;
            let zeros_right = (n - left) - ones_right;
            let acc_a = (zeros_left + ones_right) as f64 / n as f64;
            let acc_b = (ones_left + zeros_right) as f64 / n as f64;
            best = best.max(acc_a).max(acc_b);
        }
    }
    Ok(best)
}
