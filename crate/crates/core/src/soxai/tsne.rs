//! Exact t-SNE with O(n²) affinities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities and the initial momentum.
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl TsneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity.is_finite() && self.perplexity > 0.0) {
            return Err(Error::param(format!("perplexity must be positive, got {}", self.perplexity)));
        }
        if self.iterations < self.exaggeration_iterations || self.exaggeration_iterations < 250 {
            return Err(Error::param(format!(
                "iterations must be at least 250 and cover the exaggeration phase, got {} / {}",
                self.iterations, self.exaggeration_iterations
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.early_exaggeration >= 1.0) {
            return Err(Error::param("learning rate must be positive and exaggeration at least 1"));
        }
        Ok(())
    }

    /// Perplexity actually used for `n` points: clamped just below `(n − 1) / 3`.
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        self.perplexity.min((n as f64 - 1.0) / 3.0 * 0.999)
    }
}

/// Symmetric joint affinities, dense row-major `n × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    pub n: usize,
    pub p: Vec<f64>,
    /// Gaussian precision `1 / (2σ_i²)` found for each row.
    pub betas: Vec<f64>,
    /// Perplexity of each conditional row distribution at its final precision.
    pub row_perplexities: Vec<f64>,
}

impl Affinities {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P‖Q) against the unexaggerated P, before each iteration and once after the last.
    pub kl_history: Vec<f64>,
    pub perplexity: f64,
    pub affinities: Affinities,
}

pub fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect()
        })
        .collect();
    rows.concat()
}

const BETA_SEARCH_STEPS: usize = 50;
const ENTROPY_TOL: f64 = 1e-5;

/// Conditional row `p_{j|i}` at precision `beta`, with its entropy in nats.
fn conditional_row(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    // shift by the nearest distance so at least one term is exp(0)
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, &dj) in d.iter().enumerate() {
        out[j] = if j == i { 0.0 } else { (-beta * (dj - dmin)).exp() };
        sum += out[j];
    }
    let mut h = 0.0;
    for v in out.iter_mut() {
        *v /= sum;
        if *v > 0.0 {
            h -= *v * v.ln();
        }
    }
    h
}

/// Per-row bisection on `ln β` so each conditional distribution has the
/// requested perplexity, then `P = (P_cond + P_condᵀ) / 2n`.
pub fn joint_probabilities(dist2: &[f64], n: usize, perplexity: f64) -> Affinities {
    let target = perplexity.ln();
    let rows: Vec<(Vec<f64>, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = &dist2[i * n..(i + 1) * n];
            let mut row = vec![0.0; n];
            let (mut lo, mut hi) = (-100.0f64, 100.0f64);
            let mut log_beta = 0.0f64;
            let mut h = conditional_row(d, i, log_beta.exp(), &mut row);
            for _ in 0..BETA_SEARCH_STEPS {
                if (h - target).abs() <= ENTROPY_TOL {
                    break;
                }
                // entropy falls as β grows
                if h > target {
                    lo = log_beta;
                } else {
                    hi = log_beta;
                }
                log_beta = 0.5 * (lo + hi);
                h = conditional_row(d, i, log_beta.exp(), &mut row);
            }
            (row, log_beta.exp(), h.exp())
        })
        .collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (rows[i].0[j] + rows[j].0[i]) / (2.0 * n as f64);
        }
    }
    Affinities {
        n,
        p,
        betas: rows.iter().map(|r| r.1).collect(),
        row_perplexities: rows.iter().map(|r| r.2).collect(),
    }
}

/// Student-t kernel `1 / (1 + |y_i − y_j|²)`, zero on the diagonal, and its total.
fn student_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
                        1.0 / (1.0 + dx * dx + dy * dy)
                    }
                })
                .collect()
        })
        .collect();
    let z = rows.iter().map(|r| r.iter().sum::<f64>()).sum();
    (rows.concat(), z)
}

fn kl_from_kernel(p: &Affinities, num: &[f64], z: f64) -> f64 {
    let mut kl = 0.0;
    for (k, &pij) in p.p.iter().enumerate() {
        if pij > 0.0 {
            let q = (num[k] / z).max(f64::MIN_POSITIVE);
            kl += pij * (pij / q).ln();
        }
    }
    kl
}

fn gradient_from_kernel(p: &Affinities, y: &[[f64; 2]], num: &[f64], z: f64, exaggeration: f64) -> Vec<[f64; 2]> {
    let n = y.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                let k = i * n + j;
                let w = (exaggeration * p.p[k] - num[k] / z) * num[k];
                g[0] += w * (y[i][0] - y[j][0]);
                g[1] += w * (y[i][1] - y[j][1]);
            }
            [4.0 * g[0], 4.0 * g[1]]
        })
        .collect()
}

/// KL(P‖Q) for the layout `y`.
pub fn kl_divergence(p: &Affinities, y: &[[f64; 2]]) -> f64 {
    let (num, z) = student_kernel(y);
    kl_from_kernel(p, &num, z)
}

/// Analytic gradient `∂KL/∂y_i = 4 Σ_j (p_ij − q_ij)(1 + |y_i − y_j|²)⁻¹ (y_i − y_j)`.
pub fn kl_gradient(p: &Affinities, y: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let (num, z) = student_kernel(y);
    gradient_from_kernel(p, y, &num, z, 1.0)
}

fn validate_input(x: &[Vec<f64>]) -> Result<()> {
    let n = x.len();
    if n < 8 {
        return Err(Error::param(format!("t-SNE needs at least 8 points, got {n}")));
    }
    let dim = x[0].len();
    if dim == 0 {
        return Err(Error::param("vectors must have at least one component"));
    }
    for (i, v) in x.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::invalid(format!("row {i} has {} components, expected {dim}", v.len())));
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("row {i} has a non-finite component")));
        }
    }
    let mut sorted: Vec<&Vec<f64>> = x.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let longest = sorted
        .chunk_by(|a, b| a == b)
        .map(<[_]>::len)
        .max()
        .unwrap_or(0);
    if longest > n - 3 {
        return Err(Error::param(format!(
            "{longest} identical rows among {n}; at most {} allowed",
            n - 3
        )));
    }
    Ok(())
}

const MAX_HALVINGS: usize = 30;

/// `y + step`, shifted back to zero mean.
fn centred(y: &[[f64; 2]], step: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = y.len() as f64;
    let moved: Vec<[f64; 2]> = y.iter().zip(step).map(|(p, s)| [p[0] + s[0], p[1] + s[1]]).collect();
    let mean = moved.iter().fold([0.0; 2], |m, p| [m[0] + p[0] / n, m[1] + p[1] / n]);
    moved.into_iter().map(|p| [p[0] - mean[0], p[1] - mean[1]]).collect()
}

pub fn tsne(x: &[Vec<f64>], params: &TsneParams) -> Result<TsneResult> {
    params.validate()?;
    validate_input(x)?;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // jitter separates exact duplicates
    let jittered: Vec<Vec<f64>> = x
        .iter()
        .map(|v| v.iter().map(|c| c + rng.random_range(-1e-9..1e-9)).collect())
        .collect();
    let perplexity = params.effective_perplexity(n);
    let affinities = joint_probabilities(&squared_distances(&jittered), n, perplexity);

    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_history = Vec::with_capacity(params.iterations + 1);

    let mut kernel = student_kernel(&y);
    for t in 0..params.iterations {
        let early = t < params.exaggeration_iterations;
        let exaggeration = if early { params.early_exaggeration } else { 1.0 };
        let momentum = if early { params.initial_momentum } else { params.final_momentum };
        let kl = kl_from_kernel(&affinities, &kernel.0, kernel.1);
        kl_history.push(kl);
        let grad = gradient_from_kernel(&affinities, &y, &kernel.0, kernel.1, exaggeration);
        let mut step = vec![[0.0f64; 2]; n];
        for i in 0..n {
            for d in 0..2 {
                let g = &mut gains[i][d];
                *g = if (grad[i][d] > 0.0) != (update[i][d] > 0.0) { *g + 0.2 } else { (*g * 0.8).max(0.01) };
                step[i][d] = momentum * update[i][d] - params.learning_rate * *g * grad[i][d];
            }
        }
        if early {
            y = centred(&y, &step);
            kernel = student_kernel(&y);
            update = step;
            continue;
        }
        // Past the exaggeration phase the gains and momentum can overshoot and
        // make KL climb for a while; backtrack until the step does not raise it.
        let mut accepted = false;
        for halvings in 0..=MAX_HALVINGS {
            let cand = centred(&y, &step);
            let k = student_kernel(&cand);
            if kl_from_kernel(&affinities, &k.0, k.1) <= kl {
                if halvings > 0 {
                    gains = vec![[1.0; 2]; n];
                }
                y = cand;
                kernel = k;
                accepted = true;
                break;
            }
            step.iter_mut().flatten().for_each(|s| *s *= 0.5);
        }
        update = if accepted { step } else { vec![[0.0; 2]; n] };
        if !accepted {
            gains = vec![[1.0; 2]; n];
        }
    }
    kl_history.push(kl_from_kernel(&affinities, &kernel.0, kernel.1));
    if y.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::invalid("t-SNE diverged to non-finite coordinates"));
    }
    Ok(TsneResult {
        coords: y,
        kl_history,
        perplexity,
        affinities,
    })
}
