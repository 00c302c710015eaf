//! Exact O(n²) t-SNE.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    /// Entropy tolerance (nats) for the per-point bandwidth search.
    pub tolerance: f64,
    pub max_search_steps: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            tolerance: 1e-5,
            max_search_steps: 50,
            seed: 0,
        }
    }
}

pub const KL_EVERY: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    /// `(iteration, KL(P‖Q))` every [`KL_EVERY`] iterations, 1-based.
    pub kl: Vec<(usize, f64)>,
    /// Achieved perplexity of each conditional row.
    pub perplexities: Vec<f64>,
}

impl Embedding {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl.iter().find(|(i, _)| *i == iteration).map(|(_, k)| *k)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.to_vec()).collect()
    }
}

fn squared_distances(x: &Tensor<f64>) -> Vec<f64> {
    let (n, d) = (x.batch(), x.item_len());
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x.item(i).iter().zip(x.item(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    debug_assert_eq!(x.len(), n * d);
    out
}

/// Conditional row `p_{j|i}` for bandwidth `beta = 1/(2σ²)`; returns the
/// row and its Shannon entropy in nats.
fn conditional_row(d2: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let dmin = d2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (r, &d)) in row.iter_mut().zip(d2).enumerate() {
        *r = if j == i { 0.0 } else { (-(d - dmin) * beta).exp() };
        sum += *r;
    }
    let mut h = 0.0;
    for r in row.iter_mut() {
        *r /= sum;
        if *r > 0.0 {
            h -= *r * r.ln();
        }
    }
    h
}

/// Row-conditional affinities with per-point bandwidth found by bisection so
/// that each row's perplexity `exp(H)` matches the target.
pub fn conditional_affinities(x: &Tensor<f64>, cfg: &TsneConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.batch();
    if x.ndim() != 2 || n < 2 {
        return Err(Error::Config("t-SNE needs an n×d matrix with n ≥ 2".into()));
    }
    if !(cfg.perplexity >= 1.0 && cfg.perplexity < (n - 1) as f64) {
        return Err(Error::Config(alloc::format!(
            "perplexity {} must lie in [1, n-1) for n = {n}",
            cfg.perplexity
        )));
    }
    let d2 = squared_distances(x);
    if d2.iter().all(|&d| d == 0.0) {
        return Err(Error::Degenerate("all t-SNE input points are identical"));
    }
    let target = cfg.perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut perplexities = Vec::with_capacity(n);
    for i in 0..n {
        let dist = &d2[i * n..(i + 1) * n];
        let row = &mut p[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        let scale = dist.iter().copied().fold(0.0, f64::max);
        if scale > 0.0 {
            beta = 1.0 / scale;
        }
        let mut h = conditional_row(dist, i, beta, row);
        for _ in 0..cfg.max_search_steps {
            let diff = h - target;
            if diff.abs() < cfg.tolerance {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = conditional_row(dist, i, beta, row);
        }
        perplexities.push(h.exp());
    }
    Ok((p, perplexities))
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Embed the rows of `x` in two dimensions.
pub fn tsne(x: &Tensor<f64>, cfg: &TsneConfig) -> Result<Embedding> {
    let n = x.batch();
    let (cond, perplexities) = conditional_affinities(x, cfg)?;
    let mut p = vec![0.0; n * n];
    let norm = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / norm).max(1e-12);
        }
        p[i * n + i] = 0.0;
    }

    let mut r = rng::rng(cfg.seed);
    let init = Normal::new(0.0, 1e-4).map_err(|_| Error::Config("bad init scale".into()))?;
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut r), init.sample(&mut r)]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut q = vec![0.0; n * n];
    let mut kl = Vec::new();

    for it in 0..cfg.iterations {
        let exaggerate = if it < cfg.exaggeration_iters {
            cfg.exaggeration
        } else {
            1.0
        };
        let momentum = if it < cfg.exaggeration_iters {
            cfg.momentum
        } else {
            cfg.final_momentum
        };

        let mut sum_num = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                sum_num += 2.0 * v;
            }
        }
        for (qi, &v) in q.iter_mut().zip(&num) {
            *qi = (v / sum_num).max(1e-12);
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let k = i * n + j;
                let mult = (exaggerate * p[k] - q[k]) * num[k];
                g[0] += mult * (y[i][0] - y[j][0]);
                g[1] += mult * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                let grad = 4.0 * g[a];
                gains[i][a] = if (grad > 0.0) != (vel[i][a] > 0.0) {
                    gains[i][a] + 0.2
                } else {
                    (gains[i][a] * 0.8).max(0.01)
                };
                vel[i][a] = momentum * vel[i][a] - cfg.learning_rate * gains[i][a] * grad;
            }
        }
        let mut centre = [0.0; 2];
        for (yi, vi) in y.iter_mut().zip(&vel) {
            yi[0] += vi[0];
            yi[1] += vi[1];
            centre[0] += yi[0];
            centre[1] += yi[1];
        }
        for yi in &mut y {
            yi[0] -= centre[0] / n as f64;
            yi[1] -= centre[1] / n as f64;
        }
        if (it + 1) % KL_EVERY == 0 {
            kl.push((it + 1, kl_divergence(&p, &embedding_q(&y))));
        }
    }
    Ok(Embedding {
        points: y,
        kl,
        perplexities,
    })
}

fn embedding_q(y: &[[f64; 2]]) -> Vec<f64> {
    let n = y.len();
    let mut q = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = v;
                sum += v;
            }
        }
    }
    for v in &mut q {
        *v = (*v / sum).max(1e-12);
    }
    q
}
