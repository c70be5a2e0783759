//! Stream-wise time-contrastive labels.
//!
//! Utterances are shuffled into one stream, cut into fixed chunks and
//! labelled round-robin. Each class is then modelled by a diagonal Gaussian
//! and every chunk moves to the class under which its frames are most
//! likely. The objective, the sum over chunks of the per-frame average
//! log-likelihood under the assigned class, never decreases.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::diag_gaussian_log_density;
use crate::matrix::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StclConfig {
    pub chunk_len: usize,
    pub n_classes: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for StclConfig {
    fn default() -> Self {
        Self {
            chunk_len: 100,
            n_classes: 10,
            max_iters: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StclResult {
    /// Per-utterance frame labels, aligned with the input order.
    pub labels: Vec<Vec<usize>>,
    /// Objective after each class-model fit.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

struct Chunk {
    /// (utterance, frame) pairs in stream order.
    frames: Vec<(usize, usize)>,
}

struct ClassModel {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Weighted ML diagonal Gaussian; each chunk carries unit total weight.
fn fit_class(utts: &[FeatureMatrix], chunks: &[&Chunk], dim: usize, floor: &[f64]) -> ClassModel {
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let total = chunks.len() as f64;
    for c in chunks {
        let w = 1.0 / c.frames.len() as f64;
        for &(u, t) in &c.frames {
            for (i, x) in utts[u].row(t).iter().enumerate() {
                mean[i] += w * x;
                sq[i] += w * x * x;
            }
        }
    }
    let var = (0..dim)
        .map(|i| {
            mean[i] /= total;
            (sq[i] / total - mean[i] * mean[i]).max(floor[i])
        })
        .collect();
    ClassModel { mean, var }
}

fn chunk_score(utts: &[FeatureMatrix], chunk: &Chunk, m: &ClassModel) -> f64 {
    chunk
        .frames
        .iter()
        .map(|&(u, t)| diag_gaussian_log_density(utts[u].row(t), &m.mean, &m.var))
        .sum::<f64>()
        / chunk.frames.len() as f64
}

pub fn stcl_labels(utterances: &[FeatureMatrix], cfg: &StclConfig) -> Result<StclResult> {
    if cfg.n_classes < 2 {
        return Err(Error::config("bnfeat.stcl.n_classes", "must be >= 2"));
    }
    if cfg.chunk_len < 1 {
        return Err(Error::config("bnfeat.stcl.chunk_len", "must be >= 1"));
    }
    let first = utterances.first().ok_or_else(|| Error::empty("no utterances for sTCL"))?;
    let dim = first.dim();
    let total: usize = utterances.iter().map(|u| u.rows()).sum();
    if total < cfg.n_classes * cfg.chunk_len {
        return Err(Error::invalid(format!(
            "{total} frames cannot fill {} chunks of {}",
            cfg.n_classes, cfg.chunk_len
        )));
    }
    for u in utterances {
        crate::error::ensure_dim(dim, u.dim())?;
    }

    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let stream: Vec<(usize, usize)> = order
        .iter()
        .flat_map(|&u| (0..utterances[u].rows()).map(move |t| (u, t)))
        .collect();
    let chunks: Vec<Chunk> = stream
        .chunks(cfg.chunk_len)
        .map(|c| Chunk { frames: c.to_vec() })
        .collect();
    let n = cfg.n_classes;
    let mut assign: Vec<usize> = (0..chunks.len()).map(|i| i % n).collect();

    let pooled = FeatureMatrix::vstack(utterances)?;
    let (_, gvar) = crate::matrix::mean_and_variance(&pooled);
    let floor: Vec<f64> = gvar.iter().map(|v| (1e-6 * v).max(1e-12)).collect();

    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let models: Vec<ClassModel> = (0..n)
            .map(|k| {
                let members: Vec<&Chunk> = chunks.iter().zip(&assign).filter(|(_, a)| **a == k).map(|(c, _)| c).collect();
                fit_class(utterances, &members, dim, &floor)
            })
            .collect();
        let scores: Vec<Vec<f64>> = chunks
            .iter()
            .map(|c| models.iter().map(|m| chunk_score(utterances, c, m)).collect())
            .collect();
        objective.push(scores.iter().zip(&assign).map(|(s, &a)| s[a]).sum());
        iterations += 1;

        let mut next: Vec<usize> = scores
            .iter()
            .map(|s| {
                let mut best = 0;
                for k in 1..n {
                    if s[k] > s[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        refill_empty_classes(&mut next, &scores, n);
        if next == assign {
            break;
        }
        assign = next;
    }

    let mut labels: Vec<Vec<usize>> = utterances.iter().map(|u| vec![0; u.rows()]).collect();
    for (c, &a) in chunks.iter().zip(&assign) {
        for &(u, t) in &c.frames {
            labels[u][t] = a;
        }
    }
    Ok(StclResult {
        labels,
        objective,
        iterations,
    })
}

/// Gives every empty class the worst-fitting chunk of a class that holds
/// at least two chunks.
fn refill_empty_classes(assign: &mut [usize], scores: &[Vec<f64>], n: usize) {
    loop {
        let mut counts = vec![0usize; n];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let mut worst: Option<usize> = None;
        for (i, &a) in assign.iter().enumerate() {
            if counts[a] >= 2 && worst.is_none_or(|w| scores[i][a] < scores[w][assign[w]]) {
                worst = Some(i);
            }
        }
        match worst {
            Some(i) => assign[i] = empty,
            None => return,
        }
    }
}
