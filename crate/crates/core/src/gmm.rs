//! Diagonal-covariance Gaussian mixture models.
//!
//! Training is k-means-initialised EM; phrase-wise models are merged into a
//! universal background model; targets are derived by MAP adaptation of the
//! means. Frame accumulation runs in fixed-size blocks reduced in order so
//! every result is bit-stable across thread counts.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, BinReader, BinWriter};
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::{mean_and_variance, FeatureMatrix};
use crate::parallel::{block_reduce, FRAME_BLOCK};

const MAGIC: &[u8; 4] = b"SGMM";
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    inv_vars: Vec<f64>,
    /// `ln w_k - ½ (D ln 2π + Σ_d ln σ²_kd)`
    log_consts: Vec<f64>,
}

impl DiagGmm {
    /// Builds a model from flat `K x D` mean and variance arrays.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::invalid("a GMM needs at least one component"));
        }
        if means.is_empty() || means.len() % k != 0 {
            return Err(Error::invalid("mean array is not K x D"));
        }
        let dim = means.len() / k;
        ensure_dim(means.len(), variances.len())?;
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("GMM means".into()));
        }
        if variances.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::invalid("variances must be finite and positive"));
        }
        let inv_vars: Vec<f64> = variances.iter().map(|v| 1.0 / v).collect();
        let log_consts = (0..k)
            .map(|c| {
                let ldet: f64 = variances[c * dim..(c + 1) * dim].iter().map(|v| v.ln()).sum();
                weights[c].ln() - 0.5 * (dim as f64 * LN_2PI + ldet)
            })
            .collect();
        Ok(Self {
            dim,
            weights,
            means,
            variances,
            inv_vars,
            log_consts,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    pub fn means_flat(&self) -> &[f64] {
        &self.means
    }

    pub fn variances_flat(&self) -> &[f64] {
        &self.variances
    }

    pub fn min_variance(&self) -> f64 {
        self.variances.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Same weights and variances with replaced means.
    pub fn with_means(&self, means: Vec<f64>) -> Result<Self> {
        Self::new(self.weights.clone(), means, self.variances.clone())
    }

    /// `ln w_k + ln N(x | μ_k, σ²_k)` for every component.
    pub fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (k, o) in out.iter_mut().enumerate() {
            let mu = &self.means[k * d..(k + 1) * d];
            let iv = &self.inv_vars[k * d..(k + 1) * d];
            let q = weighted_sq_dist(&x[..d], mu, iv);
            *o = self.log_consts[k] - 0.5 * q;
        }
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.n_components()];
        self.component_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// Writes component posteriors into `out` and returns the frame
    /// log-likelihood.
    pub fn posteriors(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.component_log_densities(x, out);
        let ll = log_sum_exp(out);
        for v in out.iter_mut() {
            *v = (*v - ll).exp();
        }
        ll
    }

    pub fn frame_log_likelihoods(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        ensure_dim(self.dim, features.dim())?;
        let parts = block_reduce(
            features.rows(),
            FRAME_BLOCK,
            |r| {
                let mut buf = vec![0.0; self.n_components()];
                r.map(|t| {
                    self.component_log_densities(features.row(t), &mut buf);
                    log_sum_exp(&buf)
                })
                .collect::<Vec<_>>()
            },
            |a, b| a.extend(b),
        );
        Ok(parts.unwrap_or_default())
    }

    /// Mean over frames of `ln Σ_k w_k N(x_t | μ_k, σ²_k)`.
    pub fn avg_log_likelihood(&self, features: &FeatureMatrix) -> Result<f64> {
        ensure_dim(self.dim, features.dim())?;
        if features.is_empty() {
            return Err(Error::empty("no frames to score"));
        }
        let total = block_reduce(
            features.rows(),
            FRAME_BLOCK,
            |r| {
                let mut buf = vec![0.0; self.n_components()];
                r.map(|t| {
                    self.component_log_densities(features.row(t), &mut buf);
                    log_sum_exp(&buf)
                })
                .sum::<f64>()
            },
            |a, b| *a += b,
        )
        .unwrap_or(0.0);
        Ok(total / features.rows() as f64)
    }

    /// Zeroth, first and (optionally) second-order statistics.
    pub fn accumulate(&self, features: &FeatureMatrix, second_order: bool) -> Result<GmmStats> {
        ensure_dim(self.dim, features.dim())?;
        let (k, d) = (self.n_components(), self.dim);
        let empty = GmmStats::zeros(k, d, second_order);
        let stats = block_reduce(
            features.rows(),
            FRAME_BLOCK,
            |r| {
                let mut acc = GmmStats::zeros(k, d, second_order);
                let mut post = vec![0.0; k];
                for t in r {
                    let x = features.row(t);
                    acc.log_likelihood += self.posteriors(x, &mut post);
                    acc.frames += 1;
                    for (c, &g) in post.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        acc.occupancy[c] += g;
                        let f = &mut acc.first[c * d..(c + 1) * d];
                        for i in 0..d {
                            f[i] += g * x[i];
                        }
                        if let Some(s) = acc.second.as_mut() {
                            let s = &mut s[c * d..(c + 1) * d];
                            for i in 0..d {
                                s[i] += g * x[i] * x[i];
                            }
                        }
                    }
                }
                acc
            },
            |a, b| a.add(&b),
        );
        Ok(stats.unwrap_or(empty))
    }

    /// Density `Σ_k w_k N(x | μ_k, σ²_k)`.
    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_likelihood(x).exp()
    }

    /// Draws `n` frames from the mixture.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> FeatureMatrix {
        let d = self.dim;
        let mut out = FeatureMatrix::zeros(n, d);
        for t in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.n_components() - 1;
            for (c, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = c;
                    break;
                }
            }
            let row = out.row_mut(t);
            for i in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                row[i] = self.means[k * d + i] + z * self.variances[k * d + i].sqrt();
            }
        }
        out
    }

    pub fn write_record(&self, w: &mut BinWriter) -> Result<()> {
        w.magic(MAGIC);
        w.u32(crate::binio::FORMAT_VERSION);
        w.len_u32(self.n_components())?;
        w.len_u32(self.dim)?;
        w.f64s(&self.weights);
        w.f64s(&self.means);
        w.f64s(&self.variances);
        Ok(())
    }

    pub fn read_record(r: &mut BinReader) -> Result<Self> {
        r.header(MAGIC)?;
        let k = r.usize()?;
        let d = r.usize()?;
        if k == 0 || d == 0 {
            return Err(r.fail("empty GMM"));
        }
        let weights = r.f64s(k)?;
        let means = r.f64s(k * d)?;
        let variances = r.f64s(k * d)?;
        Self::new(weights, means, variances).map_err(|e| r.fail(e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BinWriter::new();
        self.write_record(&mut w)?;
        Ok(w.into_bytes())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new();
        self.write_record(&mut w)?;
        w.write_to(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::new(&bytes, path);
        let g = Self::read_record(&mut r)?;
        r.finish()?;
        Ok(g)
    }
}

/// Posterior-weighted sufficient statistics of a frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmStats {
    pub frames: usize,
    pub log_likelihood: f64,
    pub occupancy: Vec<f64>,
    /// `Σ_t γ_tk x_t`, flat `K x D`.
    pub first: Vec<f64>,
    /// `Σ_t γ_tk x_t²`, flat `K x D`.
    pub second: Option<Vec<f64>>,
}

impl GmmStats {
    fn zeros(k: usize, d: usize, second_order: bool) -> Self {
        Self {
            frames: 0,
            log_likelihood: 0.0,
            occupancy: vec![0.0; k],
            first: vec![0.0; k * d],
            second: second_order.then(|| vec![0.0; k * d]),
        }
    }

    fn add(&mut self, o: &GmmStats) {
        self.frames += o.frames;
        self.log_likelihood += o.log_likelihood;
        crate::parallel::add_assign(&mut self.occupancy, &o.occupancy);
        crate::parallel::add_assign(&mut self.first, &o.first);
        if let (Some(a), Some(b)) = (self.second.as_mut(), o.second.as_ref()) {
            crate::parallel::add_assign(a, b);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmTrainConfig {
    pub components: usize,
    pub em_iters: usize,
    pub kmeans_iters: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub var_floor: f64,
    /// Subsample size for k-means initialisation.
    pub max_init_frames: usize,
    pub seed: u64,
}

impl Default for GmmTrainConfig {
    fn default() -> Self {
        Self {
            components: 512,
            em_iters: 10,
            kmeans_iters: 10,
            var_floor: 1e-3,
            max_init_frames: 100_000,
            seed: 0,
        }
    }
}

/// A trained model plus the average training log-likelihood before the
/// first EM update and after every update.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: DiagGmm,
    pub log_likelihood: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid and its squared distance.
fn nearest(x: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(x, c);
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

struct KmeansAcc {
    counts: Vec<usize>,
    sums: Vec<f64>,
    /// (frame, squared distance to its centroid)
    farthest: Vec<(usize, f64)>,
}

fn kmeans_pass(data: &FeatureMatrix, centroids: &[f64], k: usize) -> KmeansAcc {
    let d = data.dim();
    block_reduce(
        data.rows(),
        FRAME_BLOCK,
        |r| {
            let mut acc = KmeansAcc {
                counts: vec![0; k],
                sums: vec![0.0; k * d],
                farthest: Vec::new(),
            };
            for t in r {
                let x = data.row(t);
                let (c, dist) = nearest(x, centroids, d);
                acc.counts[c] += 1;
                for (s, v) in acc.sums[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *s += v;
                }
                acc.farthest.push((t, dist));
            }
            acc
        },
        |a, b| {
            for (x, y) in a.counts.iter_mut().zip(&b.counts) {
                *x += y;
            }
            crate::parallel::add_assign(&mut a.sums, &b.sums);
            a.farthest.extend(b.farthest);
        },
    )
    .expect("k-means on non-empty data")
}

/// Lloyd's k-means; clusters that empty out are reseeded from the frames
/// farthest from their centroids.
fn kmeans(data: &FeatureMatrix, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = data.dim();
    let mut centroids = Vec::with_capacity(k * d);
    let mut picks = sample_indices(rng, data.rows(), k).into_vec();
    picks.sort_unstable();
    for &i in &picks {
        centroids.extend_from_slice(data.row(i));
    }
    for _ in 0..iters {
        let acc = kmeans_pass(data, &centroids, k);
        let mut far = acc.farthest;
        far.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        let mut far_iter = far.into_iter();
        for c in 0..k {
            let dst = &mut centroids[c * d..(c + 1) * d];
            if acc.counts[c] > 0 {
                let n = acc.counts[c] as f64;
                for (o, s) in dst.iter_mut().zip(&acc.sums[c * d..(c + 1) * d]) {
                    *o = s / n;
                }
            } else if let Some((t, _)) = far_iter.next() {
                dst.copy_from_slice(data.row(t));
            }
        }
    }
    centroids
}

fn subsample(features: &FeatureMatrix, max: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    if features.rows() <= max {
        return features.clone();
    }
    let mut idx = sample_indices(rng, features.rows(), max).into_vec();
    idx.sort_unstable();
    let mut mask = vec![false; features.rows()];
    for i in idx {
        mask[i] = true;
    }
    features.select_rows(&mask).expect("mask length matches")
}

/// Trains a `K`-component diagonal GMM with k-means initialisation followed
/// by EM. The average log-likelihood is recorded at every iteration.
pub fn train_gmm_em(features: &FeatureMatrix, cfg: &GmmTrainConfig) -> Result<GmmFit> {
    let k = cfg.components;
    if k < 1 {
        return Err(Error::config("ubm.components", "must be >= 1"));
    }
    if cfg.em_iters < 1 || cfg.kmeans_iters < 1 {
        return Err(Error::config("ubm.em_iters", "iteration counts must be >= 1"));
    }
    if features.rows() < k {
        return Err(Error::invalid(format!(
            "{} frames cannot train {k} components",
            features.rows()
        )));
    }
    features.check_finite("GMM training data")?;
    let d = features.dim();
    let (_, global_var) = mean_and_variance(features);
    let floor: Vec<f64> = global_var.iter().map(|v| (cfg.var_floor * v).max(1e-10)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = subsample(features, cfg.max_init_frames.max(k), &mut rng);
    let centroids = kmeans(&init, k, cfg.kmeans_iters, &mut rng);

    // Hard-assignment moments of the final partition seed the mixture.
    let acc = kmeans_pass(features, &centroids, k);
    let mut counts = acc.counts.iter().map(|&c| c as f64).collect::<Vec<_>>();
    let mut sq = vec![0.0; k * d];
    for &(t, _) in &acc.farthest {
        let (c, _) = nearest(features.row(t), &centroids, d);
        for (i, v) in features.row(t).iter().enumerate() {
            sq[c * d + i] += v * v;
        }
    }
    let total = features.rows() as f64;
    let mut means = centroids.clone();
    let mut vars = vec![0.0; k * d];
    for c in 0..k {
        if counts[c] == 0.0 {
            vars[c * d..(c + 1) * d].copy_from_slice(&global_var);
            counts[c] = 0.0;
            continue;
        }
        for i in 0..d {
            let m = acc.sums[c * d + i] / counts[c];
            means[c * d + i] = m;
            vars[c * d + i] = sq[c * d + i] / counts[c] - m * m;
        }
    }
    for (i, v) in vars.iter_mut().enumerate() {
        *v = v.max(floor[i % d]);
    }
    let weights: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let mut model = DiagGmm::new(normalize(weights), means, vars)?;

    let mut history = Vec::with_capacity(cfg.em_iters + 1);
    for _ in 0..cfg.em_iters {
        let stats = model.accumulate(features, true)?;
        history.push(stats.log_likelihood / total);
        model = m_step(&model, &stats, &floor)?;
    }
    history.push(model.avg_log_likelihood(features)?);
    Ok(GmmFit {
        model,
        log_likelihood: history,
    })
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn m_step(model: &DiagGmm, stats: &GmmStats, floor: &[f64]) -> Result<DiagGmm> {
    let (k, d) = (model.n_components(), model.dim());
    let second = stats.second.as_ref().expect("second-order stats");
    let total = stats.frames as f64;
    let mut means = model.means.clone();
    let mut vars = model.variances.clone();
    let mut weights = vec![0.0; k];
    for c in 0..k {
        let n = stats.occupancy[c];
        weights[c] = n / total;
        if n <= 1e-10 {
            continue;
        }
        for i in 0..d {
            let m = stats.first[c * d + i] / n;
            means[c * d + i] = m;
            vars[c * d + i] = (second[c * d + i] / n - m * m).max(floor[i]);
        }
    }
    DiagGmm::new(normalize(weights), means, vars)
}

/// Concatenates the components of all models, scaling each source's
/// weights by `1 / len` so the result sums to one.
pub fn merge_gmms(gmms: &[DiagGmm]) -> Result<DiagGmm> {
    let first = gmms.first().ok_or_else(|| Error::empty("no GMMs to merge"))?;
    let share = 1.0 / gmms.len() as f64;
    let (mut w, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for g in gmms {
        ensure_dim(first.dim(), g.dim())?;
        w.extend(g.weights.iter().map(|x| x * share));
        m.extend_from_slice(&g.means);
        v.extend_from_slice(&g.variances);
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    DiagGmm::new(w, m, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub relevance: f64,
    pub iterations: usize,
    pub means_only: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            relevance: 3.0,
            iterations: 1,
            means_only: true,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.relevance > 0.0 && self.relevance.is_finite()) {
            return Err(Error::config("map.relevance", "must be positive"));
        }
        if self.iterations < 1 {
            return Err(Error::config("map.iterations", "must be >= 1"));
        }
        Ok(())
    }
}

/// MAP adaptation towards `features`. Every iteration realigns the data with
/// the current model; the interpolation prior stays the original `prior`.
/// Empty adaptation data returns the prior unchanged.
pub fn map_adapt(prior: &DiagGmm, features: &FeatureMatrix, cfg: &MapConfig) -> Result<DiagGmm> {
    cfg.validate()?;
    ensure_dim(prior.dim(), features.dim())?;
    if features.is_empty() {
        return Ok(prior.clone());
    }
    let (k, d) = (prior.n_components(), prior.dim());
    let mut current = prior.clone();
    for _ in 0..cfg.iterations {
        let stats = current.accumulate(features, !cfg.means_only)?;
        let mut means = prior.means.clone();
        let mut alphas = vec![0.0; k];
        for c in 0..k {
            let n = stats.occupancy[c];
            let alpha = n / (n + cfg.relevance);
            alphas[c] = alpha;
            if n <= 0.0 {
                continue;
            }
            for i in 0..d {
                let e = stats.first[c * d + i] / n;
                means[c * d + i] = alpha * e + (1.0 - alpha) * prior.means[c * d + i];
            }
        }
        current = if cfg.means_only {
            prior.with_means(means)?
        } else {
            let total = stats.frames as f64;
            let second = stats.second.as_ref().expect("second-order stats");
            let mut weights = vec![0.0; k];
            let mut vars = prior.variances.clone();
            for c in 0..k {
                let (n, a) = (stats.occupancy[c], alphas[c]);
                weights[c] = a * n / total + (1.0 - a) * prior.weights[c];
                if n <= 0.0 {
                    continue;
                }
                for i in 0..d {
                    let j = c * d + i;
                    let (pm, pv) = (prior.means[j], prior.variances[j]);
                    let e2 = second[j] / n;
                    let v = a * e2 + (1.0 - a) * (pv + pm * pm) - means[j] * means[j];
                    vars[j] = v.max(1e-3 * pv);
                }
            }
            DiagGmm::new(normalize(weights), means, vars)?
        };
    }
    Ok(current)
}

/// `avg_log_likelihood(target) - avg_log_likelihood(background)`.
pub fn llr_score(target: &DiagGmm, background: &DiagGmm, features: &FeatureMatrix) -> Result<f64> {
    Ok(target.avg_log_likelihood(features)? - background.avg_log_likelihood(features)?)
}

/// `Σ_i (x_i - m_i)² v_i` with four independent partial sums.
#[inline]
fn weighted_sq_dist(x: &[f64], m: &[f64], v: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (xc, mc, vc) = (x.chunks_exact(4), m.chunks_exact(4), v.chunks_exact(4));
    let tail: f64 = xc
        .remainder()
        .iter()
        .zip(mc.remainder())
        .zip(vc.remainder())
        .map(|((a, b), w)| (a - b) * (a - b) * w)
        .sum();
    for ((a, b), w) in xc.zip(mc).zip(vc) {
        for j in 0..4 {
            let d = a[j] - b[j];
            acc[j] += d * d * w[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Closed-form log-density of a single diagonal Gaussian.
pub fn diag_gaussian_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((2.0 * PI * v).ln() + (x - m) * (x - m) / v))
        .sum()
}
