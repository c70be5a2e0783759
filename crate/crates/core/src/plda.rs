//! Two-covariance Gaussian PLDA with closed-form verification scoring,
//! closed-set Max-norm and adaptive symmetric score normalization.
//!
//! Class means follow `y ~ N(μ, B)` and observations `x ~ N(y, W)`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, BinReader, BinWriter};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{floor_eigenvalues, spd_inverse, spd_log_det, symmetrize};
use crate::matrix::FeatureMatrix;

const MAGIC: &[u8; 4] = b"SPLD";
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PldaConfig {
    pub iters: usize,
    /// Cohort size for AS-norm; capped at the available cohort.
    pub as_norm_top_k: usize,
    /// Subtract the mean instead of the maximum of competing phrases.
    pub mean_norm: bool,
}

impl Default for PldaConfig {
    fn default() -> Self {
        Self {
            iters: 10,
            as_norm_top_k: 200,
            mean_norm: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PldaModel {
    mu: DVector<f64>,
    b: DMatrix<f64>,
    w: DMatrix<f64>,
    q: DMatrix<f64>,
    p: DMatrix<f64>,
    constant: f64,
}

impl PartialEq for PldaModel {
    fn eq(&self, o: &Self) -> bool {
        self.mu == o.mu && self.b == o.b && self.w == o.w
    }
}

impl PldaModel {
    pub fn new(mu: DVector<f64>, b: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 || b.shape() != (d, d) || w.shape() != (d, d) {
            return Err(Error::invalid("PLDA parameters must share one dimension"));
        }
        if mu.iter().chain(b.iter()).chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PLDA parameters".into()));
        }
        let b = symmetrize(&b);
        let w = symmetrize(&w);
        let t = &b + &w;
        let t_inv = spd_inverse(&t)?;
        let cond = symmetrize(&(&t - &b * &t_inv * &b));
        let m = spd_inverse(&cond)?;
        let q = symmetrize(&(&t_inv - &m));
        let p = symmetrize(&(&t_inv * &b * &m));
        let constant = 0.5 * spd_log_det(&t)? - 0.5 * spd_log_det(&cond)?;
        Ok(Self {
            mu,
            b,
            w,
            q,
            p,
            constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn between(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn within(&self) -> &DMatrix<f64> {
        &self.w
    }

    fn centred(&self, v: &[f64]) -> Result<DVector<f64>> {
        ensure_dim(self.dim(), v.len())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("PLDA input".into()));
        }
        Ok(DVector::from_column_slice(v) - &self.mu)
    }

    /// Same-class versus different-class log-likelihood ratio.
    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        let e = self.centred(enroll)?;
        let t = self.centred(test)?;
        Ok(0.5 * e.dot(&(&self.q * &e)) + 0.5 * t.dot(&(&self.q * &t)) + e.dot(&(&self.p * &t)) + self.constant)
    }

    /// `scores[i][j] = score(enroll[i], test[j])`.
    pub fn score_matrix(&self, enroll: &[Vec<f64>], test: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let es = enroll.iter().map(|v| self.centred(v)).collect::<Result<Vec<_>>>()?;
        let ts = test.iter().map(|v| self.centred(v)).collect::<Result<Vec<_>>>()?;
        let eq: Vec<f64> = es.iter().map(|e| 0.5 * e.dot(&(&self.q * e))).collect();
        let tq: Vec<f64> = ts.iter().map(|t| 0.5 * t.dot(&(&self.q * t))).collect();
        let pt: Vec<DVector<f64>> = ts.iter().map(|t| &self.p * t).collect();
        Ok(es
            .iter()
            .enumerate()
            .map(|(i, e)| (0..ts.len()).map(|j| eq[i] + tq[j] + e.dot(&pt[j]) + self.constant).collect())
            .collect())
    }

    /// Marginal log-likelihood of labelled data.
    pub fn log_likelihood<L: Ord + Clone>(&self, vectors: &[Vec<f64>], labels: &[L]) -> Result<f64> {
        let summary = ClassSummary::new(vectors, labels)?;
        ensure_dim(self.dim(), summary.dim)?;
        summary.log_likelihood(&self.mu, &self.b, &self.w)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::with_header(MAGIC);
        w.len_u32(self.dim())?;
        w.f64s(self.mu.as_slice());
        for m in [&self.b, &self.w] {
            for i in 0..self.dim() {
                for j in 0..self.dim() {
                    w.f64(m[(i, j)]);
                }
            }
        }
        w.write_to(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::new(&bytes, path);
        r.header(MAGIC)?;
        let d = r.usize()?;
        let mu = DVector::from_vec(r.f64s(d)?);
        let b = DMatrix::from_row_slice(d, d, &r.f64s(d * d)?);
        let w = DMatrix::from_row_slice(d, d, &r.f64s(d * d)?);
        r.finish()?;
        Self::new(mu, b, w).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Per-class counts, means and the pooled within-class scatter.
struct ClassSummary {
    dim: usize,
    total: usize,
    counts: Vec<usize>,
    means: Vec<DVector<f64>>,
    scatter: DMatrix<f64>,
}

impl ClassSummary {
    fn new<L: Ord + Clone>(vectors: &[Vec<f64>], labels: &[L]) -> Result<Self> {
        ensure_dim(vectors.len(), labels.len())?;
        let dim = vectors.first().ok_or_else(|| Error::empty("no PLDA training vectors"))?.len();
        let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            ensure_dim(dim, vectors[i].len())?;
            groups.entry(l.clone()).or_default().push(i);
        }
        let mut counts = Vec::new();
        let mut means = Vec::new();
        let mut scatter = DMatrix::zeros(dim, dim);
        for idx in groups.values() {
            let mut m = DVector::zeros(dim);
            for &i in idx {
                m += DVector::from_column_slice(&vectors[i]);
            }
            m /= idx.len() as f64;
            for &i in idx {
                let c = DVector::from_column_slice(&vectors[i]) - &m;
                scatter.ger(1.0, &c, &c, 1.0);
            }
            counts.push(idx.len());
            means.push(m);
        }
        Ok(Self {
            dim,
            total: vectors.len(),
            counts,
            means,
            scatter,
        })
    }

    fn log_likelihood(&self, mu: &DVector<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
        let d = self.dim as f64;
        let w_inv = spd_inverse(w)?;
        let w_ld = spd_log_det(w)?;
        let mut ll = -0.5 * (&w_inv * &self.scatter).trace();
        for (n, m) in self.counts.iter().zip(&self.means) {
            let n = *n as f64;
            let cov = b + w / n;
            let diff = m - mu;
            let inv = spd_inverse(&cov)?;
            ll += -0.5 * (d * LN_2PI + spd_log_det(&cov)? + diff.dot(&(&inv * &diff)));
            ll += -0.5 * (n - 1.0) * (d * LN_2PI + w_ld) - 0.5 * d * n.ln();
        }
        Ok(ll)
    }
}

/// Trained model and the marginal log-likelihood after initialisation and
/// after every EM iteration.
pub struct PldaFit {
    pub model: PldaModel,
    pub log_likelihood: Vec<f64>,
}

fn floor_within(w: &DMatrix<f64>) -> DMatrix<f64> {
    let floor = 1e-6 * w.trace().max(0.0) / w.nrows() as f64;
    floor_eigenvalues(w, floor.max(1e-12))
}

/// EM for the two-covariance model. `W` is floored at `1e-6 · trace / D`
/// and `B` is kept positive semi-definite.
pub fn train_plda<L: Ord + Clone>(vectors: &[Vec<f64>], labels: &[L], cfg: &PldaConfig) -> Result<PldaFit> {
    let s = ClassSummary::new(vectors, labels)?;
    if s.counts.len() < 2 {
        return Err(Error::invalid("PLDA needs at least two classes"));
    }
    if cfg.iters == 0 {
        return Err(Error::config("plda.iters", "must be >= 1"));
    }
    let dim = s.dim;
    let n_classes = s.counts.len() as f64;
    let total = s.total as f64;

    let mut mu = s.means.iter().fold(DVector::zeros(dim), |a, m| a + m) / n_classes;
    let mut w = floor_within(&(&s.scatter / total));
    let mut b = DMatrix::zeros(dim, dim);
    for m in &s.means {
        let c = m - &mu;
        b.ger(1.0 / n_classes, &c, &c, 1.0);
    }
    // A zero B is an EM fixed point, so start strictly inside the cone.
    b = floor_eigenvalues(&b, 1e-2 * w.trace() / dim as f64);

    let mut history = vec![s.log_likelihood(&mu, &b, &w)?];
    for _ in 0..cfg.iters {
        let mut post_means = Vec::with_capacity(s.counts.len());
        let mut post_covs = Vec::with_capacity(s.counts.len());
        for (n, m) in s.counts.iter().zip(&s.means) {
            let cov = &b + &w / (*n as f64);
            let gain = &b * spd_inverse(&cov)?;
            post_covs.push(symmetrize(&(&b - &gain * &b)));
            post_means.push(&mu + &gain * (m - &mu));
        }
        let new_mu = post_means.iter().fold(DVector::zeros(dim), |a, m| a + m) / n_classes;
        let mut new_b = DMatrix::zeros(dim, dim);
        let mut new_w = s.scatter.clone();
        for (i, (pm, pc)) in post_means.iter().zip(&post_covs).enumerate() {
            let c = pm - &new_mu;
            new_b += pc;
            new_b.ger(1.0, &c, &c, 1.0);
            let n = s.counts[i] as f64;
            let r = &s.means[i] - pm;
            new_w += pc * n;
            new_w.ger(n, &r, &r, 1.0);
        }
        mu = new_mu;
        b = floor_eigenvalues(&(new_b / n_classes), 0.0);
        w = floor_within(&(new_w / total));
        history.push(s.log_likelihood(&mu, &b, &w)?);
    }
    Ok(PldaFit {
        model: PldaModel::new(mu, b, w)?,
        log_likelihood: history,
    })
}

fn claimed_and_rivals(scores: &[f64], claimed: usize) -> Result<(f64, impl Iterator<Item = f64> + '_)> {
    if scores.len() < 2 {
        return Err(Error::invalid("closed-set normalization needs at least two phrases"));
    }
    if claimed >= scores.len() {
        return Err(Error::invalid("claimed phrase index out of range"));
    }
    let rivals = scores.iter().enumerate().filter(move |(i, _)| *i != claimed).map(|(_, s)| *s);
    Ok((scores[claimed], rivals))
}

/// Claimed-phrase score minus the best competing phrase score.
pub fn max_norm(scores: &[f64], claimed: usize) -> Result<f64> {
    let (s, rivals) = claimed_and_rivals(scores, claimed)?;
    Ok(s - rivals.fold(f64::NEG_INFINITY, f64::max))
}

/// Claimed-phrase score minus the mean competing phrase score.
pub fn mean_norm(scores: &[f64], claimed: usize) -> Result<f64> {
    let (s, rivals) = claimed_and_rivals(scores, claimed)?;
    let r: Vec<f64> = rivals.collect();
    Ok(s - r.iter().sum::<f64>() / r.len() as f64)
}

/// Cohort scores of the two trial sides.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortScores {
    pub enroll: Vec<f64>,
    pub test: Vec<f64>,
}

/// Mean and sample standard deviation (denominator `k - 1`, floored at
/// 1e-6) of the `top_k` highest scores.
pub fn top_k_stats(scores: &[f64], top_k: usize) -> Result<(f64, f64)> {
    if top_k < 2 {
        return Err(Error::invalid("AS-norm top_k must be >= 2"));
    }
    if scores.len() < top_k {
        return Err(Error::invalid(format!(
            "cohort of {} scores is smaller than top_k = {top_k}",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..top_k];
    let k = top_k as f64;
    let mean = top.iter().sum::<f64>() / k;
    let var = top.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (k - 1.0);
    Ok((mean, var.sqrt().max(1e-6)))
}

pub fn as_norm(raw: f64, cohort: &CohortScores, top_k: usize) -> Result<f64> {
    let e = top_k_stats(&cohort.enroll, top_k)?;
    let t = top_k_stats(&cohort.test, top_k)?;
    Ok(as_norm_with(raw, e, t))
}

/// AS-norm from precomputed `(mean, sd)` of each side.
pub fn as_norm_with(raw: f64, enroll: (f64, f64), test: (f64, f64)) -> f64 {
    0.5 * ((raw - enroll.0) / enroll.1 + (raw - test.0) / test.1)
}

/// Reads an ids file (one identifier per line) and its SDSV matrix.
pub fn read_embeddings(ids_path: &Path, matrix_path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(ids_path).map_err(|e| Error::io(ids_path, e))?;
    let ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    let m = FeatureMatrix::read_sdsv(matrix_path)?;
    if m.rows() != ids.len() {
        return Err(Error::format(
            matrix_path,
            format!("{} rows but {} ids in {}", m.rows(), ids.len(), ids_path.display()),
        ));
    }
    Ok((ids, m.iter_rows().map(<[f64]>::to_vec).collect()))
}

pub fn write_embeddings(ids_path: &Path, matrix_path: &Path, ids: &[String], vectors: &[Vec<f64>]) -> Result<()> {
    ensure_dim(ids.len(), vectors.len())?;
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    std::fs::write(ids_path, text).map_err(|e| Error::io(ids_path, e))?;
    FeatureMatrix::from_rows(vectors)?.write_sdsv(matrix_path)
}
