//! Total-variability modelling: Baum-Welch statistics, T-matrix EM,
//! i-vector extraction, LDA and whitening with length normalization.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, BinReader, BinWriter};
use crate::error::{ensure_dim, Error, Result};
use crate::gmm::DiagGmm;
use crate::linalg::{fix_sign, mean_and_covariance, sorted_symmetric_eigen, symmetrize};
use crate::matrix::FeatureMatrix;
use crate::parallel::{block_reduce, ordered_map, try_ordered_map};

const TV_MAGIC: &[u8; 4] = b"STVM";
const LDA_MAGIC: &[u8; 4] = b"SLDA";
const WHITEN_MAGIC: &[u8; 4] = b"SWHT";

/// Utterances are split into this many blocks for E-step accumulation.
const UTT_BLOCKS: usize = 16;

/// Zeroth and centred first-order statistics of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchStats {
    /// `N_k`, length K.
    pub n: Vec<f64>,
    /// `F̃_k = Σ_t γ_tk (x_t - μ_k)`, flat `K x D`.
    pub f: Vec<f64>,
}

impl BaumWelchStats {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            n: vec![0.0; k],
            f: vec![0.0; k * d],
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        ensure_dim(self.f.len(), other.f.len())?;
        Ok(Self {
            n: self.n.iter().zip(&other.n).map(|(a, b)| a + b).collect(),
            f: self.f.iter().zip(&other.f).map(|(a, b)| a + b).collect(),
        })
    }
}

/// Posterior-weighted statistics under `ubm`; empty input gives zeros.
pub fn accumulate_stats(ubm: &DiagGmm, features: &FeatureMatrix) -> Result<BaumWelchStats> {
    ensure_dim(ubm.dim(), features.dim())?;
    let (k, d) = (ubm.n_components(), ubm.dim());
    if features.is_empty() {
        return Ok(BaumWelchStats::zeros(k, d));
    }
    let raw = ubm.accumulate(features, false)?;
    let mut f = raw.first;
    for c in 0..k {
        let mu = ubm.mean(c);
        for i in 0..d {
            f[c * d + i] -= raw.occupancy[c] * mu[i];
        }
    }
    Ok(BaumWelchStats {
        n: raw.occupancy,
        f,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvConfig {
    pub rank: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            rank: 600,
            iters: 10,
            seed: 0,
        }
    }
}

/// Low-rank model of utterance supervectors, `M = m + T w`.
#[derive(Debug, Clone)]
pub struct TotalVariabilityModel {
    k: usize,
    d: usize,
    /// `(K·D) x R`
    t: DMatrix<f64>,
    inv_var: Vec<f64>,
    /// `T_kᵗ Σ_k⁻¹ T_k` for every component, flattened into a `K x R²` matrix.
    precision_terms: DMatrix<f64>,
}

/// Posterior of the latent factor for one utterance.
struct Posterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// `½ bᵗ L⁻¹ b - ½ ln |L|`
    objective: f64,
}

impl TotalVariabilityModel {
    pub fn new(ubm: &DiagGmm, t: DMatrix<f64>) -> Result<Self> {
        let (k, d) = (ubm.n_components(), ubm.dim());
        if t.nrows() != k * d {
            return Err(Error::DimensionMismatch {
                expected: k * d,
                actual: t.nrows(),
            });
        }
        if t.ncols() == 0 || t.ncols() > k * d {
            return Err(Error::invalid("rank must satisfy 1 <= R <= K·D"));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("T matrix".into()));
        }
        let inv_var: Vec<f64> = ubm.variances_flat().iter().map(|v| 1.0 / v).collect();
        let r = t.ncols();
        let rows: Vec<usize> = (0..k).collect();
        let terms = ordered_map(&rows, |&c| {
            let mut scaled = t.rows(c * d, d).into_owned();
            for i in 0..d {
                let s = inv_var[c * d + i].sqrt();
                scaled.row_mut(i).scale_mut(s);
            }
            scaled.tr_mul(&scaled)
        });
        let mut precision_terms = DMatrix::zeros(k, r * r);
        for (c, p) in terms.iter().enumerate() {
            for (j, v) in p.iter().enumerate() {
                precision_terms[(c, j)] = *v;
            }
        }
        Ok(Self {
            k,
            d,
            t,
            inv_var,
            precision_terms,
        })
    }

    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    pub fn t_matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    fn check(&self, stats: &BaumWelchStats) -> Result<()> {
        ensure_dim(self.k, stats.n.len())?;
        ensure_dim(self.k * self.d, stats.f.len())?;
        if stats.n.iter().chain(&stats.f).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Baum-Welch statistics".into()));
        }
        Ok(())
    }

    /// Posterior precision `L = I + Σ_k N_k T_kᵗ Σ_k⁻¹ T_k`.
    pub fn precision(&self, stats: &BaumWelchStats) -> DMatrix<f64> {
        let r = self.rank();
        let n = DMatrix::from_row_slice(1, self.k, &stats.n);
        let flat = n * &self.precision_terms;
        let mut l = DMatrix::from_row_slice(r, r, flat.as_slice());
        for i in 0..r {
            l[(i, i)] += 1.0;
        }
        symmetrize(&l)
    }

    fn linear_term(&self, stats: &BaumWelchStats) -> DVector<f64> {
        let scaled = DVector::from_iterator(
            stats.f.len(),
            stats.f.iter().zip(&self.inv_var).map(|(f, iv)| f * iv),
        );
        self.t.tr_mul(&scaled)
    }

    fn posterior(&self, stats: &BaumWelchStats) -> Result<Posterior> {
        self.check(stats)?;
        let l = self.precision(stats);
        let b = self.linear_term(stats);
        let chol = l
            .cholesky()
            .ok_or_else(|| Error::Numerical("posterior precision is not positive definite".into()))?;
        let mean = chol.solve(&b);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let cov = chol.inverse();
        Ok(Posterior {
            objective: 0.5 * b.dot(&mean) - 0.5 * log_det,
            mean,
            cov,
        })
    }

    /// `w = L⁻¹ Tᵗ Σ⁻¹ F̃`.
    pub fn extract(&self, stats: &BaumWelchStats) -> Result<Vec<f64>> {
        Ok(self.posterior(stats)?.mean.as_slice().to_vec())
    }

    pub fn extract_all(&self, stats: &[BaumWelchStats]) -> Result<Vec<Vec<f64>>> {
        try_ordered_map(stats, |s| self.extract(s))
    }

    /// Marginal log-likelihood of the statistics up to a T-independent
    /// constant.
    pub fn objective(&self, stats: &[BaumWelchStats]) -> Result<f64> {
        let parts = try_ordered_map(stats, |s| Ok::<_, Error>(self.posterior(s)?.objective))?;
        Ok(parts.iter().sum())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::with_header(TV_MAGIC);
        w.len_u32(self.k)?;
        w.len_u32(self.d)?;
        w.len_u32(self.rank())?;
        write_row_major(&mut w, &self.t);
        w.write_to(path)
    }

    /// Reads a T matrix; the UBM supplies means and covariances.
    pub fn read(path: &Path, ubm: &DiagGmm) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::new(&bytes, path);
        r.header(TV_MAGIC)?;
        let (k, d, rank) = (r.usize()?, r.usize()?, r.usize()?);
        if k != ubm.n_components() || d != ubm.dim() {
            return Err(r.fail("T matrix does not match the UBM"));
        }
        let t = read_row_major(&mut r, k * d, rank)?;
        r.finish()?;
        Self::new(ubm, t)
    }
}

fn write_row_major(w: &mut BinWriter, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.f64(m[(i, j)]);
        }
    }
}

fn read_row_major(r: &mut BinReader, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    Ok(DMatrix::from_row_slice(rows, cols, &r.f64s(rows * cols)?))
}

struct EmAcc {
    /// `Σ_u F̃_u E[w_u]ᵗ`, `(K·D) x R`
    c: DMatrix<f64>,
    /// `Σ_u N_uk E[w_u w_uᵗ]`, `K x R²`
    a: DMatrix<f64>,
    objective: f64,
}

fn e_step(tv: &TotalVariabilityModel, stats: &[BaumWelchStats]) -> Result<EmAcc> {
    let (k, r, kd) = (tv.k, tv.rank(), tv.k * tv.d);
    let block = stats.len().div_ceil(UTT_BLOCKS);
    block_reduce(
        stats.len(),
        block,
        |range| -> Result<EmAcc> {
            let u = range.len();
            let mut n_mat = DMatrix::zeros(u, k);
            let mut f_mat = DMatrix::zeros(u, kd);
            let mut w_mat = DMatrix::zeros(u, r);
            let mut e_mat = DMatrix::zeros(u, r * r);
            let mut objective = 0.0;
            for (row, s) in stats[range].iter().enumerate() {
                let post = tv.posterior(s)?;
                objective += post.objective;
                let second = &post.cov + &post.mean * post.mean.transpose();
                for (j, v) in s.n.iter().enumerate() {
                    n_mat[(row, j)] = *v;
                }
                for (j, v) in s.f.iter().enumerate() {
                    f_mat[(row, j)] = *v;
                }
                for j in 0..r {
                    w_mat[(row, j)] = post.mean[j];
                }
                for (j, v) in second.iter().enumerate() {
                    e_mat[(row, j)] = *v;
                }
            }
            Ok(EmAcc {
                c: f_mat.tr_mul(&w_mat),
                a: n_mat.tr_mul(&e_mat),
                objective,
            })
        },
        |acc, part| match (acc.as_mut(), part) {
            (Ok(a), Ok(p)) => {
                a.c += &p.c;
                a.a += &p.a;
                a.objective += p.objective;
            }
            (Ok(_), Err(e)) => *acc = Err(e),
            (Err(_), _) => {}
        },
    )
    .ok_or_else(|| Error::empty("no utterance statistics"))?
}

fn m_step(tv: &TotalVariabilityModel, acc: &EmAcc, ubm: &DiagGmm) -> Result<TotalVariabilityModel> {
    let (k, d, r) = (tv.k, tv.d, tv.rank());
    let comps: Vec<usize> = (0..k).collect();
    let blocks = try_ordered_map(&comps, |&c| -> Result<DMatrix<f64>> {
        let a = symmetrize(&DMatrix::from_column_slice(r, r, acc.a.row(c).transpose().as_slice()));
        let c_k = acc.c.rows(c * d, d);
        match a.cholesky() {
            Some(chol) => Ok(chol.solve(&c_k.transpose()).transpose()),
            None => Ok(tv.t.rows(c * d, d).into_owned()),
        }
    })?;
    let mut t = DMatrix::zeros(k * d, r);
    for (c, b) in blocks.iter().enumerate() {
        t.rows_mut(c * d, d).copy_from(b);
    }
    TotalVariabilityModel::new(ubm, t)
}

/// Trained model and the objective evaluated before each EM update and
/// after the last.
pub struct TvFit {
    pub model: TotalVariabilityModel,
    pub objective: Vec<f64>,
}

/// EM estimation of the T matrix from a random Gaussian start.
pub fn train_total_variability(
    ubm: &DiagGmm,
    stats: &[BaumWelchStats],
    cfg: &TvConfig,
) -> Result<TvFit> {
    let (k, d) = (ubm.n_components(), ubm.dim());
    if stats.is_empty() {
        return Err(Error::empty("no utterance statistics for T-matrix training"));
    }
    if cfg.rank == 0 || cfg.rank > k * d {
        return Err(Error::config("tv.rank", format!("must lie in 1..={}", k * d)));
    }
    if cfg.iters == 0 {
        return Err(Error::config("tv.iters", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sd: Vec<f64> = ubm.variances_flat().iter().map(|v| v.sqrt()).collect();
    let t0 = DMatrix::from_fn(k * d, cfg.rank, |i, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        0.1 * sd[i] * z
    });
    let mut model = TotalVariabilityModel::new(ubm, t0)?;
    let mut history = Vec::with_capacity(cfg.iters + 1);
    for _ in 0..cfg.iters {
        let acc = e_step(&model, stats)?;
        history.push(acc.objective);
        model = m_step(&model, &acc, ubm)?;
    }
    history.push(model.objective(stats)?);
    Ok(TvFit {
        model,
        objective: history,
    })
}

/// Linear discriminant projection, `y = Vᵗ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaTransform {
    /// `D_in x d`
    projection: DMatrix<f64>,
}

fn group_by_label<L: Ord + Clone>(vectors: &[Vec<f64>], labels: &[L]) -> Result<BTreeMap<L, Vec<usize>>> {
    ensure_dim(vectors.len(), labels.len())?;
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    Ok(groups)
}

impl LdaTransform {
    pub fn from_projection(projection: DMatrix<f64>) -> Self {
        Self { projection }
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn in_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.in_dim(), v.len())?;
        Ok(self.projection.tr_mul(&DVector::from_column_slice(v)).as_slice().to_vec())
    }

    pub fn apply_all(&self, vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        vs.iter().map(|v| self.apply(v)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::with_header(LDA_MAGIC);
        w.len_u32(self.in_dim())?;
        w.len_u32(self.out_dim())?;
        write_row_major(&mut w, &self.projection);
        w.write_to(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::new(&bytes, path);
        r.header(LDA_MAGIC)?;
        let (din, dout) = (r.usize()?, r.usize()?);
        let projection = read_row_major(&mut r, din, dout)?;
        r.finish()?;
        Ok(Self { projection })
    }
}

/// Generalized eigenvectors of the between- and within-class scatters,
/// scaled to unit within-class variance. The within-class scatter is
/// regularized by `ε I`, `ε = 1e-6 · trace / D`, when its smallest
/// eigenvalue falls below `ε`.
pub fn train_lda<L: Ord + Clone>(vectors: &[Vec<f64>], labels: &[L], out_dim: usize) -> Result<LdaTransform> {
    let groups = group_by_label(vectors, labels)?;
    if groups.len() < 2 {
        return Err(Error::invalid("LDA needs at least two classes"));
    }
    if out_dim == 0 || out_dim > groups.len() - 1 {
        return Err(Error::config(
            "lda.out_dim",
            format!("must lie in 1..={} for {} classes", groups.len() - 1, groups.len()),
        ));
    }
    let (mean, total) = mean_and_covariance(vectors)?;
    let dim = mean.len();
    if out_dim > dim {
        return Err(Error::config("lda.out_dim", "exceeds the input dimension"));
    }
    let n = vectors.len() as f64;
    let mut sw = DMatrix::zeros(dim, dim);
    let mut sb = DMatrix::zeros(dim, dim);
    for idx in groups.values() {
        let members: Vec<Vec<f64>> = idx.iter().map(|&i| vectors[i].clone()).collect();
        let (m, c) = mean_and_covariance(&members)?;
        let w = idx.len() as f64 / n;
        sw += c * w;
        let diff = m - &mean;
        sb.ger(w, &diff, &diff, 1.0);
    }
    let mut trace = sw.trace();
    if trace <= 0.0 {
        trace = total.trace();
    }
    if trace <= 0.0 {
        trace = 1e-12 * dim as f64;
    }
    let eps = 1e-6 * trace / dim as f64;
    let (w_vals, _) = sorted_symmetric_eigen(&sw);
    if w_vals[dim - 1] < eps {
        for i in 0..dim {
            sw[(i, i)] += eps;
        }
    }
    let chol = symmetrize(&sw)
        .cholesky()
        .ok_or_else(|| Error::Numerical("within-class scatter is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(dim, dim))
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let m = symmetrize(&(&l_inv * &sb * l_inv.transpose()));
    let (_, u) = sorted_symmetric_eigen(&m);
    let mut proj = l_inv.tr_mul(&u.columns(0, out_dim).into_owned());
    for j in 0..out_dim {
        let mut col = proj.column(j).into_owned();
        fix_sign(&mut col);
        proj.set_column(j, &col);
    }
    Ok(LdaTransform { projection: proj })
}

/// Centring and decorrelation to unit covariance, followed by length
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    mean: DVector<f64>,
    transform: DMatrix<f64>,
}

impl Whitener {
    /// Inverse square root of the training covariance by eigendecomposition.
    /// Eigenvalues are floored at `1e-10 · trace / D`.
    pub fn fit(vectors: &[Vec<f64>]) -> Result<Self> {
        let (mean, cov) = mean_and_covariance(vectors)?;
        let dim = mean.len();
        let floor = (1e-10 * cov.trace() / dim as f64).max(1e-300);
        let (vals, vecs) = sorted_symmetric_eigen(&cov);
        let scale = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.max(floor).sqrt()));
        let transform = symmetrize(&(&vecs * scale * vecs.transpose()));
        Ok(Self { mean, transform })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `transform · (x - mean)` without length normalization.
    pub fn whiten(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.dim(), v.len())?;
        let x = DVector::from_column_slice(v) - &self.mean;
        Ok((&self.transform * x).as_slice().to_vec())
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut w = self.whiten(v)?;
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numerical("cannot length-normalize a zero vector".into()));
        }
        w.iter_mut().for_each(|x| *x /= norm);
        Ok(w)
    }

    pub fn apply_all(&self, vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        vs.iter().map(|v| self.apply(v)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::with_header(WHITEN_MAGIC);
        w.len_u32(self.dim())?;
        w.f64s(self.mean.as_slice());
        write_row_major(&mut w, &self.transform);
        w.write_to(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::new(&bytes, path);
        r.header(WHITEN_MAGIC)?;
        let d = r.usize()?;
        let mean = DVector::from_vec(r.f64s(d)?);
        let transform = read_row_major(&mut r, d, d)?;
        r.finish()?;
        Ok(Self { mean, transform })
    }
}

/// Whitens and length-normalizes every vector.
pub fn whiten_and_length_norm(vectors: &[Vec<f64>], whitener: &Whitener) -> Result<Vec<Vec<f64>>> {
    whitener.apply_all(vectors)
}

/// Arithmetic mean of vectors.
pub fn average(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or_else(|| Error::empty("nothing to average"))?;
    let mut out = vec![0.0; first.len()];
    for v in vectors {
        ensure_dim(out.len(), v.len())?;
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_ubm(k: usize, d: usize, seed: u64) -> DiagGmm {
        let mut r = rng(seed);
        let mut w: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        DiagGmm::new(
            w,
            (0..k * d).map(|_| r.random_range(-2.0..2.0)).collect(),
            (0..k * d).map(|_| r.random_range(0.5..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_component_stats() {
        let ubm = DiagGmm::new(vec![1.0], vec![0.5, -1.0], vec![1.0, 2.0]).unwrap();
        let x = FeatureMatrix::from_rows(&[[1.0, 0.0], [2.0, 1.0], [0.0, -3.0]]).unwrap();
        let s = accumulate_stats(&ubm, &x).unwrap();
        assert!((s.n[0] - 3.0).abs() < 1e-10);
        assert!((s.f[0] - (3.0 - 1.5)).abs() < 1e-10);
        assert!((s.f[1] - (-2.0 + 3.0)).abs() < 1e-10);
        let z = accumulate_stats(&ubm, &FeatureMatrix::empty(2)).unwrap();
        assert_eq!(z, BaumWelchStats::zeros(1, 2));
    }

    #[test]
    fn stats_match_naive_double_loop_and_add_up() {
        let ubm = random_ubm(4, 3, 1);
        let x = ubm.sample(300, &mut rng(2));
        let s = accumulate_stats(&ubm, &x).unwrap();
        let mut n = vec![0.0; 4];
        let mut f = vec![0.0; 12];
        for row in x.iter_rows() {
            let dens: Vec<f64> = (0..4)
                .map(|k| ubm.weights()[k] * crate::gmm::diag_gaussian_log_density(row, ubm.mean(k), ubm.variance(k)).exp())
                .collect();
            let total: f64 = dens.iter().sum();
            for k in 0..4 {
                let g = dens[k] / total;
                n[k] += g;
                for i in 0..3 {
                    f[k * 3 + i] += g * (row[i] - ubm.mean(k)[i]);
                }
            }
        }
        for (a, b) in s.n.iter().zip(&n).chain(s.f.iter().zip(&f)) {
            assert!((a - b).abs() < 1e-9);
        }
        let mask_a: Vec<bool> = (0..300).map(|t| t < 120).collect();
        let mask_b: Vec<bool> = mask_a.iter().map(|m| !m).collect();
        let sa = accumulate_stats(&ubm, &x.select_rows(&mask_a).unwrap()).unwrap();
        let sb = accumulate_stats(&ubm, &x.select_rows(&mask_b).unwrap()).unwrap();
        let sum = sa.add(&sb).unwrap();
        for (a, b) in sum.n.iter().zip(&s.n).chain(sum.f.iter().zip(&s.f)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn random_tv(ubm: &DiagGmm, r: usize, seed: u64) -> TotalVariabilityModel {
        let mut g = rng(seed);
        let t = DMatrix::from_fn(ubm.n_components() * ubm.dim(), r, |_, _| g.random_range(-1.0..1.0));
        TotalVariabilityModel::new(ubm, t).unwrap()
    }

    #[test]
    fn extraction_matches_dense_solve() {
        let ubm = random_ubm(3, 4, 3);
        let tv = random_tv(&ubm, 5, 4);
        let stats = accumulate_stats(&ubm, &ubm.sample(80, &mut rng(5))).unwrap();
        let (k, d) = (3, 4);
        let mut big_n = DMatrix::zeros(k * d, k * d);
        let mut inv_sigma = DMatrix::zeros(k * d, k * d);
        for c in 0..k {
            for i in 0..d {
                big_n[(c * d + i, c * d + i)] = stats.n[c];
                inv_sigma[(c * d + i, c * d + i)] = 1.0 / ubm.variance(c)[i];
            }
        }
        let t = tv.t_matrix();
        let l = DMatrix::identity(5, 5) + t.transpose() * &inv_sigma * &big_n * t;
        let rhs = t.transpose() * &inv_sigma * DVector::from_column_slice(&stats.f);
        let w = l.clone().lu().solve(&rhs).unwrap();
        let got = tv.extract(&stats).unwrap();
        for i in 0..5 {
            assert!((got[i] - w[i]).abs() < 1e-8);
        }
        assert!(l.cholesky().is_some());
        let zero = tv.extract(&BaumWelchStats::zeros(3, 4)).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        assert_eq!(got.len(), tv.rank());
    }

    #[test]
    fn planted_direction_is_recovered_and_em_is_monotone() {
        let d = 6;
        let ubm = DiagGmm::new(vec![1.0], vec![0.0; d], vec![1.0; d]).unwrap();
        let dir = [2.0, -1.0, 0.5, 1.5, 0.0, -2.5];
        let mut g = rng(6);
        let stats: Vec<BaumWelchStats> = (0..200)
            .map(|_| {
                let w: f64 = StandardNormal.sample(&mut g);
                let x = FeatureMatrix::from_fn(30, d, |_, i| {
                    let z: f64 = StandardNormal.sample(&mut g);
                    dir[i] * w + z
                });
                accumulate_stats(&ubm, &x).unwrap()
            })
            .collect();
        let fit = train_total_variability(&ubm, &stats, &TvConfig { rank: 1, iters: 10, seed: 1 }).unwrap();
        let t = fit.model.t_matrix().column(0).into_owned();
        let truth = DVector::from_column_slice(&dir);
        let cos = t.dot(&truth) / (t.norm() * truth.norm());
        assert!(cos.abs() >= 0.99, "cosine {cos}");
        for w in fit.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{:?}", fit.objective);
        }
    }

    #[test]
    fn tv_training_is_deterministic_and_validated() {
        let ubm = random_ubm(3, 2, 7);
        let stats: Vec<BaumWelchStats> = (0..20)
            .map(|s| accumulate_stats(&ubm, &ubm.sample(25, &mut rng(100 + s))).unwrap())
            .collect();
        let cfg = TvConfig { rank: 3, iters: 3, seed: 9 };
        let a = train_total_variability(&ubm, &stats, &cfg).unwrap();
        let b = train_total_variability(&ubm, &stats, &cfg).unwrap();
        assert_eq!(a.model.t_matrix(), b.model.t_matrix());
        assert!(train_total_variability(&ubm, &stats, &TvConfig { rank: 7, ..cfg.clone() }).is_err());
        assert!(train_total_variability(&ubm, &[], &cfg).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.stvm");
        a.model.write(&p).unwrap();
        let back = TotalVariabilityModel::read(&p, &ubm).unwrap();
        assert_eq!(back.t_matrix(), a.model.t_matrix());
        assert!(TotalVariabilityModel::read(&p, &random_ubm(2, 2, 1)).is_err());
    }

    #[test]
    fn lda_matches_fisher_direction() {
        let mut g = rng(8);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        let chol = cov.clone().cholesky().unwrap();
        let means = [DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![2.0, 1.0])];
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for (c, m) in means.iter().enumerate() {
            for _ in 0..500 {
                let z = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut g));
                vectors.push((m + chol.l() * z).as_slice().to_vec());
                labels.push(c);
            }
        }
        let lda = train_lda(&vectors, &labels, 1).unwrap();
        let groups = group_by_label(&vectors, &labels).unwrap();
        let mut sw = DMatrix::zeros(2, 2);
        let mut ms = Vec::new();
        for idx in groups.values() {
            let members: Vec<Vec<f64>> = idx.iter().map(|&i| vectors[i].clone()).collect();
            let (m, c) = mean_and_covariance(&members).unwrap();
            sw += c;
            ms.push(m);
        }
        let fisher = sw.lu().solve(&(&ms[1] - &ms[0])).unwrap();
        let p = lda.projection().column(0).into_owned();
        let cos = p.dot(&fisher) / (p.norm() * fisher.norm());
        assert!(cos.abs() >= 0.999, "{cos}");
        assert!(train_lda(&vectors, &labels, 2).is_err());
        assert!(train_lda(&vectors, &vec![0; vectors.len()], 1).is_err());
    }

    #[test]
    fn lda_handles_degenerate_within_scatter() {
        let vectors = vec![vec![1.0, 2.0, 3.0]; 4]
            .into_iter()
            .chain(vec![vec![-1.0, 0.0, 1.0]; 4])
            .chain(vec![vec![0.0, 5.0, -1.0]; 4])
            .collect::<Vec<_>>();
        let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let lda = train_lda(&vectors, &labels, 2).unwrap();
        assert!(lda.projection().iter().all(|v| v.is_finite()));
        let same = vec![vec![1.0, 1.0]; 6];
        let lda = train_lda(&same, &[0, 0, 0, 1, 1, 1], 1).unwrap();
        assert!(lda.projection().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lda_is_rotation_equivariant_up_to_sign() {
        let mut g = rng(10);
        let vectors: Vec<Vec<f64>> = (0..90)
            .map(|i| {
                let c = (i % 3) as f64;
                (0..3).map(|d| c * (d as f64 + 1.0) + g.random_range(-1.0..1.0)).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..90).map(|i| i % 3).collect();
        let (a, b) = (0.7f64, 0.3f64);
        let rot = DMatrix::from_row_slice(3, 3, &[a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0])
            * DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, b.cos(), -b.sin(), 0.0, b.sin(), b.cos()]);
        let rotated: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| (&rot * DVector::from_column_slice(v)).as_slice().to_vec())
            .collect();
        let p1 = train_lda(&vectors, &labels, 2).unwrap();
        let p2 = train_lda(&rotated, &labels, 2).unwrap();
        for (v, r) in vectors.iter().zip(&rotated) {
            let (y1, y2) = (p1.apply(v).unwrap(), p2.apply(r).unwrap());
            for j in 0..2 {
                assert!((y1[j].abs() - y2[j].abs()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn whitener_identity_covariance_and_unit_norm() {
        let mut g = rng(11);
        let vectors: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let z: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut g)).collect();
                vec![3.0 * z[0] + 1.0, z[0] + z[1] - 2.0, 0.5 * z[2] + z[1]]
            })
            .collect();
        let wh = Whitener::fit(&vectors).unwrap();
        let white: Vec<Vec<f64>> = vectors.iter().map(|v| wh.whiten(v).unwrap()).collect();
        let (_, cov) = mean_and_covariance(&white).unwrap();
        assert!((cov - DMatrix::identity(3, 3)).abs().max() < 1e-6);
        for v in whiten_and_length_norm(&vectors, &wh).unwrap() {
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-10);
        }
        let (mean, _) = mean_and_covariance(&vectors).unwrap();
        assert!(wh.apply(mean.as_slice()).is_err());

        let dir = tempfile::tempdir().unwrap();
        wh.write(&dir.path().join("w")).unwrap();
        assert_eq!(Whitener::read(&dir.path().join("w")).unwrap(), wh);
        let lda = train_lda(&vectors, &(0..400).map(|i| i % 2).collect::<Vec<_>>(), 1).unwrap();
        lda.write(&dir.path().join("l")).unwrap();
        assert_eq!(LdaTransform::read(&dir.path().join("l")).unwrap(), lda);
    }

    proptest! {
        #[test]
        fn posterior_precision_is_spd(seed in 0u64..500, frames in 0usize..40) {
            let ubm = random_ubm(3, 2, seed);
            let tv = random_tv(&ubm, 4, seed + 1);
            let s = accumulate_stats(&ubm, &ubm.sample(frames, &mut rng(seed + 2))).unwrap();
            let l = tv.precision(&s);
            prop_assert!((&l - l.transpose()).abs().max() < 1e-12);
            prop_assert!(l.cholesky().is_some());
        }
    }
}
