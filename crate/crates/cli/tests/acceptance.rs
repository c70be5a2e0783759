//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Oracles here are written independently of the library code.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sdsv::bnfeat::{MlpModel, Tap};
use sdsv::fusion::{align_columns, FrozenFusion};
use sdsv::gmm::{map_adapt, merge_gmms, train_gmm_em, DiagGmm, GmmTrainConfig, MapConfig};
use sdsv::ivector::{accumulate_stats, train_total_variability, BaumWelchStats, TotalVariabilityModel, TvConfig};
use sdsv::metrics::{compute_eer, compute_min_dcf, condition_report, read_scores, Condition, ConditionReport, DcfParams, ScoreLine};
use sdsv::plda::{train_plda, PldaConfig, PldaModel};
use sdsv::trials::read_trials;
use sdsv::FeatureMatrix;

const BIN: &str = env!("CARGO_BIN_EXE_sdsv");

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

// ---------------------------------------------------------------- 1

struct Sweep {
    thr: f64,
    p_miss: f64,
    p_fa: f64,
}

/// Brute-force counts at every distinct score and at +inf.
fn sweep(scores: &[f64], is_target: &[bool]) -> Vec<Sweep> {
    let mut thrs: Vec<f64> = scores.to_vec();
    thrs.sort_by(f64::total_cmp);
    thrs.dedup();
    thrs.push(f64::INFINITY);
    let nt = is_target.iter().filter(|t| **t).count() as f64;
    let ni = is_target.len() as f64 - nt;
    thrs.into_iter()
        .map(|thr| {
            let miss = scores.iter().zip(is_target).filter(|(s, t)| **t && **s < thr).count() as f64;
            let fa = scores.iter().zip(is_target).filter(|(s, t)| !**t && **s >= thr).count() as f64;
            Sweep {
                thr,
                p_miss: miss / nt,
                p_fa: fa / ni,
            }
        })
        .collect()
}

fn oracle_eer(scores: &[f64], is_target: &[bool]) -> (f64, f64) {
    let pts = sweep(scores, is_target);
    let top = pts[pts.len() - 2].thr + 1.0;
    let thr = |p: &Sweep| if p.thr.is_infinite() { top } else { p.thr };
    let i = pts.iter().position(|p| p.p_miss >= p.p_fa).unwrap();
    if i == 0 {
        return (pts[0].p_miss, pts[0].thr);
    }
    let (a, b) = (&pts[i - 1], &pts[i]);
    let t = (a.p_fa - a.p_miss) / ((a.p_fa - a.p_miss) + (b.p_miss - b.p_fa));
    (a.p_miss + t * (b.p_miss - a.p_miss), thr(a) + t * (thr(b) - thr(a)))
}

fn oracle_min_dcf(scores: &[f64], is_target: &[bool], p: &DcfParams) -> f64 {
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    sweep(scores, is_target)
        .iter()
        .map(|s| (p.c_miss * p.p_target * s.p_miss + p.c_fa * (1.0 - p.p_target) * s.p_fa) / norm)
        .fold(f64::INFINITY, f64::min)
}

fn criterion_metrics(rep: &mut Report) {
    let start = Instant::now();
    let params = DcfParams::default();
    let mut worst = 0.0f64;
    for seed in 0..1000u64 {
        let mut r = rng(seed);
        let nt = r.random_range(1..=50);
        let ni = r.random_range(1..=50);
        let coarse = seed % 3 == 0;
        let draw = |shift: f64, r: &mut ChaCha8Rng| {
            let v = shift + normal(r);
            if coarse {
                (v * 2.0).round() / 2.0
            } else {
                v
            }
        };
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..nt {
            scores.push(draw(1.0, &mut r));
            labels.push(true);
        }
        for _ in 0..ni {
            scores.push(draw(0.0, &mut r));
            labels.push(false);
        }
        let (eer, thr) = compute_eer(&scores, &labels).unwrap();
        let (oe, ot) = oracle_eer(&scores, &labels);
        let (dcf, _) = compute_min_dcf(&scores, &labels, &params).unwrap();
        let od = oracle_min_dcf(&scores, &labels, &params);
        worst = worst.max((eer - oe).abs()).max((thr - ot).abs()).max((dcf - od).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    rep.line(1, "EER/minDCF vs threshold-sweep oracle, 1000 sets", worst <= 1e-12, format!("max deviation {worst:.2e}"));
    rep.line(1, "metric oracle runtime < 10 s", secs < 10.0, format!("{secs:.2} s"));
}

// ---------------------------------------------------------------- 2

fn random_gmm(k: usize, d: usize, r: &mut ChaCha8Rng) -> DiagGmm {
    let mut w: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    DiagGmm::new(
        w,
        (0..k * d).map(|_| r.random_range(-3.0..3.0)).collect(),
        (0..k * d).map(|_| r.random_range(0.3..2.0)).collect(),
    )
    .unwrap()
}

fn diag_density(x: &[f64], m: &[f64], v: &[f64]) -> f64 {
    x.iter()
        .zip(m)
        .zip(v)
        .map(|((x, m), v)| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
        .product()
}

fn mixture_density(g: &DiagGmm, x: &[f64]) -> f64 {
    (0..g.n_components())
        .map(|k| g.weights()[k] * diag_density(x, g.mean(k), g.variance(k)))
        .sum()
}

fn criterion_gmm(rep: &mut Report) {
    let mut non_monotone = 0;
    let mut worst_drop = 0.0f64;
    for seed in 0..100u64 {
        let mut r = rng(500 + seed);
        let k = r.random_range(2..=4);
        let d = r.random_range(1..=4);
        let truth = random_gmm(k, d, &mut r);
        let data = truth.sample(300, &mut r);
        let cfg = GmmTrainConfig {
            components: k,
            em_iters: 15,
            seed,
            ..GmmTrainConfig::default()
        };
        let fit = train_gmm_em(&data, &cfg).unwrap();
        for w in fit.log_likelihood.windows(2) {
            let drop = w[0] - w[1];
            if drop > 1e-9 * w[0].abs().max(1.0) {
                non_monotone += 1;
                worst_drop = worst_drop.max(drop);
            }
        }
    }
    rep.line(2, "EM log-likelihood monotone on 100 datasets", non_monotone == 0, format!("{non_monotone} decreases, worst {worst_drop:.2e}"));

    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(700 + seed);
        let d = 3;
        let n = 50 + seed as usize;
        let data = FeatureMatrix::from_fn(n, d, |_, j| 2.0 * normal(&mut r) + j as f64);
        let fit = train_gmm_em(&data, &GmmTrainConfig { components: 1, em_iters: 5, seed, ..GmmTrainConfig::default() }).unwrap();
        for j in 0..d {
            let col = data.column(j);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            worst = worst.max((fit.model.mean(0)[j] - mean).abs()).max((fit.model.variance(0)[j] - var).abs());
        }
        worst = worst.max((fit.model.weights()[0] - 1.0).abs());
    }
    rep.line(2, "K=1 EM equals sample mean and variance", worst <= 1e-10, format!("max deviation {worst:.2e}"));

    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(900 + seed);
        let prior = random_gmm(1, 4, &mut r);
        let n = r.random_range(1..40);
        let data = FeatureMatrix::from_fn(n, 4, |_, _| normal(&mut r) + 1.0);
        let relevance = r.random_range(0.5..16.0);
        let cfg = MapConfig { relevance, iterations: 1, means_only: true };
        let adapted = map_adapt(&prior, &data, &cfg).unwrap();
        for j in 0..4 {
            let sum: f64 = data.column(j).iter().sum();
            let expect = (sum + relevance * prior.mean(0)[j]) / (n as f64 + relevance);
            worst = worst.max((adapted.mean(0)[j] - expect).abs());
        }
    }
    rep.line(2, "MAP K=1 equals (sum x + r mu)/(n + r)", worst <= 1e-10, format!("max deviation {worst:.2e}"));

    let mut r = rng(1234);
    let parts: Vec<DiagGmm> = (0..4).map(|i| random_gmm(2 + i % 2, 3, &mut r)).collect();
    let merged = merge_gmms(&parts).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..3).map(|_| 2.0 * normal(&mut r)).collect();
        let expect = parts.iter().map(|g| mixture_density(g, &x)).sum::<f64>() / parts.len() as f64;
        worst = worst.max((mixture_density(&merged, &x) - expect).abs() / expect.max(1e-300));
        worst = worst.max((merged.density(&x) - expect).abs() / expect.max(1e-300));
    }
    rep.line(2, "merged UBM density is the average of its sources", worst <= 1e-9, format!("max relative deviation {worst:.2e}"));
}

// ---------------------------------------------------------------- 3

fn criterion_ivector(rep: &mut Report) {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(2000 + seed);
        let (k, d, rank) = (3, 4, 5);
        let ubm = random_gmm(k, d, &mut r);
        let t = DMatrix::from_fn(k * d, rank, |_, _| 0.5 * normal(&mut r));
        let tv = TotalVariabilityModel::new(&ubm, t.clone()).unwrap();
        let frames = ubm.sample(20 + 5 * seed as usize, &mut r);
        // Independent statistics: posteriors from the closed-form densities.
        let mut n = vec![0.0; k];
        let mut f = vec![0.0; k * d];
        for x in frames.iter_rows() {
            let parts: Vec<f64> = (0..k).map(|c| ubm.weights()[c] * diag_density(x, ubm.mean(c), ubm.variance(c))).collect();
            let total: f64 = parts.iter().sum();
            for c in 0..k {
                let g = parts[c] / total;
                n[c] += g;
                for j in 0..d {
                    f[c * d + j] += g * (x[j] - ubm.mean(c)[j]);
                }
            }
        }
        let mut prec = DMatrix::identity(rank, rank);
        let mut rhs = DVector::zeros(rank);
        for c in 0..k {
            for j in 0..d {
                let row = t.row(c * d + j);
                let iv = 1.0 / ubm.variance(c)[j];
                prec += row.transpose() * row * (n[c] * iv);
                rhs += row.transpose() * (f[c * d + j] * iv);
            }
        }
        let w = prec.lu().solve(&rhs).unwrap();
        let got = tv.extract(&BaumWelchStats { n, f }).unwrap();
        let lib = tv.extract(&accumulate_stats(&ubm, &frames).unwrap()).unwrap();
        for i in 0..rank {
            worst = worst.max((got[i] - w[i]).abs()).max((lib[i] - w[i]).abs());
        }
    }
    rep.line(3, "i-vector extraction vs dense linear solve", worst <= 1e-8, format!("max deviation {worst:.2e}"));

    let d = 6;
    let ubm = DiagGmm::new(vec![1.0], vec![0.0; d], vec![1.0; d]).unwrap();
    let dir = [1.0, 2.0, -1.5, 0.5, -0.5, 1.0];
    let mut r = rng(3000);
    let stats: Vec<BaumWelchStats> = (0..300)
        .map(|_| {
            let w = normal(&mut r);
            let x = FeatureMatrix::from_fn(25, d, |_, j| dir[j] * w + normal(&mut r));
            accumulate_stats(&ubm, &x).unwrap()
        })
        .collect();
    let fit = train_total_variability(&ubm, &stats, &TvConfig { rank: 1, iters: 10, seed: 3 }).unwrap();
    let col = fit.model.t_matrix().column(0).into_owned();
    let truth = DVector::from_column_slice(&dir);
    let cos = (col.dot(&truth) / (col.norm() * truth.norm())).abs();
    rep.line(3, "planted single factor recovered", cos >= 0.99, format!("|cosine| {cos:.4}"));

    let mut r = rng(3100);
    let ubm = random_gmm(4, 3, &mut r);
    let a = ubm.sample(37, &mut r);
    let b = ubm.sample(23, &mut r);
    let both = FeatureMatrix::vstack([&a, &b]).unwrap();
    let sa = accumulate_stats(&ubm, &a).unwrap();
    let sb = accumulate_stats(&ubm, &b).unwrap();
    let sab = accumulate_stats(&ubm, &both).unwrap();
    let worst = sab
        .n
        .iter()
        .zip(sa.n.iter().zip(&sb.n))
        .chain(sab.f.iter().zip(sa.f.iter().zip(&sb.f)))
        .map(|(t, (x, y))| (t - (x + y)).abs())
        .fold(0.0f64, f64::max);
    rep.line(3, "Baum-Welch statistics are additive over frames", worst <= 1e-9, format!("max deviation {worst:.2e}"));
}

// ---------------------------------------------------------------- 4

fn random_spd(d: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(r));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

fn gauss_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let chol = cov.clone().cholesky().unwrap();
    let diff = x - mean;
    let sol = chol.solve(&diff);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + diff.dot(&sol))
}

fn frob(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn criterion_plda(rep: &mut Report) {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut r = rng(4000 + seed);
        let d = 3;
        let mu = DVector::from_fn(d, |_, _| normal(&mut r));
        let b = random_spd(d, &mut r);
        let w = random_spd(d, &mut r);
        let model = PldaModel::new(mu.clone(), b.clone(), w.clone()).unwrap();
        let e = DVector::from_fn(d, |_, _| 2.0 * normal(&mut r));
        let t = DVector::from_fn(d, |_, _| 2.0 * normal(&mut r));
        let total = &b + &w;
        let mut joint = DMatrix::zeros(2 * d, 2 * d);
        joint.view_mut((0, 0), (d, d)).copy_from(&total);
        joint.view_mut((d, d), (d, d)).copy_from(&total);
        joint.view_mut((0, d), (d, d)).copy_from(&b);
        joint.view_mut((d, 0), (d, d)).copy_from(&b);
        let mut et = DVector::zeros(2 * d);
        et.rows_mut(0, d).copy_from(&e);
        et.rows_mut(d, d).copy_from(&t);
        let mut mm = DVector::zeros(2 * d);
        mm.rows_mut(0, d).copy_from(&mu);
        mm.rows_mut(d, d).copy_from(&mu);
        let oracle = gauss_log_density(&et, &mm, &joint) - gauss_log_density(&e, &mu, &total) - gauss_log_density(&t, &mu, &total);
        let got = model.score(e.as_slice(), t.as_slice()).unwrap();
        worst = worst.max((got - oracle).abs());
    }
    rep.line(4, "PLDA score vs joint-Gaussian oracle (D=3)", worst <= 1e-8, format!("max deviation {worst:.2e}"));

    let d = 4;
    let mut r = rng(4100);
    let b_true = random_spd(d, &mut r);
    let w_true = random_spd(d, &mut r) * 0.5;
    let lb = b_true.clone().cholesky().unwrap().l();
    let lw = w_true.clone().cholesky().unwrap().l();
    let (mut xs, mut ls) = (Vec::new(), Vec::new());
    for c in 0..1000usize {
        let y = &lb * DVector::from_fn(d, |_, _| normal(&mut r));
        for _ in 0..20 {
            let x = &y + &lw * DVector::from_fn(d, |_, _| normal(&mut r));
            xs.push(x.as_slice().to_vec());
            ls.push(c);
        }
    }
    let fit = train_plda(&xs, &ls, &PldaConfig { iters: 20, ..PldaConfig::default() }).unwrap();
    let eb = frob(&(fit.model.between() - &b_true)) / frob(&b_true);
    let ew = frob(&(fit.model.within() - &w_true)) / frob(&w_true);
    rep.line(4, "planted between/within covariances recovered", eb <= 0.1 && ew <= 0.1, format!("relative Frobenius error B {eb:.4}, W {ew:.4}"));
}

// ---------------------------------------------------------------- 5

fn criterion_mlp(rep: &mut Report) {
    let mut r = rng(5000);
    let mut model = MlpModel::random(&[3, 4, 3], &mut r).unwrap();
    let mut p = model.params();
    p.iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * ((i as f64) * 0.7).sin());
    model.set_params(&p).unwrap();
    let inputs = FeatureMatrix::from_fn(7, 3, |_, _| normal(&mut r));
    let labels: Vec<usize> = (0..7).map(|i| i % 3).collect();
    let (_, grad) = model.loss_and_gradient(&inputs, &labels).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let mut probe = model.clone();
        let mut q = p.clone();
        q[i] = p[i] + h;
        probe.set_params(&q).unwrap();
        let up = probe.loss_and_gradient(&inputs, &labels).unwrap().0;
        q[i] = p[i] - h;
        probe.set_params(&q).unwrap();
        let down = probe.loss_and_gradient(&inputs, &labels).unwrap().0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    let _ = model.hidden_output(&inputs, 1, Tap::PostActivation).unwrap();
    rep.line(5, "3-4-3 MLP gradient vs central differences", worst < 1e-4, format!("{} params, max relative error {worst:.2e}", p.len()));
}

// ---------------------------------------------------------------- 6, 7, 8

fn desk(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/desk").join(format!("{name}.toml")).display().to_string()
}

fn run(dir: &Path, args: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(BIN);
    cmd.args(args).current_dir(dir);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("SDSV_")) {
        cmd.env_remove(k);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`sdsv {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn system_args<'a>(preset: &'a str, overlay: &'a str, work: &'a str, jobs: &'a str) -> Vec<&'a str> {
    let mut v = vec!["--preset", preset, "--work", work, "--jobs", jobs];
    if !overlay.is_empty() {
        v.extend(["--config", overlay]);
    }
    v
}

fn with<'a>(base: &[&'a str], rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = base.to_vec();
    v.extend_from_slice(rest);
    v
}

/// PBM system: bottleneck network, feature dump, UBM, PBMs, enrollment and
/// scoring with an extra UV score file.
fn pbm_system(dir: &Path, preset: &str, work: &str, jobs: &str, out: &str, uv_out: &str, labels: bool) -> Result<(), String> {
    let overlay = desk(preset);
    let o = system_args(preset, &overlay, work, jobs);
    let feats = format!("{work}/feats");
    let fman = format!("{feats}/manifest.txt");
    if labels {
        run(dir, &with(&o, &["train-bn", "--train", "dev/train.txt", "--frame-labels", "corpus/frame_labels.txt"]))?;
    } else {
        run(dir, &with(&o, &["train-bn", "--train", "dev/train.txt"]))?;
    }
    run(dir, &with(&o, &["features", "--manifest", "corpus/manifest.txt", "--out", &feats]))?;
    run(dir, &with(&o, &["train-ubm", "--train", "dev/train.txt"]))?;
    run(dir, &with(&o, &["train-pbm", "--train", "dev/train.txt"]))?;
    run(dir, &with(&o, &["enroll", "--models", "dev/models.txt", "--manifest", &fman]))?;
    run(dir, &with(&o, &["score", "--models", "dev/models.txt", "--trials", "dev/trials.txt", "--manifest", &fman, "--out", out, "--uv-out", uv_out]))
}

fn ivector_uv_system(dir: &Path, work: &str, jobs: &str, out: &str, overlay: &str) -> Result<(), String> {
    let o = system_args("S1", overlay, work, jobs);
    run(dir, &with(&o, &["train-ubm", "--train", "dev/train.txt"]))?;
    run(dir, &with(&o, &["train-tv", "--train", "dev/train.txt", "--export", "corpus/manifest.txt"]))?;
    run(dir, &with(&o, &["train-plda", "--train", "dev/train.txt"]))?;
    run(dir, &with(&o, &["score", "--models", "dev/models.txt", "--trials", "dev/trials.txt", "--manifest", "corpus/manifest.txt", "--out", out]))
}

fn gmm_ubm_system(dir: &Path, preset: &str, work: &str, jobs: &str, out: &str) -> Result<(), String> {
    let overlay = desk(preset);
    let o = system_args(preset, &overlay, work, jobs);
    run(dir, &with(&o, &["train-ubm", "--train", "dev/train.txt"]))?;
    run(dir, &with(&o, &["enroll", "--models", "dev/models.txt", "--manifest", "corpus/manifest.txt"]))?;
    run(dir, &with(&o, &["score", "--models", "dev/models.txt", "--trials", "dev/trials.txt", "--manifest", "corpus/manifest.txt", "--out", out]))
}

fn plda_system(dir: &Path, work: &str, jobs: &str, ivectors: &str, out: &str) -> Result<(), String> {
    let ids = format!("{ivectors}/ivectors.ids");
    let mat = format!("{ivectors}/ivectors.sdsv");
    let o = system_args("S2", "", work, jobs);
    let emb = ["--embedding-ids", ids.as_str(), "--embeddings", mat.as_str()];
    run(dir, &with(&with(&o, &["train-plda", "--train", "dev/train.txt"]), &emb))?;
    run(dir, &with(&with(&o, &["enroll", "--models", "dev/models.txt"]), &emb))?;
    run(dir, &with(&with(&o, &["score", "--models", "dev/models.txt", "--trials", "dev/trials.txt", "--out", out]), &emb))
}

fn report_of(dir: &Path, scores: &str) -> ConditionReport {
    let trials = read_trials(&dir.join("dev/trials.txt")).unwrap();
    let keys: Vec<(String, String)> = trials.iter().map(|t| (t.model_id.clone(), t.test_utt.clone())).collect();
    let col = align_columns(&[read_scores(&dir.join(scores)).unwrap()], &keys).unwrap().remove(0);
    let conds: Vec<Condition> = trials.iter().map(|t| t.condition).collect();
    condition_report(&col, &conds, &DcfParams::default()).unwrap()
}

fn eer(r: &ConditionReport, label: &str) -> f64 {
    r.get(label).map_or(f64::NAN, |m| m.eer)
}

fn criterion_end_to_end(rep: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let start = Instant::now();
    let setup = run(dir, &["synth", "--out", "corpus", "--seed", "1"])
        .and_then(|_| run(dir, &["dev-split", "--manifest", "corpus/manifest.txt", "--out", "dev", "--speakers", "10", "--seed", "3"]));
    let s6 = setup.clone().and_then(|_| pbm_system(dir, "S6", "w6", "1", "s6.txt", "s6_uv.txt", true));
    let s1 = setup.clone().and_then(|_| ivector_uv_system(dir, "w1", "1", "s1.txt", &desk("S1")));
    let secs = start.elapsed().as_secs_f64();
    match (&s6, &s1) {
        (Ok(()), Ok(())) => {
            let r6 = report_of(dir, "s6.txt");
            let r1 = report_of(dir, "s1.txt");
            print!("{}", r6.table("S6 (PBM, phone bottleneck)"));
            print!("{}", r1.table("S1 (i-vector UV)"));
            let pooled = eer(&r6, "Pooled");
            rep.line(6, "S6 pooled EER <= 5%", pooled <= 0.05, format!("{:.2}%", 100.0 * pooled));
            let (tw, ic, iw) = (eer(&r6, "TW"), eer(&r6, "IC"), eer(&r6, "IW"));
            rep.line(6, "S6 TW and IW EER below IC EER", tw < ic && iw < ic, format!("TW {:.2}%, IW {:.2}%, IC {:.2}%", 100.0 * tw, 100.0 * iw, 100.0 * ic));
            let (tw, ic, iw) = (eer(&r1, "TW"), eer(&r1, "IC"), eer(&r1, "IW"));
            rep.line(6, "S1 IC EER within [40%, 60%]", (0.40..=0.60).contains(&ic), format!("{:.2}%", 100.0 * ic));
            rep.line(6, "S1 TW and IW EER <= 2%", tw <= 0.02 && iw <= 0.02, format!("TW {:.2}%, IW {:.2}%", 100.0 * tw, 100.0 * iw));
            rep.line(6, "S6 + S1 end-to-end runtime < 10 min", secs < 600.0, format!("{secs:.0} s"));
        }
        _ => {
            let msg = s6.err().or(s1.err()).unwrap_or_default();
            rep.line(6, "end-to-end S6/S1 pipelines", false, msg);
            rep.line(7, "primary fusion", false, "skipped: subsystems unavailable".into());
            return;
        }
    }

    let rest = pbm_system(dir, "S7", "w7", "1", "s7.txt", "s7_uv.txt", false)
        .and_then(|_| gmm_ubm_system(dir, "S3", "w3", "1", "s3.txt"))
        .and_then(|_| gmm_ubm_system(dir, "S4", "w4", "1", "s4.txt"))
        .and_then(|_| gmm_ubm_system(dir, "S5", "w5", "1", "s5.txt"))
        .and_then(|_| plda_system(dir, "w2", "1", "w1", "s2.txt"));
    let recipe = "trials = \"dev/trials.txt\"\n\n[uv]\nsystems = [\"s1.txt\", \"s6_uv.txt\", \"s7_uv.txt\"]\n\n[asv]\nsystems = [\"s2.txt\", \"s3.txt\", \"s4.txt\", \"s5.txt\", \"s6.txt\", \"s7.txt\"]\n";
    std::fs::write(dir.join("primary.toml"), recipe).unwrap();
    let fused = rest.and_then(|_| {
        run(dir, &["fuse", "--recipe", "primary.toml", "--out", "primary.txt", "--frozen-out", "frozen.toml", "--uv-out", "primary_uv.txt"])
    });
    if let Err(e) = fused {
        rep.line(7, "primary fusion", false, e);
        return;
    }
    let frozen = FrozenFusion::read(&dir.join("frozen.toml")).unwrap();
    let thr = frozen.uv_threshold.unwrap_or(f64::NAN);
    let uv = read_scores(&dir.join("primary_uv.txt")).unwrap();
    let out = read_scores(&dir.join("primary.txt")).unwrap();
    let trials = read_trials(&dir.join("dev/trials.txt")).unwrap();
    let keys: Vec<(String, String)> = trials.iter().map(|t| (t.model_id.clone(), t.test_utt.clone())).collect();
    let asv_files: Vec<Vec<ScoreLine>> = ["s2", "s3", "s4", "s5", "s6", "s7"]
        .iter()
        .map(|s| read_scores(&dir.join(format!("{s}.txt"))).unwrap())
        .collect();
    let asv_fused = frozen.asv.apply(&align_columns(&asv_files, &keys).unwrap()).unwrap();
    let uv_files: Vec<Vec<ScoreLine>> = ["s1", "s6_uv", "s7_uv"]
        .iter()
        .map(|s| read_scores(&dir.join(format!("{s}.txt"))).unwrap())
        .collect();
    let uv_stage = frozen.uv.as_ref().expect("recipe has a UV stage");
    let uv_col = uv_stage.apply(&align_columns(&uv_files, &keys).unwrap()).unwrap();
    let printed = align_columns(&[uv], &keys).unwrap().remove(0);
    let print_gap = uv_col.iter().zip(&printed).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    let out_col = align_columns(&[out], &keys).unwrap().remove(0);
    let phrase_ok: Vec<bool> = trials.iter().map(|t| matches!(t.condition, Condition::TC | Condition::IC)).collect();
    let (_, dev_thr) = compute_eer(&uv_col, &phrase_ok).unwrap();
    let mut floored = 0;
    let mut bad = 0;
    for i in 0..keys.len() {
        let ok = if uv_col[i] < thr {
            floored += 1;
            out_col[i] == -100.0
        } else {
            (out_col[i] - asv_fused[i]).abs() <= 1e-6 * (1.0 + asv_fused[i].abs())
        };
        if !ok {
            bad += 1;
            if bad <= 5 {
                println!("  cascade violation {:?}: uv {:.9} out {} asv {:.6}", keys[i], uv_col[i], out_col[i], asv_fused[i]);
            }
        }
    }
    rep.line(
        7,
        "cascade floors exactly -100 below the dev UV EER threshold",
        bad == 0 && floored > 0 && (dev_thr - thr).abs() <= 1e-9,
        format!("{floored} floored, {bad} violations, threshold {thr:.6} (recomputed {dev_thr:.6}, printed UV within {print_gap:.1e})"),
    );
    let singles: Vec<(String, f64)> = ["s2", "s3", "s4", "s5", "s6", "s7"]
        .iter()
        .map(|s| (s.to_string(), report_of(dir, &format!("{s}.txt")).get("Pooled").unwrap().min_dcf))
        .collect();
    let primary = report_of(dir, "primary.txt");
    print!("{}", primary.table("Primary (UV cascade over ASV fusion)"));
    let best = singles.iter().cloned().fold((String::new(), f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let fused_dcf = primary.get("Pooled").unwrap().min_dcf;
    rep.line(
        7,
        "fused pooled minDCF <= best single subsystem",
        fused_dcf <= best.1,
        format!("fused {fused_dcf:.4}, best single {} {:.4}", best.0, best.1),
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    if root.exists() {
        walk(root, root, &mut out);
    }
    out
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let (ta, tb) = (tree(a), tree(b));
    if ta.keys().ne(tb.keys()) {
        return Err(format!("{} and {} hold different files", a.display(), b.display()));
    }
    for (k, v) in &ta {
        if tb[k] != *v {
            return Err(format!("{} differs", k.display()));
        }
    }
    Ok(ta.len())
}

fn criterion_determinism(rep: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let det = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/desk/determinism.toml").display().to_string();
    let mut compared = 0;
    let result = (|| -> Result<(), String> {
        for jobs in ["1", "4"] {
            run(dir, &["--jobs", jobs, "synth", "--out", &format!("corpus{jobs}"), "--speakers", "5", "--utts", "5", "--duration", "0.5", "--seed", "8"])?;
            run(dir, &["--jobs", jobs, "dev-split", "--manifest", "corpus1/manifest.txt", "--out", &format!("dev{jobs}"), "--speakers", "2", "--seed", "2"])?;
        }
        compared += same_tree(&dir.join("corpus1"), &dir.join("corpus4"))?;
        compared += same_tree(&dir.join("dev1"), &dir.join("dev4"))?;
        std::fs::rename(dir.join("corpus1"), dir.join("corpus")).map_err(|e| e.to_string())?;
        std::fs::remove_dir_all(dir.join("dev4")).map_err(|e| e.to_string())?;
        // dev1 paths point at corpus1; rebuild against the renamed corpus.
        std::fs::remove_dir_all(dir.join("dev1")).map_err(|e| e.to_string())?;
        run(dir, &["dev-split", "--manifest", "corpus/manifest.txt", "--out", "dev", "--speakers", "2", "--seed", "2"])?;
        for jobs in ["1", "4"] {
            let w = |s: &str| format!("j{jobs}/{s}");
            let o6: Vec<String> = vec!["--config".into(), desk("S6"), "--config".into(), det.clone()];
            let o6: Vec<&str> = o6.iter().map(String::as_str).collect();
            let base = |preset: &'static str, work: String| -> Vec<String> {
                vec!["--preset".into(), preset.into(), "--work".into(), work, "--jobs".into(), jobs.into()]
            };
            let run_s = |args: Vec<String>, extra: &[&str], tail: &[&str]| -> Result<(), String> {
                let mut v: Vec<&str> = args.iter().map(String::as_str).collect();
                v.extend_from_slice(extra);
                v.extend_from_slice(tail);
                run(dir, &v)
            };
            std::fs::create_dir_all(dir.join(format!("j{jobs}"))).map_err(|e| e.to_string())?;
            let feats = w("w6/feats");
            let fman = format!("{feats}/manifest.txt");
            let b6 = || base("S6", w("w6"));
            run_s(b6(), &o6, &["train-bn", "--train", "dev/train.txt", "--frame-labels", "corpus/frame_labels.txt"])?;
            run_s(b6(), &o6, &["features", "--manifest", "corpus/manifest.txt", "--out", &feats])?;
            run_s(b6(), &o6, &["train-ubm", "--train", "dev/train.txt"])?;
            run_s(b6(), &o6, &["train-pbm", "--train", "dev/train.txt"])?;
            run_s(b6(), &o6, &["enroll", "--models", "dev/models.txt", "--manifest", &fman])?;
            let (s6, u6) = (w("s6.txt"), w("s6_uv.txt"));
            run_s(b6(), &o6, &["score", "--models", "dev/models.txt", "--trials", "dev/trials.txt", "--manifest", &fman, "--out", &s6, "--uv-out", &u6])?;

            let o1: Vec<String> = vec!["--config".into(), desk("S1"), "--config".into(), det.clone()];
            let o1: Vec<&str> = o1.iter().map(String::as_str).collect();
            let b1 = || base("S1", w("w1"));
            run_s(b1(), &o1, &["train-ubm", "--train", "dev/train.txt"])?;
            run_s(b1(), &o1, &["train-tv", "--train", "dev/train.txt", "--export", "corpus/manifest.txt"])?;
            run_s(b1(), &o1, &["train-plda", "--train", "dev/train.txt"])?;
            let s1 = w("s1.txt");
            run_s(b1(), &o1, &["score", "--models", "dev/models.txt", "--trials", "dev/trials.txt", "--manifest", "corpus/manifest.txt", "--out", &s1])?;

            let o3: Vec<String> = vec!["--config".into(), desk("S3")];
            let o3: Vec<&str> = o3.iter().map(String::as_str).collect();
            let b3 = || base("S3", w("w3"));
            run_s(b3(), &o3, &["train-ubm", "--train", "dev/train.txt"])?;
            run_s(b3(), &o3, &["enroll", "--models", "dev/models.txt", "--manifest", "corpus/manifest.txt"])?;
            let s3 = w("s3.txt");
            run_s(b3(), &o3, &["score", "--models", "dev/models.txt", "--trials", "dev/trials.txt", "--manifest", "corpus/manifest.txt", "--out", &s3])?;

            let (ids, mat) = (w("w1/ivectors.ids"), w("w1/ivectors.sdsv"));
            let emb = ["--embedding-ids", ids.as_str(), "--embeddings", mat.as_str()];
            let b2 = || base("S2", w("w2"));
            run_s(b2(), &["train-plda", "--train", "dev/train.txt"], &emb)?;
            run_s(b2(), &["enroll", "--models", "dev/models.txt"], &emb)?;
            let s2 = w("s2.txt");
            run_s(b2(), &["score", "--models", "dev/models.txt", "--trials", "dev/trials.txt", "--out", &s2], &emb)?;

            let recipe = format!(
                "trials = \"../dev/trials.txt\"\n[uv]\nsystems = [\"s1.txt\", \"s6_uv.txt\"]\n[asv]\nsystems = [\"s2.txt\", \"s3.txt\", \"s6.txt\"]\n"
            );
            std::fs::write(dir.join(w("recipe.toml")), recipe).map_err(|e| e.to_string())?;
            let (fo, fz) = (w("fused.txt"), w("frozen.toml"));
            run(dir, &["--jobs", jobs, "fuse", "--recipe", &w("recipe.toml"), "--out", &fo, "--frozen-out", &fz])?;
        }
        compared += same_tree(&dir.join("j1"), &dir.join("j4"))?;
        Ok(())
    })();
    match result {
        Ok(()) => rep.line(8, "--jobs 1 and --jobs 4 give byte-identical artifacts", true, format!("{compared} files compared")),
        Err(e) => rep.line(8, "--jobs 1 and --jobs 4 give byte-identical artifacts", false, e),
    }
}

fn main() {
    let mut rep = Report { failures: 0 };
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| only.is_empty() || only.contains(&n);
    if want(1) {
        criterion_metrics(&mut rep);
    }
    if want(2) {
        criterion_gmm(&mut rep);
    }
    if want(3) {
        criterion_ivector(&mut rep);
    }
    if want(4) {
        criterion_plda(&mut rep);
    }
    if want(5) {
        criterion_mlp(&mut rep);
    }
    if want(8) {
        criterion_determinism(&mut rep);
    }
    if want(6) || want(7) {
        criterion_end_to_end(&mut rep);
    }
    println!("{} failure(s)", rep.failures);
    if rep.failures > 0 {
        std::process::exit(1);
    }
}
