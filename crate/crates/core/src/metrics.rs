//! Detection metrics: EER, normalized minDCF, DET points and the
//! per-condition report.
//!
//! A trial is accepted when its score is at or above the threshold. The
//! operating points are the distinct sorted scores followed by `+inf`
//! (reject everything).

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trial condition relative to the claimed (speaker, phrase) model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// Target speaker, correct phrase.
    TC,
    /// Target speaker, wrong phrase.
    TW,
    /// Impostor speaker, correct phrase.
    IC,
    /// Impostor speaker, wrong phrase.
    IW,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::TC, Condition::TW, Condition::IC, Condition::IW];

    pub fn from_match(same_speaker: bool, same_phrase: bool) -> Self {
        match (same_speaker, same_phrase) {
            (true, true) => Condition::TC,
            (true, false) => Condition::TW,
            (false, true) => Condition::IC,
            (false, false) => Condition::IW,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::TC => "TC",
            Condition::TW => "TW",
            Condition::IC => "IC",
            Condition::IW => "IW",
        }
    }

    pub fn is_target(self) -> bool {
        self == Condition::TC
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TC" => Ok(Condition::TC),
            "TW" => Ok(Condition::TW),
            "IC" => Ok(Condition::IC),
            "IW" => Ok(Condition::IW),
            other => Err(Error::invalid(format!("unknown trial condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 10.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::config("metrics.p_target", "must lie in (0, 1)"));
        }
        if !(self.c_miss > 0.0 && self.c_miss.is_finite()) {
            return Err(Error::config("metrics.c_miss", "must be positive"));
        }
        if !(self.c_fa > 0.0 && self.c_fa.is_finite()) {
            return Err(Error::config("metrics.c_fa", "must be positive"));
        }
        Ok(())
    }

    /// Cost of the better trivial system; the normalization constant.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn normalized_dcf(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa)
            / self.default_cost()
    }
}

/// Error rates at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at every distinct score and at `+inf`, ascending.
pub fn operating_points(scores: &[f64], is_target: &[bool]) -> Result<Vec<OperatingPoint>> {
    if scores.len() != is_target.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: is_target.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("trial scores".into()));
    }
    let n_t = is_target.iter().filter(|&&t| t).count();
    let n_i = is_target.len() - n_t;
    if n_t == 0 || n_i == 0 {
        return Err(Error::empty("metrics need at least one target and one impostor trial"));
    }
    let mut order: Vec<(f64, bool)> = scores.iter().cloned().zip(is_target.iter().cloned()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, ni) = (n_t as f64, n_i as f64);
    let mut points = Vec::new();
    // Counts of trials strictly below the current threshold.
    let (mut t_below, mut i_below) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let thr = order[k].0;
        points.push(OperatingPoint {
            threshold: thr,
            p_miss: t_below as f64 / nt,
            p_fa: (n_i - i_below) as f64 / ni,
        });
        while k < order.len() && order[k].0 == thr {
            if order[k].1 {
                t_below += 1;
            } else {
                i_below += 1;
            }
            k += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Equal error rate with linear interpolation between the two operating
/// points that straddle the `P_miss = P_fa` crossing. The threshold of the
/// reject-all point is taken as `max score + 1` for interpolation.
pub fn compute_eer(scores: &[f64], is_target: &[bool]) -> Result<(f64, f64)> {
    let pts = operating_points(scores, is_target)?;
    let max = pts[pts.len() - 2].threshold;
    let thr = |p: &OperatingPoint| if p.threshold.is_finite() { p.threshold } else { max + 1.0 };
    let i = pts
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the reject-all point always crosses");
    if i == 0 {
        return Ok((pts[0].p_miss, pts[0].threshold));
    }
    let (a, b) = (&pts[i - 1], &pts[i]);
    let gap_a = a.p_fa - a.p_miss;
    let gap_b = b.p_miss - b.p_fa;
    let t = gap_a / (gap_a + gap_b);
    let eer = a.p_miss + t * (b.p_miss - a.p_miss);
    Ok((eer, thr(a) + t * (thr(b) - thr(a))))
}

/// Minimum normalized DCF over all operating points and its threshold.
pub fn compute_min_dcf(scores: &[f64], is_target: &[bool], params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    let pts = operating_points(scores, is_target)?;
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in &pts {
        let c = params.normalized_dcf(p.p_miss, p.p_fa);
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    Ok(best)
}

/// `(P_fa, P_miss)` at every operating point, ascending by threshold.
pub fn det_points(scores: &[f64], is_target: &[bool]) -> Result<Vec<(f64, f64)>> {
    Ok(operating_points(scores, is_target)?
        .into_iter()
        .map(|p| (p.p_fa, p.p_miss))
        .collect())
}

pub fn det_text(points: &[(f64, f64)]) -> String {
    let mut s = String::new();
    for (fa, miss) in points {
        let _ = writeln!(s, "{fa:.6} {miss:.6}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionMetrics {
    pub eer: f64,
    pub min_dcf: f64,
}

fn metrics_for(scores: &[f64], is_target: &[bool], params: &DcfParams) -> Result<ConditionMetrics> {
    Ok(ConditionMetrics {
        eer: compute_eer(scores, is_target)?.0,
        min_dcf: compute_min_dcf(scores, is_target, params)?.0,
    })
}

/// Rows `TW`, `IC`, `IW`, `Pooled`, `Avg`; sub-conditions without trials
/// are `None` and left out of the average.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub rows: Vec<(String, Option<ConditionMetrics>)>,
}

impl ConditionReport {
    pub fn get(&self, label: &str) -> Option<ConditionMetrics> {
        self.rows.iter().find(|(l, _)| l == label).and_then(|(_, m)| *m)
    }

    /// Aligned table with EER in percent.
    pub fn table(&self, title: &str) -> String {
        let mut head = format!("{:<10}", "");
        let mut eer = format!("{:<10}", "EER(%)");
        let mut dcf = format!("{:<10}", "minDCF");
        for (label, m) in &self.rows {
            let _ = write!(head, "{label:>9}");
            match m {
                Some(m) => {
                    let _ = write!(eer, "{:>9.2}", 100.0 * m.eer);
                    let _ = write!(dcf, "{:>9.4}", m.min_dcf);
                }
                None => {
                    eer.push_str(&format!("{:>9}", "-"));
                    dcf.push_str(&format!("{:>9}", "-"));
                }
            }
        }
        format!("{title}\n{head}\n{eer}\n{dcf}\n")
    }

    /// `label.eer=value` / `label.min_dcf=value` lines.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for (label, m) in &self.rows {
            let key = label.to_lowercase();
            match m {
                Some(m) => {
                    let _ = writeln!(s, "{key}.eer={:.6}\n{key}.min_dcf={:.6}", m.eer, m.min_dcf);
                }
                None => {
                    let _ = writeln!(s, "{key}.eer=absent\n{key}.min_dcf=absent");
                }
            }
        }
        s
    }
}

/// EER and minDCF of TC against each impostor condition, pooled, and the
/// unweighted average of the sub-conditions present.
pub fn condition_report(
    scores: &[f64],
    conditions: &[Condition],
    params: &DcfParams,
) -> Result<ConditionReport> {
    if scores.len() != conditions.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: conditions.len(),
        });
    }
    let subset = |keep: &dyn Fn(Condition) -> bool| {
        let (mut s, mut t) = (Vec::new(), Vec::new());
        for (&sc, &c) in scores.iter().zip(conditions) {
            if c.is_target() || keep(c) {
                s.push(sc);
                t.push(c.is_target());
            }
        }
        (s, t)
    };
    let mut rows = Vec::new();
    let mut present = Vec::new();
    for cond in [Condition::TW, Condition::IC, Condition::IW] {
        if conditions.contains(&cond) {
            let (s, t) = subset(&|c| c == cond);
            let m = metrics_for(&s, &t, params)?;
            present.push(m);
            rows.push((cond.to_string(), Some(m)));
        } else {
            log::info!("condition {cond} has no trials; omitted from the report");
            rows.push((cond.to_string(), None));
        }
    }
    let (s, t) = subset(&|_| true);
    rows.push(("Pooled".to_string(), Some(metrics_for(&s, &t, params)?)));
    let avg = (!present.is_empty()).then(|| {
        let n = present.len() as f64;
        ConditionMetrics {
            eer: present.iter().map(|m| m.eer).sum::<f64>() / n,
            min_dcf: present.iter().map(|m| m.min_dcf).sum::<f64>() / n,
        }
    });
    rows.push(("Avg".to_string(), avg));
    Ok(ConditionReport { rows })
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub model: String,
    pub test: String,
    pub score: f64,
}

pub fn format_scores(lines: &[ScoreLine]) -> String {
    let mut s = String::with_capacity(lines.len() * 40);
    for l in lines {
        let _ = writeln!(s, "{} {} {:.6}", l.model, l.test, l.score);
    }
    s
}

pub fn write_scores(path: &Path, lines: &[ScoreLine]) -> Result<()> {
    std::fs::write(path, format_scores(lines)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(path, format!("line {}: expected `model test score`", n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let score: f64 = f[2].parse().map_err(|_| bad())?;
        out.push(ScoreLine {
            model: f[0].to_string(),
            test: f[1].to_string(),
            score,
        });
    }
    Ok(out)
}

/// Lookup from `(model, test)` to score.
pub fn score_index(lines: &[ScoreLine]) -> BTreeMap<(String, String), f64> {
    lines
        .iter()
        .map(|l| ((l.model.clone(), l.test.clone()), l.score))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute force: every candidate threshold is checked by direct counting.
    fn counting_points(scores: &[f64], tgt: &[bool]) -> Vec<(f64, f64, f64)> {
        let mut thr: Vec<f64> = scores.to_vec();
        thr.sort_by(f64::total_cmp);
        thr.dedup();
        thr.push(f64::INFINITY);
        let nt = tgt.iter().filter(|&&t| t).count() as f64;
        let ni = tgt.len() as f64 - nt;
        thr.iter()
            .map(|&th| {
                let miss = scores.iter().zip(tgt).filter(|(s, t)| **t && **s < th).count() as f64;
                let fa = scores.iter().zip(tgt).filter(|(s, t)| !**t && **s >= th).count() as f64;
                (th, miss / nt, fa / ni)
            })
            .collect()
    }

    fn random_set(seed: u64, n: usize) -> (Vec<f64>, Vec<bool>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut tgt: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        tgt[0] = true;
        tgt[1] = false;
        let scores = tgt
            .iter()
            .map(|&t| ((r.random_range(-2.0..2.0) + if t { 1.0 } else { 0.0 }) * 4.0f64).round() / 4.0)
            .collect();
        (scores, tgt)
    }

    #[test]
    fn eer_examples() {
        let sep = compute_eer(&[3.0, 4.0, 1.0, 0.0], &[true, true, false, false]).unwrap();
        assert_eq!(sep.0, 0.0);
        let s = [5.0, 4.0, 3.0, 1.0, 2.0, 0.0, -1.0, -2.0];
        let t = [true, true, true, true, false, false, false, false];
        let (eer, thr) = compute_eer(&s, &t).unwrap();
        assert!((eer - 0.25).abs() < 1e-15);
        assert_eq!(thr, 2.0);
        let (eer, _) = compute_eer(&[1.0; 6], &[true, false, true, false, false, true]).unwrap();
        assert!((eer - 0.5).abs() < 1e-15);
        assert!(compute_eer(&[1.0, 2.0], &[true, true]).is_err());
        assert!(compute_eer(&[], &[]).is_err());
    }

    #[test]
    fn min_dcf_examples() {
        let p = DcfParams::default();
        assert_eq!(compute_min_dcf(&[3.0, 4.0, 1.0, 0.0], &[true, true, false, false], &p).unwrap().0, 0.0);
        let (c, _) = compute_min_dcf(&[1.0; 4], &[true, false, true, false], &p).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        assert!(compute_min_dcf(&[0.0, 1.0], &[true, false], &DcfParams { p_target: 1.0, ..p }).is_err());
    }

    #[test]
    fn eer_and_dcf_match_sweep_oracle() {
        let p = DcfParams::default();
        for seed in 0..200 {
            let (s, t) = random_set(seed, 50);
            let pts = counting_points(&s, &t);
            let oracle_dcf = pts
                .iter()
                .map(|(_, m, f)| (p.c_miss * p.p_target * m + p.c_fa * (1.0 - p.p_target) * f) / p.default_cost())
                .fold(f64::INFINITY, f64::min);
            assert!((compute_min_dcf(&s, &t, &p).unwrap().0 - oracle_dcf).abs() < 1e-12);

            let mut oracle_eer = None;
            for w in pts.windows(2) {
                let ((_, m0, f0), (_, m1, f1)) = (w[0], w[1]);
                if m0 < f0 && m1 >= f1 {
                    let t = (f0 - m0) / ((f0 - m0) + (m1 - f1));
                    oracle_eer = Some(m0 + t * (m1 - m0));
                    break;
                }
            }
            let eer = compute_eer(&s, &t).unwrap().0;
            assert!((eer - oracle_eer.unwrap()).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn det_points_match_counting() {
        let (s, t) = random_set(3, 40);
        let det = det_points(&s, &t).unwrap();
        let oracle = counting_points(&s, &t);
        assert_eq!(det.len(), oracle.len());
        for ((fa, miss), (_, m, f)) in det.iter().zip(&oracle) {
            assert_eq!((*fa, *miss), (*f, *m));
        }
        assert_eq!(*det.first().unwrap(), (1.0, 0.0));
        assert_eq!(*det.last().unwrap(), (0.0, 1.0));
        let sep = det_points(&[2.0, 3.0, 0.0, 1.0], &[true, true, false, false]).unwrap();
        assert!(sep.contains(&(0.0, 0.0)));
        assert!(det_points(&[], &[]).is_err());
    }

    #[test]
    fn report_matches_subset_recomputation() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let conds: Vec<Condition> = (0..400).map(|i| Condition::ALL[i % 4]).collect();
        let scores: Vec<f64> = conds
            .iter()
            .map(|c| {
                let shift = match c {
                    Condition::TC => 2.0,
                    Condition::TW => 0.5,
                    Condition::IC => 1.0,
                    Condition::IW => -1.0,
                };
                shift + r.random_range(-1.5..1.5)
            })
            .collect();
        let p = DcfParams::default();
        let rep = condition_report(&scores, &conds, &p).unwrap();
        let mut subs = Vec::new();
        for cond in [Condition::TW, Condition::IC, Condition::IW] {
            let (s, t): (Vec<f64>, Vec<bool>) = scores
                .iter()
                .zip(&conds)
                .filter(|(_, c)| **c == Condition::TC || **c == cond)
                .map(|(s, c)| (*s, c.is_target()))
                .unzip();
            let m = rep.get(cond.as_str()).unwrap();
            assert_eq!(m.eer, compute_eer(&s, &t).unwrap().0);
            assert_eq!(m.min_dcf, compute_min_dcf(&s, &t, &p).unwrap().0);
            subs.push(m);
        }
        let avg = rep.get("Avg").unwrap();
        assert!((avg.eer - subs.iter().map(|m| m.eer).sum::<f64>() / 3.0).abs() < 1e-15);
        let labels: Vec<&str> = rep.rows.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["TW", "IC", "IW", "Pooled", "Avg"]);
        assert!(rep.table("S0").contains("Pooled"));

        let keep: Vec<usize> = (0..400).filter(|i| matches!(conds[*i], Condition::TC | Condition::IC)).collect();
        let s2: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
        let c2: Vec<Condition> = keep.iter().map(|&i| conds[i]).collect();
        let rep2 = condition_report(&s2, &c2, &p).unwrap();
        assert_eq!(rep2.get("Pooled"), rep2.get("IC"));
        assert_eq!(rep2.get("TW"), None);
        assert!(rep2.key_values().contains("tw.eer=absent"));
    }

    #[test]
    fn score_file_roundtrip() {
        let lines = vec![
            ScoreLine { model: "m1".into(), test: "u1".into(), score: -1.25 },
            ScoreLine { model: "m2".into(), test: "u9".into(), score: 3.1415926 },
        ];
        assert_eq!(format_scores(&lines), "m1 u1 -1.250000\nm2 u9 3.141593\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        write_scores(&p, &lines).unwrap();
        let back = read_scores(&p).unwrap();
        assert_eq!(back[1].score, 3.141593);
        std::fs::write(&p, "a b\n").unwrap();
        assert!(read_scores(&p).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_rank_invariant_and_bounded(seed in 0u64..10_000, a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let (s, t) = random_set(seed, 30);
            let p = DcfParams::default();
            let (eer, eer_thr) = compute_eer(&s, &t).unwrap();
            let (dcf, _) = compute_min_dcf(&s, &t, &p).unwrap();
            let pts = counting_points(&s, &t);
            // The half-error ceiling holds whenever the ROC stays on or above chance.
            let above_chance = pts.iter().all(|(_, m, f)| m + f <= 1.0 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&eer));
            prop_assert!(!above_chance || eer <= 0.5 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&dcf));
            for g in [s.iter().map(|x| x.exp()).collect::<Vec<_>>(), s.iter().map(|x| a * x + b).collect()] {
                prop_assert!((compute_eer(&g, &t).unwrap().0 - eer).abs() < 1e-12);
                prop_assert!((compute_min_dcf(&g, &t, &p).unwrap().0 - dcf).abs() < 1e-12);
            }
            let at_eer = pts.iter().rev().find(|(th, _, _)| *th <= eer_thr).copied().unwrap_or(pts[0]);
            prop_assert!(dcf <= p.normalized_dcf(at_eer.1, at_eer.2) + 1e-12);
            let det = det_points(&s, &t).unwrap();
            for w in det.windows(2) {
                prop_assert!(w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }
}
