//! Corpus manifests, enrollment models, condition-labelled trial lists, the
//! development split and the pseudo-gender trial filter.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::Condition;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub phrase_id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollmentModel {
    pub model_id: String,
    pub speaker_id: String,
    pub phrase_id: String,
    pub enroll_utts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub model_id: String,
    pub test_utt: String,
    pub condition: Condition,
}

pub fn label_condition(model: &EnrollmentModel, test: &UtteranceRecord) -> Condition {
    Condition::from_match(
        model.speaker_id == test.speaker_id,
        model.phrase_id == test.phrase_id,
    )
}

fn read_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| (n + 1, l.split_whitespace().map(str::to_string).collect()))
        .collect())
}

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `utt-id speaker-id phrase-id path` lines. Relative paths are taken
/// relative to the manifest's directory and returned absolute.
pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let base = std::path::absolute(path.parent().unwrap_or(Path::new("")))
        .map_err(|e| Error::io(path, e))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, f) in read_lines(path)? {
        if f.len() != 4 {
            return Err(Error::format(path, format!("line {n}: expected `utt speaker phrase path`")));
        }
        if !seen.insert(f[0].clone()) {
            return Err(Error::format(path, format!("line {n}: duplicate utterance `{}`", f[0])));
        }
        let p = PathBuf::from(&f[3]);
        out.push(UtteranceRecord {
            utt_id: f[0].clone(),
            speaker_id: f[1].clone(),
            phrase_id: f[2].clone(),
            path: if p.is_absolute() { p } else { base.join(p) },
        });
    }
    Ok(out)
}

pub fn format_manifest(records: &[UtteranceRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{} {} {} {}\n", r.utt_id, r.speaker_id, r.phrase_id, r.path.display()))
        .collect()
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    write_text(path, format_manifest(records))
}

pub fn read_models(path: &Path) -> Result<Vec<EnrollmentModel>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, f)| {
            if f.len() != 4 {
                return Err(Error::format(path, format!("line {n}: expected `model speaker phrase u1,u2,u3`")));
            }
            Ok(EnrollmentModel {
                model_id: f[0].clone(),
                speaker_id: f[1].clone(),
                phrase_id: f[2].clone(),
                enroll_utts: f[3].split(',').map(str::to_string).collect(),
            })
        })
        .collect()
}

pub fn write_models(path: &Path, models: &[EnrollmentModel]) -> Result<()> {
    let text = models
        .iter()
        .map(|m| format!("{} {} {} {}\n", m.model_id, m.speaker_id, m.phrase_id, m.enroll_utts.join(",")))
        .collect();
    write_text(path, text)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, f)| {
            let bad = || Error::format(path, format!("line {n}: expected `model test condition`"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(Trial {
                model_id: f[0].clone(),
                test_utt: f[1].clone(),
                condition: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let text = trials
        .iter()
        .map(|t| format!("{} {} {}\n", t.model_id, t.test_utt, t.condition))
        .collect();
    write_text(path, text)
}

/// Every model crossed with every test utterance.
pub fn cross_trials(models: &[EnrollmentModel], tests: &[UtteranceRecord]) -> Vec<Trial> {
    models
        .iter()
        .flat_map(|m| {
            tests.iter().map(move |t| Trial {
                model_id: m.model_id.clone(),
                test_utt: t.utt_id.clone(),
                condition: label_condition(m, t),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DevSet {
    pub models: Vec<EnrollmentModel>,
    pub tests: Vec<UtteranceRecord>,
    pub trials: Vec<Trial>,
    /// Utterances of the speakers left out of the development sample.
    pub train: Vec<UtteranceRecord>,
}

/// Seeded speaker sample with per-(speaker, phrase) enrollment.
///
/// A group with more than `enroll_per_model` utterances yields one model
/// and the rest as tests. A smaller group yields no model; its utterances
/// are still test material for other models.
pub fn build_dev_set(
    corpus: &[UtteranceRecord],
    n_speakers: usize,
    enroll_per_model: usize,
    seed: u64,
) -> Result<DevSet> {
    if enroll_per_model == 0 {
        return Err(Error::invalid("enroll_per_model must be positive"));
    }
    let speakers: Vec<&str> = corpus
        .iter()
        .map(|r| r.speaker_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if n_speakers > speakers.len() {
        return Err(Error::invalid(format!(
            "{n_speakers} development speakers requested but the corpus has {}",
            speakers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<&str> = speakers.choose_multiple(&mut rng, n_speakers).copied().collect();

    let mut groups: BTreeMap<(&str, &str), Vec<&UtteranceRecord>> = BTreeMap::new();
    let mut train = Vec::new();
    for r in corpus {
        if chosen.contains(r.speaker_id.as_str()) {
            groups.entry((&r.speaker_id, &r.phrase_id)).or_default().push(r);
        } else {
            train.push(r.clone());
        }
    }

    let mut models = Vec::new();
    let mut tests = Vec::new();
    for ((spk, phr), mut utts) in groups {
        utts.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        if utts.len() > enroll_per_model {
            utts.shuffle(&mut rng);
            let (enroll, rest) = utts.split_at(enroll_per_model);
            let mut ids: Vec<String> = enroll.iter().map(|r| r.utt_id.clone()).collect();
            ids.sort();
            models.push(EnrollmentModel {
                model_id: format!("{spk}_{phr}"),
                speaker_id: spk.to_string(),
                phrase_id: phr.to_string(),
                enroll_utts: ids,
            });
            tests.extend(rest.iter().map(|r| (*r).clone()));
        } else {
            tests.extend(utts.into_iter().cloned());
        }
    }
    tests.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let trials = cross_trials(&models, &tests);
    Ok(DevSet {
        models,
        tests,
        trials,
        train,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded 2-means over the rows; returns the cluster of each row.
pub fn two_means(points: &[Vec<f64>], restarts: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let idx: Vec<usize> = (0..points.len()).collect();
    for _ in 0..restarts.max(1) {
        let init: Vec<usize> = idx.choose_multiple(&mut rng, 2).copied().collect();
        let mut centres = [points[init[0]].clone(), points[init[1]].clone()];
        let mut assign = vec![usize::MAX; points.len()];
        for _ in 0..100 {
            let next: Vec<usize> = points
                .iter()
                .map(|p| usize::from(sq_dist(p, &centres[1]) < sq_dist(p, &centres[0])))
                .collect();
            if next == assign {
                break;
            }
            assign = next;
            for (c, centre) in centres.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (j, v) in centre.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let inertia: f64 = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centres[a])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    best.map(|(_, a)| a).unwrap_or_default()
}

/// Keeps trials whose model speaker and test speaker fall in the same
/// 2-means cluster of per-speaker embeddings.
pub fn pseudo_gender_filter(
    trials: &[Trial],
    models: &[EnrollmentModel],
    tests: &[UtteranceRecord],
    speaker_embeddings: &BTreeMap<String, Vec<f64>>,
    seed: u64,
) -> Result<Vec<Trial>> {
    let model_spk: BTreeMap<&str, &str> = models.iter().map(|m| (m.model_id.as_str(), m.speaker_id.as_str())).collect();
    let test_spk: BTreeMap<&str, &str> = tests.iter().map(|t| (t.utt_id.as_str(), t.speaker_id.as_str())).collect();
    let mut needed = BTreeSet::new();
    for t in trials {
        let m = model_spk
            .get(t.model_id.as_str())
            .ok_or_else(|| Error::invalid(format!("trial names unknown model `{}`", t.model_id)))?;
        let u = test_spk
            .get(t.test_utt.as_str())
            .ok_or_else(|| Error::invalid(format!("trial names unknown test utterance `{}`", t.test_utt)))?;
        needed.insert(*m);
        needed.insert(*u);
    }
    let ids: Vec<&str> = needed.into_iter().collect();
    let points = ids
        .iter()
        .map(|s| {
            speaker_embeddings
                .get(*s)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no embedding for speaker `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if points.len() < 2 || points.iter().all(|p| p == &points[0]) {
        log::warn!("speaker embeddings form a single cluster; keeping all trials");
        return Ok(trials.to_vec());
    }
    let clusters: BTreeMap<&str, usize> = ids.iter().copied().zip(two_means(&points, 10, seed)).collect();
    Ok(trials
        .iter()
        .filter(|t| clusters[model_spk[t.model_id.as_str()]] == clusters[test_spk[t.test_utt.as_str()]])
        .cloned()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(spk: usize, phr: usize, utts: usize) -> Vec<UtteranceRecord> {
        let mut out = Vec::new();
        for s in 0..spk {
            for p in 0..phr {
                for u in 0..utts {
                    out.push(UtteranceRecord {
                        utt_id: format!("spk{s:03}_phr{p:02}_u{u:02}"),
                        speaker_id: format!("spk{s:03}"),
                        phrase_id: format!("phr{p:02}"),
                        path: PathBuf::from("x"),
                    });
                }
            }
        }
        out
    }

    fn model(s: &str, p: &str) -> EnrollmentModel {
        EnrollmentModel {
            model_id: format!("{s}_{p}"),
            speaker_id: s.into(),
            phrase_id: p.into(),
            enroll_utts: vec![],
        }
    }

    fn utt(s: &str, p: &str) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: format!("{s}{p}"),
            speaker_id: s.into(),
            phrase_id: p.into(),
            path: PathBuf::new(),
        }
    }

    #[test]
    fn condition_labels() {
        assert_eq!(label_condition(&model("A", "1"), &utt("A", "1")), Condition::TC);
        assert_eq!(label_condition(&model("A", "1"), &utt("A", "2")), Condition::TW);
        assert_eq!(label_condition(&model("A", "1"), &utt("B", "1")), Condition::IC);
        assert_eq!(label_condition(&model("A", "1"), &utt("B", "2")), Condition::IW);
    }

    #[test]
    fn small_dev_set_counts() {
        let dev = build_dev_set(&corpus(4, 2, 5), 4, 3, 7).unwrap();
        assert_eq!(dev.models.len(), 8);
        assert_eq!(dev.tests.len(), 16);
        assert_eq!(dev.trials.len(), 128);
        let count = |c| dev.trials.iter().filter(|t| t.condition == c).count();
        // Per model: 2 own tests, 2 same-speaker other-phrase, 6 and 6 impostor.
        assert_eq!(count(Condition::TC), 16);
        assert_eq!(count(Condition::TW), 16);
        assert_eq!(count(Condition::IC), 48);
        assert_eq!(count(Condition::IW), 48);
        assert!(dev.train.is_empty());
    }

    #[test]
    fn three_utterance_group_has_no_model() {
        let dev = build_dev_set(&corpus(2, 1, 3), 2, 3, 1).unwrap();
        assert!(dev.models.is_empty() && dev.trials.is_empty());
        assert!(build_dev_set(&corpus(2, 1, 3), 3, 3, 1).is_err());
    }

    #[test]
    fn gender_filter_drops_cross_cluster_trials() {
        let dev = build_dev_set(&corpus(6, 1, 5), 6, 3, 2).unwrap();
        let mut emb = BTreeMap::new();
        for s in 0..6 {
            let c = if s < 3 { 5.0 } else { -5.0 };
            emb.insert(format!("spk{s:03}"), vec![c + 0.1 * s as f64, -c]);
        }
        let kept = pseudo_gender_filter(&dev.trials, &dev.models, &dev.tests, &emb, 0).unwrap();
        let group = |s: &str| s[3..].parse::<usize>().unwrap() < 3;
        let expected: Vec<Trial> = dev
            .trials
            .iter()
            .filter(|t| group(&t.model_id[..6]) == group(&t.test_utt[..6]))
            .cloned()
            .collect();
        assert_eq!(kept, expected);

        let flat: BTreeMap<String, Vec<f64>> = emb.keys().map(|k| (k.clone(), vec![1.0, 1.0])).collect();
        assert_eq!(pseudo_gender_filter(&dev.trials, &dev.models, &dev.tests, &flat, 0).unwrap(), dev.trials);
        emb.remove("spk000");
        assert!(pseudo_gender_filter(&dev.trials, &dev.models, &dev.tests, &emb, 0).is_err());
    }

    #[test]
    fn text_files_roundtrip() {
        let dev = build_dev_set(&corpus(3, 2, 4), 2, 3, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (m, t) = (dir.path().join("models"), dir.path().join("trials"));
        write_models(&m, &dev.models).unwrap();
        write_trials(&t, &dev.trials).unwrap();
        assert_eq!(read_models(&m).unwrap(), dev.models);
        assert_eq!(read_trials(&t).unwrap(), dev.trials);
        let man = dir.path().join("manifest");
        write_manifest(&man, &dev.train).unwrap();
        let back = read_manifest(&man).unwrap();
        assert_eq!(back.len(), dev.train.len());
        assert_eq!(back[0].path, dir.path().join("x"));
    }

    proptest! {
        #[test]
        fn dev_set_invariants(spk in 2usize..6, phr in 1usize..4, utts in 1usize..7, seed in 0u64..1000) {
            let c = corpus(spk, phr, utts);
            let n = spk - 1;
            let dev = build_dev_set(&c, n, 3, seed).unwrap();
            let again = build_dev_set(&c, n, 3, seed).unwrap();
            prop_assert_eq!(&dev.trials, &again.trials);
            prop_assert_eq!(&dev.models, &again.models);
            let by_id: BTreeMap<&str, &UtteranceRecord> = c.iter().map(|r| (r.utt_id.as_str(), r)).collect();
            let models: BTreeMap<&str, &EnrollmentModel> = dev.models.iter().map(|m| (m.model_id.as_str(), m)).collect();
            for t in &dev.trials {
                prop_assert_eq!(t.condition, label_condition(models[t.model_id.as_str()], by_id[t.test_utt.as_str()]));
            }
            let enrolled: BTreeSet<&str> = dev.models.iter().flat_map(|m| m.enroll_utts.iter().map(String::as_str)).collect();
            prop_assert!(dev.tests.iter().all(|t| !enrolled.contains(t.utt_id.as_str())));
            for m in &dev.models {
                prop_assert_eq!(m.enroll_utts.len(), 3);
                for u in &m.enroll_utts {
                    prop_assert_eq!(&by_id[u.as_str()].speaker_id, &m.speaker_id);
                    prop_assert_eq!(&by_id[u.as_str()].phrase_id, &m.phrase_id);
                }
            }
            let keyed: BTreeSet<(&str, &str)> = dev.models.iter().map(|m| (m.speaker_id.as_str(), m.phrase_id.as_str())).collect();
            let tc = dev.trials.iter().filter(|t| t.condition == Condition::TC).count();
            let expected = dev.tests.iter().filter(|t| keyed.contains(&(t.speaker_id.as_str(), t.phrase_id.as_str()))).count();
            prop_assert_eq!(tc, expected);
        }
    }
}
