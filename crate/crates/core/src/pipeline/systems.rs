//! Training and trial scoring for the four system families.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{stage_seed, BnLabels, PipelineConfig};
use crate::binio::{read_file, BinReader, BinWriter};
use crate::bnfeat::{stack_context, stcl_labels, train_mlp, FrameLabels, MlpModel, PcaTransform, Tap};
use crate::error::{ensure_dim, Error, Result};
use crate::frontend::{cmvn, extract_features, read_wav, FrontendConfig};
use crate::gmm::{map_adapt, merge_gmms, train_gmm_em, DiagGmm};
use crate::ivector::{
    accumulate_stats, average, train_lda, train_total_variability, BaumWelchStats, LdaTransform,
    TotalVariabilityModel, Whitener,
};
use crate::matrix::FeatureMatrix;
use crate::parallel::{ordered_map, try_ordered_map};
use crate::pbm::{build_pbms, enroll_speaker, uv_score_from, verify_with_background, PbmSet, SpeakerPhraseModel};
use crate::plda::{
    as_norm_with, max_norm, mean_norm, read_embeddings, top_k_stats, train_plda, write_embeddings, PldaModel,
};
use crate::trials::{EnrollmentModel, Trial, UtteranceRecord};

/// Loads a WAV payload through the front-end, or reads a feature file as is.
pub fn load_features(record: &UtteranceRecord, frontend: &FrontendConfig) -> Result<FeatureMatrix> {
    match record.path.extension().and_then(|e| e.to_str()) {
        Some("wav") => extract_features(&read_wav(&record.path)?, frontend),
        _ => FeatureMatrix::read_sdsv(&record.path),
    }
}

pub fn load_all(records: &[UtteranceRecord], frontend: &FrontendConfig) -> Result<Vec<FeatureMatrix>> {
    try_ordered_map(records, |r| load_features(r, frontend))
}

/// Features keyed by utterance id.
pub type FeatureStore = BTreeMap<String, FeatureMatrix>;

pub fn store(records: &[UtteranceRecord], feats: Vec<FeatureMatrix>) -> FeatureStore {
    records.iter().map(|r| r.utt_id.clone()).zip(feats).collect()
}

fn lookup<'a, T>(map: &'a BTreeMap<String, T>, id: &str, what: &str) -> Result<&'a T> {
    map.get(id)
        .ok_or_else(|| Error::invalid(format!("no {what} for utterance `{id}`")))
}

/// Seeded subsample of `n` row indices, in ascending order.
fn subsample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if max == 0 || n <= max {
        return (0..n).collect();
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Hidden-layer projection producing bottleneck features.
#[derive(Debug, Clone, PartialEq)]
pub struct BnExtractor {
    pub mlp: MlpModel,
    pub pca: PcaTransform,
    pub context: usize,
    pub tap_layer: usize,
    pub tap: Tap,
    pub post_cmvn: bool,
}

const BN_MAGIC: &[u8; 4] = b"SBNX";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnReport {
    pub losses: Vec<f64>,
    pub stcl_objective: Vec<f64>,
    pub n_classes: usize,
    pub train_frames: usize,
}

impl BnExtractor {
    pub fn apply(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        let stacked = stack_context(features, self.context, self.context);
        let hidden = self.mlp.hidden_output(&stacked, self.tap_layer, self.tap)?;
        let projected = self.pca.apply(&hidden)?;
        if self.post_cmvn && projected.rows() > 1 {
            cmvn(&projected)
        } else {
            Ok(projected)
        }
    }

    pub fn apply_all(&self, feats: &[FeatureMatrix]) -> Result<Vec<FeatureMatrix>> {
        try_ordered_map(feats, |f| self.apply(f))
    }

    /// Writes `bn.sbnx`, `mlp.smlp` and `pca.spca` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = BinWriter::with_header(BN_MAGIC);
        w.len_u32(self.context)?;
        w.len_u32(self.tap_layer)?;
        w.u32(u32::from(self.tap == Tap::PostActivation));
        w.u32(u32::from(self.post_cmvn));
        w.write_to(&dir.join("bn.sbnx"))?;
        self.mlp.write(&dir.join("mlp.smlp"))?;
        self.pca.write(&dir.join("pca.spca"))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("bn.sbnx");
        let bytes = read_file(&path)?;
        let mut r = BinReader::new(&bytes, &path);
        r.header(BN_MAGIC)?;
        let context = r.usize()?;
        let tap_layer = r.usize()?;
        let tap = if r.u32()? == 1 { Tap::PostActivation } else { Tap::PreActivation };
        let post_cmvn = r.u32()? == 1;
        r.finish()?;
        Ok(Self {
            mlp: MlpModel::read(&dir.join("mlp.smlp"))?,
            pca: PcaTransform::read(&dir.join("pca.spca"))?,
            context,
            tap_layer,
            tap,
            post_cmvn,
        })
    }
}

/// Trains the frame classifier and PCA on `train` utterances. Phone labels
/// come from `phone_labels`; sTCL labels are derived from the features.
pub fn train_bn(
    cfg: &PipelineConfig,
    train_ids: &[String],
    train: &[FeatureMatrix],
    phone_labels: Option<&FrameLabels>,
) -> Result<(BnExtractor, BnReport)> {
    let bn = &cfg.bnfeat;
    let (labels, stcl_objective): (Vec<Vec<usize>>, Vec<f64>) = match bn.labels {
        BnLabels::Phone => {
            let given = phone_labels.ok_or_else(|| Error::config("bnfeat.labels", "phone labels need a frame-label file"))?;
            let map: BTreeMap<&str, &Vec<usize>> = given.iter().map(|(id, l)| (id.as_str(), l)).collect();
            let labels = train_ids
                .iter()
                .zip(train)
                .map(|(id, f)| {
                    let l = map.get(id.as_str()).ok_or_else(|| Error::invalid(format!("no frame labels for `{id}`")))?;
                    if l.len() != f.rows() {
                        return Err(Error::invalid(format!(
                            "`{id}` has {} frames but {} labels",
                            f.rows(),
                            l.len()
                        )));
                    }
                    Ok((*l).clone())
                })
                .collect::<Result<Vec<_>>>()?;
            (labels, Vec::new())
        }
        BnLabels::Stcl => {
            let res = stcl_labels(train, &bn.stcl(stage_seed(cfg.seed, "stcl")))?;
            (res.labels, res.objective)
        }
    };
    let n_classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    if n_classes < 2 {
        return Err(Error::invalid("frame labels name fewer than two classes"));
    }
    let total: usize = train.iter().map(|f| f.rows()).sum();
    let picks = subsample(total, bn.max_train_frames, stage_seed(cfg.seed, "bn-frames"));
    let mut offsets = Vec::with_capacity(train.len());
    let mut acc = 0;
    for f in train {
        offsets.push(acc);
        acc += f.rows();
    }
    let stacked: Vec<FeatureMatrix> = ordered_map(train, |f| stack_context(f, bn.context, bn.context));
    let in_dim = stacked.first().map_or(0, |s| s.dim());
    let flat_labels: Vec<usize> = labels.iter().flatten().copied().collect();
    let locate = |g: usize| {
        let u = offsets.partition_point(|&o| o <= g) - 1;
        (u, g - offsets[u])
    };
    let mut data = Vec::with_capacity(picks.len() * in_dim);
    let mut y = Vec::with_capacity(picks.len());
    for &g in &picks {
        let (u, t) = locate(g);
        data.extend_from_slice(stacked[u].row(t));
        y.push(flat_labels[g]);
    }
    let inputs = FeatureMatrix::new(picks.len(), in_dim, data)?;
    let fit = train_mlp(&inputs, &y, n_classes, &bn.hidden, &bn.sgd(stage_seed(cfg.seed, "mlp")))?;

    let pca_picks = subsample(inputs.rows(), bn.pca_max_frames, stage_seed(cfg.seed, "pca"));
    let pca_in = FeatureMatrix::from_rows(&pca_picks.iter().map(|&i| inputs.row(i)).collect::<Vec<_>>())?;
    let hidden = fit.model.hidden_output(&pca_in, bn.tap_layer, bn.tap)?;
    let pca = PcaTransform::fit(&hidden, bn.pca_dim)?;
    Ok((
        BnExtractor {
            mlp: fit.model,
            pca,
            context: bn.context,
            tap_layer: bn.tap_layer,
            tap: bn.tap,
            post_cmvn: bn.post_cmvn,
        },
        BnReport {
            losses: fit.losses,
            stcl_objective,
            n_classes,
            train_frames: picks.len(),
        },
    ))
}

/// Utterances grouped by phrase, phrases in sorted order.
fn by_phrase<'a>(records: &'a [UtteranceRecord], feats: &'a [FeatureMatrix]) -> BTreeMap<&'a str, Vec<&'a FeatureMatrix>> {
    let mut out: BTreeMap<&str, Vec<&FeatureMatrix>> = BTreeMap::new();
    for (r, f) in records.iter().zip(feats) {
        out.entry(r.phrase_id.as_str()).or_default().push(f);
    }
    out
}

/// Pooled-data UBM, or phrase GMMs merged with weights scaled by the number
/// of phrases.
pub fn train_ubm(cfg: &PipelineConfig, records: &[UtteranceRecord], feats: &[FeatureMatrix]) -> Result<DiagGmm> {
    if cfg.ubm.phrase_merged {
        let groups: Vec<(String, FeatureMatrix)> = by_phrase(records, feats)
            .into_iter()
            .map(|(p, fs)| Ok((p.to_string(), FeatureMatrix::vstack(fs)?)))
            .collect::<Result<_>>()?;
        let gmms = try_ordered_map(&groups, |(p, f)| {
            train_gmm_em(f, &cfg.ubm.train_config(stage_seed(cfg.seed, &format!("ubm-{p}")))).map(|g| g.model)
        })?;
        merge_gmms(&gmms)
    } else {
        let pooled = FeatureMatrix::vstack(feats)?;
        Ok(train_gmm_em(&pooled, &cfg.ubm.train_config(stage_seed(cfg.seed, "ubm")))?.model)
    }
}

pub fn train_pbm_set(cfg: &PipelineConfig, ubm: &DiagGmm, records: &[UtteranceRecord], feats: &[FeatureMatrix]) -> Result<PbmSet> {
    let groups: Vec<(String, FeatureMatrix)> = by_phrase(records, feats)
        .into_iter()
        .map(|(p, fs)| Ok((p.to_string(), FeatureMatrix::vstack(fs)?)))
        .collect::<Result<_>>()?;
    build_pbms(ubm, &groups, &cfg.pbm)
}

fn enrollment<'a>(model: &EnrollmentModel, feats: &'a FeatureStore) -> Result<Vec<&'a FeatureMatrix>> {
    model.enroll_utts.iter().map(|u| lookup(feats, u, "features")).collect()
}

/// A target model per enrollment model, adapted from the UBM.
pub fn enroll_gmm_ubm(cfg: &PipelineConfig, ubm: &DiagGmm, models: &[EnrollmentModel], feats: &FeatureStore) -> Result<Vec<DiagGmm>> {
    try_ordered_map(models, |m| {
        let pooled = FeatureMatrix::vstack(enrollment(m, feats)?)?;
        map_adapt(ubm, &pooled, &cfg.map)
    })
}

pub fn enroll_pbm(cfg: &PipelineConfig, pbms: &PbmSet, models: &[EnrollmentModel], feats: &FeatureStore) -> Result<Vec<SpeakerPhraseModel>> {
    try_ordered_map(models, |m| {
        let utts: Vec<FeatureMatrix> = enrollment(m, feats)?.into_iter().cloned().collect();
        enroll_speaker(pbms, &m.speaker_id, &utts, &cfg.map)
    })
}

fn model_index(models: &[EnrollmentModel]) -> BTreeMap<&str, usize> {
    models.iter().enumerate().map(|(i, m)| (m.model_id.as_str(), i)).collect()
}

fn trial_model<'a>(idx: &BTreeMap<&str, usize>, t: &'a Trial) -> Result<usize> {
    idx.get(t.model_id.as_str())
        .copied()
        .ok_or_else(|| Error::invalid(format!("trial names unknown model `{}`", t.model_id)))
}

/// Target-vs-UBM average log-likelihood ratio per trial.
pub fn score_gmm_ubm(
    ubm: &DiagGmm,
    models: &[EnrollmentModel],
    targets: &[DiagGmm],
    trials: &[Trial],
    feats: &FeatureStore,
) -> Result<Vec<f64>> {
    let idx = model_index(models);
    let tests = unique_tests(trials);
    let background: BTreeMap<&str, f64> = tests
        .iter()
        .copied()
        .zip(try_ordered_map(&tests, |id| ubm.avg_log_likelihood(lookup(feats, id, "features")?))?)
        .collect();
    try_ordered_map(trials, |t| {
        let m = trial_model(&idx, t)?;
        let test = lookup(feats, &t.test_utt, "features")?;
        Ok(targets[m].avg_log_likelihood(test)? - background[t.test_utt.as_str()])
    })
}

/// Distinct test utterance ids of `trials`, sorted.
fn unique_tests(trials: &[Trial]) -> Vec<&str> {
    let mut v: Vec<&str> = trials.iter().map(|t| t.test_utt.as_str()).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// ASV scores (target vs best PBM of the test) and UV scores (claimed
/// phrase vs best rival PBM) per trial.
pub fn score_pbm(
    pbms: &PbmSet,
    models: &[EnrollmentModel],
    targets: &[SpeakerPhraseModel],
    trials: &[Trial],
    feats: &FeatureStore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let idx = model_index(models);
    let tests = unique_tests(trials);
    let lls: BTreeMap<&str, Vec<f64>> = tests
        .iter()
        .copied()
        .zip(try_ordered_map(&tests, |id| pbms.log_likelihoods(lookup(feats, id, "features")?))?)
        .collect();
    let scored = try_ordered_map(trials, |t| -> Result<(f64, f64)> {
        let m = trial_model(&idx, t)?;
        let test = lookup(feats, &t.test_utt, "features")?;
        let ll = &lls[t.test_utt.as_str()];
        let best = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let asv = verify_with_background(&targets[m], best, test)?;
        let claimed = pbms
            .index_of(&models[m].phrase_id)
            .ok_or_else(|| Error::invalid(format!("phrase `{}` has no PBM", models[m].phrase_id)))?;
        Ok((asv, uv_score_from(ll, claimed)?))
    })?;
    Ok(scored.into_iter().unzip())
}

/// Total-variability model and the i-vector of every supplied utterance.
pub fn train_ivector_extractor(cfg: &PipelineConfig, ubm: &DiagGmm, train: &[FeatureMatrix]) -> Result<TotalVariabilityModel> {
    let stats: Vec<BaumWelchStats> = try_ordered_map(train, |f| accumulate_stats(ubm, f))?;
    Ok(train_total_variability(ubm, &stats, &cfg.tv_config())?.model)
}

pub fn extract_ivectors(tv: &TotalVariabilityModel, ubm: &DiagGmm, feats: &[FeatureMatrix]) -> Result<Vec<Vec<f64>>> {
    try_ordered_map(feats, |f| tv.extract(&accumulate_stats(ubm, f)?))
}

/// LDA, whitening with length normalisation, PLDA and one averaged model
/// vector per phrase.
#[derive(Debug, Clone)]
pub struct UvBackend {
    pub lda: LdaTransform,
    pub whitener: Whitener,
    pub plda: PldaModel,
    pub phrase_ids: Vec<String>,
    pub phrase_models: Vec<Vec<f64>>,
}

impl UvBackend {
    pub fn train(cfg: &PipelineConfig, ivectors: &[Vec<f64>], phrases: &[String]) -> Result<Self> {
        let lda = train_lda(ivectors, phrases, cfg.lda.out_dim)?;
        let projected = lda.apply_all(ivectors)?;
        let whitener = Whitener::fit(&projected)?;
        let processed = whitener.apply_all(&projected)?;
        let plda = train_plda(&processed, phrases, &cfg.plda)?.model;
        let mut groups: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
        for (v, p) in processed.iter().zip(phrases) {
            groups.entry(p.as_str()).or_default().push(v);
        }
        let phrase_ids = groups.keys().map(|p| p.to_string()).collect();
        let phrase_models = groups.values().map(|vs| average(vs)).collect::<Result<_>>()?;
        Ok(Self {
            lda,
            whitener,
            plda,
            phrase_ids,
            phrase_models,
        })
    }

    /// Writes `lda.slda`, `whitener.swht`, `plda.splda` and the phrase
    /// models under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.lda.write(&dir.join("lda.slda"))?;
        self.whitener.write(&dir.join("whitener.swht"))?;
        self.plda.write(&dir.join("plda.splda"))?;
        write_embeddings(&dir.join("phrases.ids"), &dir.join("phrases.sdsv"), &self.phrase_ids, &self.phrase_models)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let (phrase_ids, phrase_models) = read_embeddings(&dir.join("phrases.ids"), &dir.join("phrases.sdsv"))?;
        Ok(Self {
            lda: LdaTransform::read(&dir.join("lda.slda"))?,
            whitener: Whitener::read(&dir.join("whitener.swht"))?,
            plda: PldaModel::read(&dir.join("plda.splda"))?,
            phrase_ids,
            phrase_models,
        })
    }

    pub fn process(&self, ivector: &[f64]) -> Result<Vec<f64>> {
        self.whitener.apply(&self.lda.apply(ivector)?)
    }

    /// PLDA score against every phrase model, in `phrase_ids` order.
    pub fn phrase_scores(&self, ivector: &[f64]) -> Result<Vec<f64>> {
        let x = self.process(ivector)?;
        self.phrase_models.iter().map(|m| self.plda.score(m, &x)).collect()
    }

    /// Normalised claimed-phrase score: minus the best rival, or minus the
    /// rival mean when `mean_norm` is set.
    pub fn score(&self, scores: &[f64], claimed_phrase: &str, mean_norm_rivals: bool) -> Result<f64> {
        let i = self
            .phrase_ids
            .iter()
            .position(|p| p == claimed_phrase)
            .ok_or_else(|| Error::invalid(format!("phrase `{claimed_phrase}` has no UV model")))?;
        if mean_norm_rivals {
            mean_norm(scores, i)
        } else {
            max_norm(scores, i)
        }
    }

    pub fn score_trials(
        &self,
        models: &[EnrollmentModel],
        trials: &[Trial],
        ivectors: &BTreeMap<String, Vec<f64>>,
        mean_norm_rivals: bool,
    ) -> Result<Vec<f64>> {
        let idx = model_index(models);
        let tests = unique_tests(trials);
        let per_test = try_ordered_map(&tests, |id| self.phrase_scores(lookup(ivectors, id, "i-vector")?))?;
        let cache: BTreeMap<&str, Vec<f64>> = tests.iter().copied().zip(per_test).collect();
        trials
            .iter()
            .map(|t| self.score(&cache[t.test_utt.as_str()], &models[trial_model(&idx, t)?].phrase_id, mean_norm_rivals))
            .collect()
    }
}

/// Centering, whitening, length normalisation, PLDA and AS-norm against a
/// cohort of processed training embeddings.
#[derive(Debug, Clone)]
pub struct AsvBackend {
    pub whitener: Whitener,
    pub plda: PldaModel,
    pub cohort: Vec<Vec<f64>>,
}

impl AsvBackend {
    pub fn train<L: Ord + Clone>(cfg: &PipelineConfig, embeddings: &[Vec<f64>], labels: &[L]) -> Result<Self> {
        let whitener = Whitener::fit(embeddings)?;
        let processed = whitener.apply_all(embeddings)?;
        let plda = train_plda(&processed, labels, &cfg.plda)?.model;
        Ok(Self {
            whitener,
            plda,
            cohort: processed,
        })
    }

    /// Writes `whitener.swht`, `plda.splda` and the cohort under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.whitener.write(&dir.join("whitener.swht"))?;
        self.plda.write(&dir.join("plda.splda"))?;
        let ids: Vec<String> = (0..self.cohort.len()).map(|i| format!("cohort{i:06}")).collect();
        write_embeddings(&dir.join("cohort.ids"), &dir.join("cohort.sdsv"), &ids, &self.cohort)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            whitener: Whitener::read(&dir.join("whitener.swht"))?,
            plda: PldaModel::read(&dir.join("plda.splda"))?,
            cohort: read_embeddings(&dir.join("cohort.ids"), &dir.join("cohort.sdsv"))?.1,
        })
    }

    fn cohort_stats(&self, v: &[f64], top_k: usize) -> Result<(f64, f64)> {
        let scores: Vec<f64> = self.cohort.iter().map(|c| self.plda.score(v, c)).collect::<Result<_>>()?;
        top_k_stats(&scores, top_k.min(scores.len()))
    }

    /// Average of the processed enrollment embeddings of each model.
    pub fn enroll(&self, models: &[EnrollmentModel], embeddings: &BTreeMap<String, Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        try_ordered_map(models, |m| {
            let vs = m
                .enroll_utts
                .iter()
                .map(|u| self.whitener.apply(lookup(embeddings, u, "embedding")?))
                .collect::<Result<Vec<_>>>()?;
            average(&vs.iter().map(|v| v.as_slice()).collect::<Vec<_>>())
        })
    }

    /// AS-norm PLDA scores of enrolled model vectors against test
    /// embeddings, with cohort statistics over the `top_k` best scores.
    pub fn score_trials(
        &self,
        models: &[EnrollmentModel],
        enrolled: &[Vec<f64>],
        trials: &[Trial],
        embeddings: &BTreeMap<String, Vec<f64>>,
        top_k: usize,
    ) -> Result<Vec<f64>> {
        ensure_dim(models.len(), enrolled.len())?;
        let enroll_stats = try_ordered_map(enrolled, |v| self.cohort_stats(v, top_k))?;
        let tests = unique_tests(trials);
        let processed = try_ordered_map(&tests, |id| self.whitener.apply(lookup(embeddings, id, "embedding")?))?;
        let test_stats = try_ordered_map(&processed, |v| self.cohort_stats(v, top_k))?;
        let tindex: BTreeMap<&str, usize> = tests.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        let idx = model_index(models);
        try_ordered_map(trials, |t| {
            let m = trial_model(&idx, t)?;
            let j = tindex[t.test_utt.as_str()];
            let raw = self.plda.score(&enrolled[m], &processed[j])?;
            Ok(as_norm_with(raw, enroll_stats[m], test_stats[j]))
        })
    }
}
