//! Pass-phrase-dependent background models (PBMs).
//!
//! Each phrase gets its own background, MAP-adapted from the UBM. Speakers
//! are enrolled from the PBM that best explains their enrollment frames, and
//! a test utterance is scored against the PBM that best explains the test
//! itself, so a phrase mismatch lowers the score.

use std::path::Path;

use crate::binio::{read_file, BinReader, BinWriter};
use crate::error::{ensure_dim, Error, Result};
use crate::gmm::{map_adapt, DiagGmm, MapConfig};
use crate::matrix::FeatureMatrix;
use crate::parallel::try_ordered_map;

const SET_MAGIC: &[u8; 4] = b"SPBM";
const MODEL_MAGIC: &[u8; 4] = b"SSPM";

#[derive(Debug, Clone, PartialEq)]
pub struct PbmSet {
    phrase_ids: Vec<String>,
    models: Vec<DiagGmm>,
    parent: DiagGmm,
}

impl PbmSet {
    pub fn new(phrase_ids: Vec<String>, models: Vec<DiagGmm>, parent: DiagGmm) -> Result<Self> {
        if phrase_ids.len() != models.len() {
            return Err(Error::invalid("one model per phrase id is required"));
        }
        if models.len() < 2 {
            return Err(Error::invalid("a PBM set needs at least two phrases"));
        }
        for m in &models {
            if m.n_components() != parent.n_components() || m.dim() != parent.dim() {
                return Err(Error::invalid("PBMs must share K and D with their parent"));
            }
        }
        let mut sorted = phrase_ids.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate phrase id in PBM set"));
        }
        Ok(Self {
            phrase_ids,
            models,
            parent,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn phrase_ids(&self) -> &[String] {
        &self.phrase_ids
    }

    pub fn models(&self) -> &[DiagGmm] {
        &self.models
    }

    pub fn parent(&self) -> &DiagGmm {
        &self.parent
    }

    pub fn index_of(&self, phrase: &str) -> Option<usize> {
        self.phrase_ids.iter().position(|p| p == phrase)
    }

    /// Average log-likelihood of `features` under every PBM, in set order.
    pub fn log_likelihoods(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Err(Error::empty("no frames to score against PBMs"));
        }
        self.models.iter().map(|m| m.avg_log_likelihood(features)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::with_header(SET_MAGIC);
        w.len_u32(self.len())?;
        for (id, m) in self.phrase_ids.iter().zip(&self.models) {
            w.string(id)?;
            m.write_record(&mut w)?;
        }
        self.parent.write_record(&mut w)?;
        w.write_to(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::new(&bytes, path);
        r.header(SET_MAGIC)?;
        let n = r.usize()?;
        let (mut ids, mut models) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            ids.push(r.string()?);
            models.push(DiagGmm::read_record(&mut r)?);
        }
        let parent = DiagGmm::read_record(&mut r)?;
        r.finish()?;
        Self::new(ids, models, parent).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Argmax with the lowest index winning ties.
fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// MAP-adapts one PBM per phrase from `ubm`.
pub fn build_pbms(
    ubm: &DiagGmm,
    phrase_data: &[(String, FeatureMatrix)],
    map_cfg: &MapConfig,
) -> Result<PbmSet> {
    map_cfg.validate()?;
    if phrase_data.len() < 2 {
        return Err(Error::invalid("at least two phrases are needed to build PBMs"));
    }
    for (id, feats) in phrase_data {
        if feats.is_empty() {
            return Err(Error::empty(format!("phrase {id} has no frames")));
        }
        ensure_dim(ubm.dim(), feats.dim())?;
    }
    let models = try_ordered_map(phrase_data, |(_, f)| map_adapt(ubm, f, map_cfg))?;
    let ids = phrase_data.iter().map(|(id, _)| id.clone()).collect();
    PbmSet::new(ids, models, ubm.clone())
}

/// Phrase id and score of the PBM with the highest average log-likelihood.
pub fn select_best_pbm(pbms: &PbmSet, features: &FeatureMatrix) -> Result<(String, f64)> {
    let lls = pbms.log_likelihoods(features)?;
    let (i, ll) = argmax(&lls);
    Ok((pbms.phrase_ids[i].clone(), ll))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerPhraseModel {
    pub speaker_id: String,
    /// Phrase of the PBM the model was adapted from.
    pub phrase_id: String,
    pub model: DiagGmm,
}

impl SpeakerPhraseModel {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::with_header(MODEL_MAGIC);
        w.string(&self.speaker_id)?;
        w.string(&self.phrase_id)?;
        self.model.write_record(&mut w)?;
        w.write_to(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::new(&bytes, path);
        r.header(MODEL_MAGIC)?;
        let speaker_id = r.string()?;
        let phrase_id = r.string()?;
        let model = DiagGmm::read_record(&mut r)?;
        r.finish()?;
        Ok(Self {
            speaker_id,
            phrase_id,
            model,
        })
    }
}

/// Pools the enrollment frames, picks the best PBM on the pool and adapts
/// the target model from it.
pub fn enroll_speaker(
    pbms: &PbmSet,
    speaker_id: &str,
    enrollment: &[FeatureMatrix],
    map_cfg: &MapConfig,
) -> Result<SpeakerPhraseModel> {
    if enrollment.is_empty() {
        return Err(Error::empty(format!("speaker {speaker_id} has no enrollment utterances")));
    }
    if enrollment.iter().any(|u| u.is_empty()) {
        return Err(Error::empty(format!("speaker {speaker_id} has an empty enrollment utterance")));
    }
    let pooled = FeatureMatrix::vstack(enrollment)?;
    let (phrase_id, _) = select_best_pbm(pbms, &pooled)?;
    let best = &pbms.models[pbms.index_of(&phrase_id).expect("selected phrase exists")];
    Ok(SpeakerPhraseModel {
        speaker_id: speaker_id.to_string(),
        phrase_id,
        model: map_adapt(best, &pooled, map_cfg)?,
    })
}

/// Target log-likelihood minus that of the test utterance's own best PBM.
pub fn verify(model: &SpeakerPhraseModel, pbms: &PbmSet, test: &FeatureMatrix) -> Result<f64> {
    let (_, best) = select_best_pbm(pbms, test)?;
    verify_with_background(model, best, test)
}

/// `verify` with the best-PBM log-likelihood of `test` already computed.
pub fn verify_with_background(
    model: &SpeakerPhraseModel,
    best_pbm_ll: f64,
    test: &FeatureMatrix,
) -> Result<f64> {
    Ok(model.model.avg_log_likelihood(test)? - best_pbm_ll)
}

/// Claimed-phrase log-likelihood minus the best competing phrase.
pub fn uv_score(pbms: &PbmSet, claimed_phrase: &str, features: &FeatureMatrix) -> Result<f64> {
    let lls = pbms.log_likelihoods(features)?;
    uv_score_from(&lls, pbms.index_of(claimed_phrase).ok_or_else(|| {
        Error::invalid(format!("claimed phrase {claimed_phrase} is not in the PBM set"))
    })?)
}

/// `uv_score` from precomputed per-PBM log-likelihoods.
pub fn uv_score_from(lls: &[f64], claimed: usize) -> Result<f64> {
    if lls.len() < 2 {
        return Err(Error::invalid("UV scoring needs at least two phrases"));
    }
    if claimed >= lls.len() {
        return Err(Error::invalid("claimed phrase index out of range"));
    }
    let rival = lls
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != claimed)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(lls[claimed] - rival)
}
