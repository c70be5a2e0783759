use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sdsv::bnfeat::read_frame_labels;
use sdsv::fusion::{apply_frozen, fit_recipe, FrozenFusion, FusionRecipe, StageRecipe};
use sdsv::gmm::DiagGmm;
use sdsv::ivector::{average, TotalVariabilityModel};
use sdsv::metrics::{compute_eer, compute_min_dcf, condition_report, det_points, det_text, read_scores, write_scores, Condition, ScoreLine};
use sdsv::pbm::{PbmSet, SpeakerPhraseModel};
use sdsv::pipeline::{
    enroll_gmm_ubm, enroll_pbm, extract_ivectors, score_gmm_ubm, score_pbm, train_bn, train_ivector_extractor,
    train_pbm_set, train_ubm, AsvBackend, BnExtractor, FeatureStore, PipelineConfig, SystemKind, UvBackend,
    load_features,
};
use sdsv::plda::{read_embeddings, write_embeddings};
use sdsv::synthgen::{generate_corpus, SynthMode, SynthSpec};
use sdsv::trials::{
    build_dev_set, pseudo_gender_filter, read_manifest, read_models, read_trials, write_manifest, write_models,
    write_trials, Trial, UtteranceRecord,
};
use sdsv::{Error, FeatureMatrix, Result};

use crate::{Cli, Command, EmbeddingArgs, ModeArg};

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

struct Ctx {
    cfg: PipelineConfig,
    work: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    fn ubm(&self) -> Result<DiagGmm> {
        DiagGmm::read(&self.path("ubm.sgmm"))
    }

    fn tv(&self, ubm: &DiagGmm) -> Result<TotalVariabilityModel> {
        TotalVariabilityModel::read(&self.path("tv.stvm"), ubm)
    }

    fn bn(&self) -> Result<Option<BnExtractor>> {
        if self.cfg.bnfeat.enabled {
            Ok(Some(BnExtractor::read(&self.path("bn"))?))
        } else {
            Ok(None)
        }
    }

    /// Front-end features of `records`. Waveforms pass through the trained
    /// bottleneck extractor when `with_bn` is set and the system enables it;
    /// feature files are taken as final.
    fn features(&self, records: &[UtteranceRecord], with_bn: bool) -> Result<Vec<FeatureMatrix>> {
        let bn = if with_bn && records.iter().any(is_wav) { self.bn()? } else { None };
        sdsv::parallel::try_ordered_map(records, |r| {
            let f = load_features(r, &self.cfg.frontend)?;
            match (&bn, is_wav(r)) {
                (Some(bn), true) => bn.apply(&f),
                _ => Ok(f),
            }
        })
    }

    fn store(&self, records: &[UtteranceRecord]) -> Result<FeatureStore> {
        Ok(sdsv::pipeline::store(records, self.features(records, true)?))
    }

    fn require(&self, allowed: &[SystemKind], what: &str) -> Result<()> {
        if allowed.contains(&self.cfg.system) {
            Ok(())
        } else {
            Err(Error::Config {
                key: "system".into(),
                reason: format!("`{what}` does not apply to system {:?}", self.cfg.system),
            })
        }
    }
}

fn is_wav(r: &UtteranceRecord) -> bool {
    r.path.extension().and_then(|e| e.to_str()) == Some("wav")
}

fn embeddings(args: &EmbeddingArgs) -> Result<Option<BTreeMap<String, Vec<f64>>>> {
    match (&args.embedding_ids, &args.embeddings) {
        (Some(ids), Some(m)) => {
            let (ids, vs) = read_embeddings(ids, m)?;
            Ok(Some(ids.into_iter().zip(vs).collect()))
        }
        _ => Ok(None),
    }
}

fn require_embeddings(args: &EmbeddingArgs) -> Result<BTreeMap<String, Vec<f64>>> {
    embeddings(args)?.ok_or_else(|| invalid("this system ingests embeddings: pass --embedding-ids and --embeddings"))
}

fn manifest_arg(m: &Option<PathBuf>) -> Result<Vec<UtteranceRecord>> {
    read_manifest(m.as_deref().ok_or_else(|| invalid("--manifest is required for this system"))?)
}

/// Records of `manifest` named in `ids`, in manifest order.
fn select(manifest: &[UtteranceRecord], ids: &[&str]) -> Result<Vec<UtteranceRecord>> {
    let by_id: BTreeMap<&str, &UtteranceRecord> = manifest.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    for id in ids {
        if !by_id.contains_key(id) {
            return Err(invalid(format!("utterance `{id}` is not in the manifest")));
        }
    }
    let wanted: std::collections::BTreeSet<&str> = ids.iter().copied().collect();
    Ok(manifest.iter().filter(|r| wanted.contains(r.utt_id.as_str())).cloned().collect())
}

fn score_lines(trials: &[Trial], scores: Vec<f64>) -> Vec<ScoreLine> {
    trials
        .iter()
        .zip(scores)
        .map(|(t, score)| ScoreLine {
            model: t.model_id.clone(),
            test: t.test_utt.clone(),
            score,
        })
        .collect()
}

fn model_file(ctx: &Ctx, id: &str, ext: &str) -> PathBuf {
    ctx.path("models").join(format!("{id}.{ext}"))
}

pub fn run(cli: &Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .map_err(|e| invalid(format!("cannot start the worker pool: {e}")))?;
    let cfg = PipelineConfig::load(cli.preset.as_deref(), &cli.configs)?;
    let work = cli.work.clone().unwrap_or_else(|| cfg.work_dir(Path::new("work")));
    let ctx = Ctx { cfg, work };
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Features(a) => {
            let records = read_manifest(&a.manifest)?;
            let feats = ctx.features(&records, true)?;
            mkdir(&a.out)?;
            let mut out = Vec::with_capacity(records.len());
            for (r, f) in records.iter().zip(&feats) {
                let rel = PathBuf::from(format!("{}.sdsv", r.utt_id));
                f.write_sdsv(&a.out.join(&rel))?;
                out.push(UtteranceRecord { path: rel, ..r.clone() });
            }
            write_manifest(&a.out.join("manifest.txt"), &out)
        }
        Command::TrainBn(a) => {
            ctx.require(&[SystemKind::Pbm, SystemKind::GmmUbm], "train-bn")?;
            let records = read_manifest(&a.train)?;
            let feats = ctx.features(&records, false)?;
            let labels = a.frame_labels.as_deref().map(read_frame_labels).transpose()?;
            let ids: Vec<String> = records.iter().map(|r| r.utt_id.clone()).collect();
            let (bn, report) = train_bn(&ctx.cfg, &ids, &feats, labels.as_ref())?;
            log::info!(
                "bottleneck network: {} classes, {} frames, epoch losses {:?}",
                report.n_classes,
                report.train_frames,
                report.losses
            );
            bn.write(&ctx.path("bn"))
        }
        Command::TrainUbm(a) => {
            let records = read_manifest(&a.train)?;
            let feats = ctx.features(&records, true)?;
            let ubm = train_ubm(&ctx.cfg, &records, &feats)?;
            mkdir(&ctx.work)?;
            ubm.write(&ctx.path("ubm.sgmm"))
        }
        Command::TrainPbm(a) => {
            let records = read_manifest(&a.train)?;
            let feats = ctx.features(&records, true)?;
            let pbms = train_pbm_set(&ctx.cfg, &ctx.ubm()?, &records, &feats)?;
            pbms.write(&ctx.path("pbm.spbm"))
        }
        Command::TrainTv(a) => {
            let records = read_manifest(&a.train)?;
            let ubm = ctx.ubm()?;
            let tv = train_ivector_extractor(&ctx.cfg, &ubm, &ctx.features(&records, true)?)?;
            tv.write(&ctx.path("tv.stvm"))?;
            if let Some(export) = &a.export {
                let recs = read_manifest(export)?;
                let ivs = extract_ivectors(&tv, &ubm, &ctx.features(&recs, true)?)?;
                let ids: Vec<String> = recs.iter().map(|r| r.utt_id.clone()).collect();
                write_embeddings(&ctx.path("ivectors.ids"), &ctx.path("ivectors.sdsv"), &ids, &ivs)?;
            }
            Ok(())
        }
        Command::TrainPlda(a) => {
            let records = read_manifest(&a.train)?;
            match ctx.cfg.system {
                SystemKind::IvectorUv => {
                    let ubm = ctx.ubm()?;
                    let tv = ctx.tv(&ubm)?;
                    let ivs = extract_ivectors(&tv, &ubm, &ctx.features(&records, true)?)?;
                    let phrases: Vec<String> = records.iter().map(|r| r.phrase_id.clone()).collect();
                    UvBackend::train(&ctx.cfg, &ivs, &phrases)?.write(&ctx.path("uv"))
                }
                SystemKind::PldaBackend => {
                    let emb = require_embeddings(&a.emb)?;
                    let vs = records
                        .iter()
                        .map(|r| emb.get(&r.utt_id).cloned().ok_or_else(|| invalid(format!("no embedding for `{}`", r.utt_id))))
                        .collect::<Result<Vec<_>>>()?;
                    let labels: Vec<(String, String)> =
                        records.iter().map(|r| (r.speaker_id.clone(), r.phrase_id.clone())).collect();
                    AsvBackend::train(&ctx.cfg, &vs, &labels)?.write(&ctx.path("plda"))
                }
                _ => ctx.require(&[SystemKind::IvectorUv, SystemKind::PldaBackend], "train-plda"),
            }
        }
        Command::Enroll(a) => enroll(&ctx, a),
        Command::Score(a) => score(&ctx, a),
        Command::DevSplit(a) => dev_split(a),
        Command::Fuse(a) => fuse(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::ShowConfig => {
            print!("{}", ctx.cfg.to_toml()?);
            Ok(())
        }
    }
}

fn synth(a: &crate::SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io(p, e))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| Error::Config {
                key: "synth".into(),
                reason: e.message().to_string(),
            })?
        }
        None => SynthSpec::default(),
    };
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut spec.n_speakers, a.speakers);
    set(&mut spec.n_phrases, a.phrases);
    set(&mut spec.utts_per_pair, a.utts);
    let setf = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    setf(&mut spec.utt_duration_s, a.duration);
    setf(&mut spec.speaker_sep, a.speaker_sep);
    setf(&mut spec.phrase_sep, a.phrase_sep);
    setf(&mut spec.noise_level, a.noise);
    if let Some(m) = a.mode {
        spec.mode = match m {
            ModeArg::Waveform => SynthMode::Waveform,
            ModeArg::Feature => SynthMode::Feature,
        };
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let corpus = generate_corpus(&spec, &a.out)?;
    log::info!("wrote {} utterances to {}", corpus.records.len(), a.out.display());
    Ok(())
}

fn enroll(ctx: &Ctx, a: &crate::EnrollArgs) -> Result<()> {
    let models = read_models(&a.models)?;
    let enroll_ids = || -> Vec<&str> { models.iter().flat_map(|m| m.enroll_utts.iter().map(String::as_str)).collect() };
    match ctx.cfg.system {
        SystemKind::GmmUbm => {
            let feats = ctx.store(&select(&manifest_arg(&a.manifest)?, &enroll_ids())?)?;
            let targets = enroll_gmm_ubm(&ctx.cfg, &ctx.ubm()?, &models, &feats)?;
            mkdir(&ctx.path("models"))?;
            for (m, t) in models.iter().zip(&targets) {
                t.write(&model_file(ctx, &m.model_id, "sgmm"))?;
            }
            Ok(())
        }
        SystemKind::Pbm => {
            let feats = ctx.store(&select(&manifest_arg(&a.manifest)?, &enroll_ids())?)?;
            let pbms = PbmSet::read(&ctx.path("pbm.spbm"))?;
            let targets = enroll_pbm(&ctx.cfg, &pbms, &models, &feats)?;
            mkdir(&ctx.path("models"))?;
            for (m, t) in models.iter().zip(&targets) {
                t.write(&model_file(ctx, &m.model_id, "sspm"))?;
            }
            Ok(())
        }
        SystemKind::PldaBackend => {
            let backend = AsvBackend::read(&ctx.path("plda"))?;
            let enrolled = backend.enroll(&models, &require_embeddings(&a.emb)?)?;
            let ids: Vec<String> = models.iter().map(|m| m.model_id.clone()).collect();
            write_embeddings(&ctx.path("enrolled.ids"), &ctx.path("enrolled.sdsv"), &ids, &enrolled)
        }
        SystemKind::IvectorUv => {
            log::info!("ivector_uv scores against its phrase models; nothing to enroll");
            Ok(())
        }
    }
}

fn score(ctx: &Ctx, a: &crate::ScoreArgs) -> Result<()> {
    let models = read_models(&a.models)?;
    let trials = read_trials(&a.trials)?;
    let test_ids = || -> Vec<&str> {
        let mut v: Vec<&str> = trials.iter().map(|t| t.test_utt.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    if a.uv_out.is_some() && ctx.cfg.system != SystemKind::Pbm {
        return Err(invalid("--uv-out applies to the pbm system only"));
    }
    let scores = match ctx.cfg.system {
        SystemKind::GmmUbm => {
            let feats = ctx.store(&select(&manifest_arg(&a.manifest)?, &test_ids())?)?;
            let targets = models
                .iter()
                .map(|m| DiagGmm::read(&model_file(ctx, &m.model_id, "sgmm")))
                .collect::<Result<Vec<_>>>()?;
            score_gmm_ubm(&ctx.ubm()?, &models, &targets, &trials, &feats)?
        }
        SystemKind::Pbm => {
            let feats = ctx.store(&select(&manifest_arg(&a.manifest)?, &test_ids())?)?;
            let pbms = PbmSet::read(&ctx.path("pbm.spbm"))?;
            let targets = models
                .iter()
                .map(|m| SpeakerPhraseModel::read(&model_file(ctx, &m.model_id, "sspm")))
                .collect::<Result<Vec<_>>>()?;
            let (asv, uv) = score_pbm(&pbms, &models, &targets, &trials, &feats)?;
            if let Some(p) = &a.uv_out {
                write_scores(p, &score_lines(&trials, uv))?;
            }
            asv
        }
        SystemKind::IvectorUv => {
            let records = select(&manifest_arg(&a.manifest)?, &test_ids())?;
            let ubm = ctx.ubm()?;
            let tv = ctx.tv(&ubm)?;
            let ivs = extract_ivectors(&tv, &ubm, &ctx.features(&records, true)?)?;
            let ivs: BTreeMap<String, Vec<f64>> = records.iter().map(|r| r.utt_id.clone()).zip(ivs).collect();
            UvBackend::read(&ctx.path("uv"))?.score_trials(&models, &trials, &ivs, ctx.cfg.plda.mean_norm)?
        }
        SystemKind::PldaBackend => {
            let backend = AsvBackend::read(&ctx.path("plda"))?;
            let (ids, enrolled) = read_embeddings(&ctx.path("enrolled.ids"), &ctx.path("enrolled.sdsv"))?;
            let by_id: BTreeMap<String, Vec<f64>> = ids.into_iter().zip(enrolled).collect();
            let enrolled = models
                .iter()
                .map(|m| by_id.get(&m.model_id).cloned().ok_or_else(|| invalid(format!("model `{}` is not enrolled", m.model_id))))
                .collect::<Result<Vec<_>>>()?;
            backend.score_trials(&models, &enrolled, &trials, &require_embeddings(&a.emb)?, ctx.cfg.plda.as_norm_top_k)?
        }
    };
    write_scores(&a.out, &score_lines(&trials, scores))
}

fn dev_split(a: &crate::DevSplitArgs) -> Result<()> {
    let corpus = read_manifest(&a.manifest)?;
    let dev = build_dev_set(&corpus, a.speakers, a.enroll, a.seed)?;
    let trials = match embeddings(&a.emb)? {
        Some(emb) => {
            let mut per_speaker: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
            for r in &corpus {
                if let Some(v) = emb.get(&r.utt_id) {
                    per_speaker.entry(r.speaker_id.as_str()).or_default().push(v);
                }
            }
            let means = per_speaker
                .into_iter()
                .map(|(s, vs)| Ok((s.to_string(), average(&vs)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            pseudo_gender_filter(&dev.trials, &dev.models, &dev.tests, &means, a.seed)?
        }
        None => dev.trials.clone(),
    };
    mkdir(&a.out)?;
    write_models(&a.out.join("models.txt"), &dev.models)?;
    write_trials(&a.out.join("trials.txt"), &trials)?;
    write_manifest(&a.out.join("tests.txt"), &dev.tests)?;
    write_manifest(&a.out.join("train.txt"), &dev.train)?;
    log::info!(
        "{} models, {} tests, {} trials, {} training utterances",
        dev.models.len(),
        dev.tests.len(),
        trials.len(),
        dev.train.len()
    );
    Ok(())
}

fn fuse(ctx: &Ctx, a: &crate::FuseArgs) -> Result<()> {
    match (&a.recipe, &a.frozen) {
        (Some(r), None) => {
            let out = fit_recipe(&FusionRecipe::read(r)?, &ctx.cfg.metrics)?;
            log::info!("ASV weights {:?}", out.frozen.asv.weights.as_slice());
            if let Some(uv) = &out.frozen.uv {
                log::info!("UV weights {:?}, threshold {:?}", uv.weights.as_slice(), out.frozen.uv_threshold);
            }
            write_scores(&a.out, &out.fused)?;
            if let Some(p) = &a.frozen_out {
                out.frozen.write(p)?;
            }
            if let (Some(p), Some(uv)) = (&a.uv_out, &out.uv) {
                write_scores(p, uv)?;
            }
            Ok(())
        }
        (None, Some(f)) => {
            let frozen = FrozenFusion::read(f)?;
            let trials = read_trials(a.trials.as_deref().ok_or_else(|| invalid("--trials is required with --frozen"))?)?;
            let keys: Vec<(String, String)> = trials.iter().map(|t| (t.model_id.clone(), t.test_utt.clone())).collect();
            let uv = (!a.uv.is_empty()).then(|| StageRecipe { systems: a.uv.clone() });
            let asv = StageRecipe { systems: a.asv.clone() };
            write_scores(&a.out, &apply_frozen(&frozen, uv.as_ref(), &asv, &keys)?)
        }
        _ => Err(invalid("pass exactly one of --recipe or --frozen")),
    }
}

fn evaluate(ctx: &Ctx, a: &crate::EvaluateArgs) -> Result<()> {
    let trials = read_trials(&a.trials)?;
    let keys: Vec<(String, String)> = trials.iter().map(|t| (t.model_id.clone(), t.test_utt.clone())).collect();
    let scores = sdsv::fusion::align_columns(&[read_scores(&a.scores)?], &keys)?.remove(0);
    let conditions: Vec<Condition> = trials.iter().map(|t| t.condition).collect();
    let labels: Vec<bool> = if a.uv {
        conditions.iter().map(|c| matches!(c, Condition::TC | Condition::IC)).collect()
    } else {
        conditions.iter().map(|c| c.is_target()).collect()
    };
    if a.uv {
        let (eer, _) = compute_eer(&scores, &labels)?;
        let (dcf, _) = compute_min_dcf(&scores, &labels, &ctx.cfg.metrics)?;
        println!("{}\nUV EER(%) {:.2}\nUV minDCF {:.4}", a.title, 100.0 * eer, dcf);
    } else {
        print!("{}", condition_report(&scores, &conditions, &ctx.cfg.metrics)?.table(&a.title));
    }
    if let Some(p) = &a.det {
        std::fs::write(p, det_text(&det_points(&scores, &labels)?)).map_err(|e| io(p, e))?;
    }
    Ok(())
}
