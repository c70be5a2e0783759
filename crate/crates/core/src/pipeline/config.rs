//! Pipeline configuration: named presets, TOML overlays and environment
//! overrides of the form `SDSV_<SECTION>_<KEY>`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bnfeat::{SgdConfig, StclConfig, Tap};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::fusion::{Objective, CASCADE_FLOOR};
use crate::gmm::{GmmTrainConfig, MapConfig};
use crate::ivector::TvConfig;
use crate::metrics::DcfParams;
use crate::plda::PldaConfig;

pub const PRESET_NAMES: [&str; 7] = ["S1", "S2", "S3", "S4", "S5", "S6", "S7"];

const PRESETS: [&str; 7] = [
    include_str!("../../presets/S1.toml"),
    include_str!("../../presets/S2.toml"),
    include_str!("../../presets/S3.toml"),
    include_str!("../../presets/S4.toml"),
    include_str!("../../presets/S5.toml"),
    include_str!("../../presets/S6.toml"),
    include_str!("../../presets/S7.toml"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// i-vector, LDA, whitening, PLDA and Max-norm phrase verification.
    IvectorUv,
    /// PLDA with AS-norm on ingested embeddings.
    PldaBackend,
    /// MAP-adapted targets scored against the UBM.
    GmmUbm,
    /// Targets adapted from the best phrase background, scored against the
    /// test utterance's best phrase background.
    Pbm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UbmSection {
    /// Components of the UBM, or of each phrase GMM when merged.
    pub components: usize,
    /// Train one GMM per phrase and merge them.
    pub phrase_merged: bool,
    pub em_iters: usize,
    pub kmeans_iters: usize,
    pub var_floor: f64,
    pub max_init_frames: usize,
}

impl Default for UbmSection {
    fn default() -> Self {
        let g = GmmTrainConfig::default();
        Self {
            components: g.components,
            phrase_merged: false,
            em_iters: g.em_iters,
            kmeans_iters: g.kmeans_iters,
            var_floor: g.var_floor,
            max_init_frames: g.max_init_frames,
        }
    }
}

impl UbmSection {
    pub fn train_config(&self, seed: u64) -> GmmTrainConfig {
        GmmTrainConfig {
            components: self.components,
            em_iters: self.em_iters,
            kmeans_iters: self.kmeans_iters,
            var_floor: self.var_floor,
            max_init_frames: self.max_init_frames,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvSection {
    pub rank: usize,
    pub iters: usize,
}

impl Default for TvSection {
    fn default() -> Self {
        let t = TvConfig::default();
        Self {
            rank: t.rank,
            iters: t.iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaSection {
    pub out_dim: usize,
}

impl Default for LdaSection {
    fn default() -> Self {
        Self { out_dim: 9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnLabels {
    /// Frame labels read from a label file.
    Phone,
    /// Unsupervised sTCL labels.
    Stcl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnSection {
    pub enabled: bool,
    pub labels: BnLabels,
    /// Frames of context on each side.
    pub context: usize,
    pub hidden: Vec<usize>,
    /// 1-based hidden layer whose output is projected.
    pub tap_layer: usize,
    pub tap: Tap,
    pub pca_dim: usize,
    /// Frames sampled for the PCA fit; 0 uses all.
    pub pca_max_frames: usize,
    /// Frames sampled for network training; 0 uses all.
    pub max_train_frames: usize,
    /// Utterance-level CMVN on the projected features.
    pub post_cmvn: bool,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub stcl_chunk_len: usize,
    pub stcl_classes: usize,
    pub stcl_max_iters: usize,
}

impl Default for BnSection {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        let stcl = StclConfig::default();
        Self {
            enabled: false,
            labels: BnLabels::Phone,
            context: 5,
            hidden: vec![1024; 7],
            tap_layer: 2,
            tap: Tap::PostActivation,
            pca_dim: 57,
            pca_max_frames: 100_000,
            max_train_frames: 0,
            post_cmvn: true,
            learning_rate: sgd.learning_rate,
            lr_decay: sgd.lr_decay,
            batch_size: sgd.batch_size,
            epochs: sgd.epochs,
            stcl_chunk_len: stcl.chunk_len,
            stcl_classes: stcl.n_classes,
            stcl_max_iters: stcl.max_iters,
        }
    }
}

impl BnSection {
    pub fn sgd(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }

    pub fn stcl(&self, seed: u64) -> StclConfig {
        StclConfig {
            chunk_len: self.stcl_chunk_len,
            n_classes: self.stcl_classes,
            max_iters: self.stcl_max_iters,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub objective: Objective,
    pub step: f64,
    pub floor: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            objective: Objective::MinDcf,
            step: 0.05,
            floor: CASCADE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Working directory for intermediate artifacts; empty means the
    /// command's output directory.
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub system: SystemKind,
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub ubm: UbmSection,
    /// Target-model adaptation.
    pub map: MapConfig,
    /// Phrase-background adaptation from the UBM.
    pub pbm: MapConfig,
    pub tv: TvSection,
    pub lda: LdaSection,
    pub plda: PldaConfig,
    pub bnfeat: BnSection,
    pub fusion: FusionSection,
    pub metrics: DcfParams,
    pub paths: PathsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            system: SystemKind::GmmUbm,
            seed: 0,
            frontend: FrontendConfig::default(),
            ubm: UbmSection::default(),
            map: MapConfig::default(),
            pbm: MapConfig::default(),
            tv: TvSection::default(),
            lda: LdaSection::default(),
            plda: PldaConfig::default(),
            bnfeat: BnSection::default(),
            fusion: FusionSection::default(),
            metrics: DcfParams::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Derives independent per-stage seeds from the pipeline seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn parse_table(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| Error::config(origin, e.message().to_string()))
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves `SDSV_<SECTION>_<KEY>` against the keys of `defaults`, longest
/// underscore-joined match first, descending into nested tables.
fn resolve_env_key(defaults: &Table, tokens: &[String]) -> Option<Vec<String>> {
    for take in (1..=tokens.len()).rev() {
        let key = tokens[..take].join("_");
        match defaults.get(&key) {
            Some(Value::Table(t)) if take < tokens.len() => {
                if let Some(mut rest) = resolve_env_key(t, &tokens[take..]) {
                    rest.insert(0, key);
                    return Some(rest);
                }
            }
            Some(v) if take == tokens.len() && !v.is_table() => return Some(vec![key]),
            _ => {}
        }
    }
    None
}

fn parse_env_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, path: &[String], value: Value) {
    if path.len() == 1 {
        table.insert(path[0].clone(), value);
        return;
    }
    let entry = table
        .entry(path[0].clone())
        .or_insert_with(|| Value::Table(Table::new()));
    if let Value::Table(t) = entry {
        set_path(t, &path[1..], value);
    }
}

impl PipelineConfig {
    pub fn preset_text(name: &str) -> Result<&'static str> {
        PRESET_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| PRESETS[i])
            .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`; expected one of S1..S7")))
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::build(Some(name), &[], std::iter::empty())
    }

    /// Preset, then overlay files in order, then `SDSV_*` variables from the
    /// process environment.
    pub fn load(preset: Option<&str>, overlays: &[PathBuf]) -> Result<Self> {
        Self::build(preset, overlays, std::env::vars())
    }

    pub fn build(
        preset: Option<&str>,
        overlays: &[PathBuf],
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table = match preset {
            Some(p) => parse_table(Self::preset_text(p)?, "preset")?,
            None => Table::new(),
        };
        for path in overlays {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            merge(&mut table, parse_table(&text, &path.display().to_string())?);
        }
        let defaults = match Value::try_from(Self::default()) {
            Ok(Value::Table(t)) => t,
            _ => return Err(Error::config("defaults", "cannot tabulate the default configuration")),
        };
        let mut vars: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with("SDSV_"))
            .collect();
        vars.sort();
        for (k, v) in vars {
            let tokens: Vec<String> = k["SDSV_".len()..].split('_').map(|t| t.to_ascii_lowercase()).collect();
            let path = resolve_env_key(&defaults, &tokens)
                .ok_or_else(|| Error::config(k.clone(), "does not name a configuration key"))?;
            set_path(&mut table, &path, parse_env_value(&v));
        }
        Self::from_table(table)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text, "config")?)
    }

    fn from_table(table: Table) -> Result<Self> {
        let cfg: Self = Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(offending_key(&table, e.message()), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.map.validate().map_err(|e| rekey(e, "map"))?;
        self.pbm.validate().map_err(|e| rekey(e, "pbm"))?;
        self.metrics.validate()?;
        let positive = [
            ("ubm.components", self.ubm.components),
            ("tv.rank", self.tv.rank),
            ("lda.out_dim", self.lda.out_dim),
            ("bnfeat.tap_layer", self.bnfeat.tap_layer),
            ("bnfeat.pca_dim", self.bnfeat.pca_dim),
            ("bnfeat.batch_size", self.bnfeat.batch_size),
            ("bnfeat.stcl_chunk_len", self.bnfeat.stcl_chunk_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if !(self.ubm.var_floor > 0.0) {
            return Err(Error::config("ubm.var_floor", "must be positive"));
        }
        if self.bnfeat.enabled {
            if self.bnfeat.hidden.is_empty() || self.bnfeat.hidden.contains(&0) {
                return Err(Error::config("bnfeat.hidden", "needs at least one non-empty layer"));
            }
            if self.bnfeat.tap_layer > self.bnfeat.hidden.len() {
                return Err(Error::config("bnfeat.tap_layer", "exceeds the number of hidden layers"));
            }
            if self.bnfeat.pca_dim > self.bnfeat.hidden[self.bnfeat.tap_layer - 1] {
                return Err(Error::config("bnfeat.pca_dim", "exceeds the tapped layer width"));
            }
            if self.bnfeat.stcl_classes < 2 {
                return Err(Error::config("bnfeat.stcl_classes", "must be >= 2"));
            }
        }
        if self.plda.as_norm_top_k < 2 {
            return Err(Error::config("plda.as_norm_top_k", "must be >= 2"));
        }
        crate::fusion::simplex_grid(1, self.fusion.step).map(|_| ())
    }

    pub fn tv_config(&self) -> TvConfig {
        TvConfig {
            rank: self.tv.rank,
            iters: self.tv.iters,
            seed: stage_seed(self.seed, "tv"),
        }
    }

    /// Output dimension of the features the models are trained on.
    pub fn feature_dim(&self) -> usize {
        if self.bnfeat.enabled {
            self.bnfeat.pca_dim
        } else {
            self.frontend.output_dim()
        }
    }

    pub fn work_dir(&self, fallback: &Path) -> PathBuf {
        if self.paths.work_dir.as_os_str().is_empty() {
            fallback.to_path_buf()
        } else {
            self.paths.work_dir.clone()
        }
    }
}

fn rekey(e: Error, section: &str) -> Error {
    match e {
        Error::Config { key, reason } => {
            let leaf = key.rsplit('.').next().unwrap_or(&key).to_string();
            Error::config(format!("{section}.{leaf}"), reason)
        }
        other => other,
    }
}

/// Best-effort dotted key for a deserialisation message naming a field.
fn offending_key(table: &Table, message: &str) -> String {
    let quoted: Vec<&str> = message.split('`').skip(1).step_by(2).collect();
    for q in quoted {
        if table.contains_key(q) {
            return q.to_string();
        }
        for (section, v) in table {
            if let Value::Table(t) = v {
                if t.contains_key(q) {
                    return format!("{section}.{q}");
                }
            }
        }
        return q.to_string();
    }
    "config".to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{CepstralMode, FilterScale};

    #[test]
    fn presets_carry_published_values() {
        let s1 = PipelineConfig::preset("S1").unwrap();
        assert_eq!((s1.system, s1.ubm.components, s1.tv.rank, s1.lda.out_dim), (SystemKind::IvectorUv, 512, 600, 9));
        assert!(s1.frontend.apply_sad && s1.frontend.apply_rasta);
        assert_eq!(s1.frontend.output_dim(), 60);
        let s2 = PipelineConfig::preset("s2").unwrap();
        assert_eq!((s2.system, s2.plda.as_norm_top_k), (SystemKind::PldaBackend, 200));
        for (name, scale, dim) in [("S3", FilterScale::Mel, 60), ("S4", FilterScale::Linear, 60), ("S5", FilterScale::Mel, 66)] {
            let c = PipelineConfig::preset(name).unwrap();
            assert_eq!(c.system, SystemKind::GmmUbm);
            assert!(c.ubm.phrase_merged && !c.frontend.apply_sad && c.frontend.apply_rasta);
            assert_eq!((c.ubm.components, c.map.relevance, c.frontend.n_filters), (512, 3.0, 20));
            assert_eq!((c.frontend.filter_scale, c.frontend.output_dim()), (scale, dim));
        }
        assert_eq!(PipelineConfig::preset("S5").unwrap().frontend.cepstral_mode, CepstralMode::BlockDct);
        for name in ["S6", "S7"] {
            let c = PipelineConfig::preset(name).unwrap();
            assert_eq!(c.system, SystemKind::Pbm);
            assert_eq!(c.frontend.output_dim(), 57);
            assert_eq!((c.ubm.components, c.map.relevance, c.map.iterations, c.map.means_only), (2048, 10.0, 3, true));
            assert_eq!(c.bnfeat.hidden, vec![1024; 7]);
            assert_eq!((c.bnfeat.context, c.bnfeat.tap_layer, c.bnfeat.pca_dim, c.feature_dim()), (5, 2, 57, 57));
        }
        let s6 = PipelineConfig::preset("S6").unwrap();
        let s7 = PipelineConfig::preset("S7").unwrap();
        assert_eq!((s6.bnfeat.labels, s7.bnfeat.labels, s7.bnfeat.stcl_classes), (BnLabels::Phone, BnLabels::Stcl, 10));
        assert!(PipelineConfig::preset("S8").is_err());
    }

    #[test]
    fn overlays_and_environment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.toml");
        std::fs::write(&p, "[ubm]\ncomponents = 16\n[bnfeat]\nhidden = [32, 32]\npca_dim = 20\n").unwrap();
        let env = vec![
            ("SDSV_UBM_EM_ITERS".to_string(), "3".to_string()),
            ("SDSV_SEED".to_string(), "99".to_string()),
            ("SDSV_FRONTEND_APPLY_SAD".to_string(), "false".to_string()),
            ("HOME".to_string(), "/x".to_string()),
        ];
        let c = PipelineConfig::build(Some("S6"), &[p.clone()], env).unwrap();
        assert_eq!((c.ubm.components, c.ubm.em_iters, c.seed), (16, 3, 99));
        assert_eq!(c.bnfeat.hidden, vec![32, 32]);
        assert_eq!(c.bnfeat.labels, BnLabels::Phone);
        assert!(!c.frontend.apply_sad);

        let bad = PipelineConfig::build(Some("S1"), &[], vec![("SDSV_UBM_COMPONENTZ".into(), "3".into())]);
        match bad {
            Err(Error::Config { key, .. }) => assert_eq!(key, "SDSV_UBM_COMPONENTZ"),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "[ubm]\ncomponents = \"many\"\n").unwrap();
        assert!(matches!(PipelineConfig::build(None, &[p.clone()], vec![]), Err(Error::Config { .. })));
        std::fs::write(&p, "[ubm]\nbogus = 1\n").unwrap();
        match PipelineConfig::build(None, &[p], vec![]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "ubm.bogus"),
            other => panic!("{other:?}"),
        }
        match PipelineConfig::from_toml("[tv]\nrank = 0\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "tv.rank"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_text_roundtrip() {
        let c = PipelineConfig::preset("S7").unwrap();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert_ne!(stage_seed(1, "ubm"), stage_seed(1, "tv"));
        assert_ne!(stage_seed(1, "ubm"), stage_seed(2, "ubm"));
    }
}
