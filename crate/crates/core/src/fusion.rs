//! Score fusion: per-system z-normalisation, linear weighting with
//! simplex-searched weights, and the cascade that floors ASV scores whose
//! UV score falls below a threshold.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::metrics::{compute_eer, compute_min_dcf, read_scores, Condition, DcfParams, ScoreLine};
use crate::trials::read_trials;
use crate::parallel::ordered_map;

pub const CASCADE_FLOOR: f64 = -100.0;

/// Affine map frozen on development scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZNorm {
    pub mean: f64,
    pub sd: f64,
}

impl ZNorm {
    pub fn fit(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::empty("no scores to normalise"));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            sd: var.sqrt().max(1e-12),
        })
    }

    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|s| (s - self.mean) / self.sd).collect()
    }
}

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::empty("no fusion weights"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("fusion weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("fusion weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for FusionWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FusionWeights> for Vec<f64> {
    fn from(w: FusionWeights) -> Self {
        w.0
    }
}

pub fn linear_fuse(columns: &[Vec<f64>], weights: &FusionWeights) -> Result<Vec<f64>> {
    ensure_dim(weights.len(), columns.len())?;
    let n = columns[0].len();
    for c in columns {
        ensure_dim(n, c.len())?;
    }
    Ok((0..n)
        .map(|i| columns.iter().zip(weights.as_slice()).map(|(c, w)| w * c[i]).sum())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// minDCF, ties broken by EER.
    #[default]
    MinDcf,
    /// EER, ties broken by minDCF.
    Eer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub weights: FusionWeights,
    /// Value of the chosen objective.
    pub objective: f64,
    /// Value of the tie-break metric.
    pub tie_break: f64,
}

fn evaluate(
    columns: &[Vec<f64>],
    is_target: &[bool],
    w: &[f64],
    objective: Objective,
    params: &DcfParams,
) -> Result<(f64, f64)> {
    let n = is_target.len();
    let fused: Vec<f64> = (0..n).map(|i| columns.iter().zip(w).map(|(c, w)| w * c[i]).sum()).collect();
    let (eer, _) = compute_eer(&fused, is_target)?;
    let (dcf, _) = compute_min_dcf(&fused, is_target, params)?;
    Ok(match objective {
        Objective::MinDcf => (dcf, eer),
        Objective::Eer => (eer, dcf),
    })
}

/// All weight vectors with entries in multiples of `1/units`, in ascending
/// lexicographic order.
fn simplex_units(systems: usize, units: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in 0..=left {
            prefix.push(v);
            rec(left - v, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(units, systems, &mut Vec::new(), &mut out);
    out
}

/// Simplex grid of weight vectors at resolution `step`.
pub fn simplex_grid(systems: usize, step: f64) -> Result<Vec<Vec<f64>>> {
    let units = grid_units(step)?;
    Ok(simplex_units(systems, units)
        .into_iter()
        .map(|u| to_weights(&u, units))
        .collect())
}

fn grid_units(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::config("fusion.step", "must lie in (0, 1]"));
    }
    let units = (1.0 / step).round();
    if ((units * step) - 1.0).abs() > 1e-9 {
        return Err(Error::config("fusion.step", "must divide 1 evenly"));
    }
    Ok(units as usize)
}

fn to_weights(u: &[usize], units: usize) -> Vec<f64> {
    u.iter().map(|&k| k as f64 / units as f64).collect()
}

fn better(a: (f64, f64), b: (f64, f64)) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Less) => true,
        Some(Ordering::Equal) => a.1 < b.1,
        _ => false,
    }
}

/// Exhaustive simplex search for up to three systems; otherwise greedy
/// moves of one grid unit between systems, starting from the best of the
/// vertices and the centroid. Strict improvement is required to replace the
/// incumbent, so the earliest candidate in lexicographic order wins ties.
pub fn search_weights(
    columns: &[Vec<f64>],
    is_target: &[bool],
    objective: Objective,
    step: f64,
    params: &DcfParams,
) -> Result<SearchResult> {
    if columns.is_empty() {
        return Err(Error::empty("no systems to fuse"));
    }
    for c in columns {
        ensure_dim(is_target.len(), c.len())?;
    }
    let has_t = is_target.iter().any(|&t| t);
    let has_n = is_target.iter().any(|&t| !t);
    if !has_t || !has_n {
        return Err(Error::invalid("development trials need both targets and non-targets"));
    }
    let units = grid_units(step)?;
    let k = columns.len();
    let eval_all = |cands: &[Vec<usize>]| -> Result<Vec<(f64, f64)>> {
        ordered_map(cands, |u| evaluate(columns, is_target, &to_weights(u, units), objective, params))
            .into_iter()
            .collect()
    };
    let pick = |cands: &[Vec<usize>], vals: &[(f64, f64)]| {
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| cands[a].cmp(&cands[b]).reverse());
        let mut best = order[0];
        for &i in &order[1..] {
            if !better(vals[best], vals[i]) {
                best = i;
            }
        }
        best
    };
    let (mut cur, mut val) = if k <= 3 {
        let grid = simplex_units(k, units);
        let vals = eval_all(&grid)?;
        let i = pick(&grid, &vals);
        (grid[i].clone(), vals[i])
    } else {
        let mut starts: Vec<Vec<usize>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { units } else { 0 }).collect())
            .collect();
        if units % k == 0 {
            starts.push(vec![units / k; k]);
        } else {
            let mut c = vec![units / k; k];
            for slot in c.iter_mut().take(units % k) {
                *slot += 1;
            }
            starts.push(c);
        }
        let vals = eval_all(&starts)?;
        let i = pick(&starts, &vals);
        (starts[i].clone(), vals[i])
    };
    if k > 3 {
        loop {
            let mut moves = Vec::new();
            for from in 0..k {
                for to in 0..k {
                    if from != to && cur[from] > 0 {
                        let mut m = cur.clone();
                        m[from] -= 1;
                        m[to] += 1;
                        moves.push(m);
                    }
                }
            }
            let vals = eval_all(&moves)?;
            let i = pick(&moves, &vals);
            if !better(vals[i], val) {
                break;
            }
            cur = moves.swap_remove(i);
            val = vals[i];
        }
    }
    Ok(SearchResult {
        weights: FusionWeights::new(to_weights(&cur, units))?,
        objective: val.0,
        tie_break: val.1,
    })
}

pub fn cascade_fuse(uv: &[f64], asv: &[f64], uv_threshold: f64, floor: f64) -> Result<Vec<f64>> {
    ensure_dim(uv.len(), asv.len())?;
    Ok(uv
        .iter()
        .zip(asv)
        .map(|(&u, &a)| if u < uv_threshold { floor } else { a })
        .collect())
}

/// Reorders each system's scores to follow `keys`; every key must be scored.
pub fn align_columns(systems: &[Vec<ScoreLine>], keys: &[(String, String)]) -> Result<Vec<Vec<f64>>> {
    systems
        .iter()
        .enumerate()
        .map(|(s, lines)| {
            let idx: BTreeMap<(&str, &str), f64> = lines
                .iter()
                .map(|l| ((l.model.as_str(), l.test.as_str()), l.score))
                .collect();
            keys.iter()
                .map(|(m, t)| {
                    idx.get(&(m.as_str(), t.as_str())).copied().ok_or_else(|| {
                        Error::invalid(format!("system {s} has no score for trial `{m} {t}`"))
                    })
                })
                .collect()
        })
        .collect()
}

/// Member score files of one fusion stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecipe {
    pub systems: Vec<PathBuf>,
}

/// Two-stage fusion recipe: an optional UV stage gating an ASV stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionRecipe {
    /// Development trial list used for weights and the UV threshold.
    pub trials: PathBuf,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub uv: Option<StageRecipe>,
    pub asv: StageRecipe,
}

fn default_step() -> f64 {
    0.05
}

fn default_floor() -> f64 {
    CASCADE_FLOOR
}

impl FusionRecipe {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("fusion", e.message().to_string()))
    }

    /// Reads a recipe; relative paths are resolved against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut r = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut r.trials);
        r.asv.systems.iter_mut().for_each(fix);
        if let Some(uv) = r.uv.as_mut() {
            uv.systems.iter_mut().for_each(fix);
        }
        Ok(r)
    }
}

/// Frozen normalisation and weights for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub znorm: Vec<ZNorm>,
    pub weights: FusionWeights,
}

impl StageParams {
    pub fn fit(
        columns: &[Vec<f64>],
        is_target: &[bool],
        objective: Objective,
        step: f64,
        params: &DcfParams,
    ) -> Result<(Self, SearchResult)> {
        let znorm = columns.iter().map(|c| ZNorm::fit(c)).collect::<Result<Vec<_>>>()?;
        let normed: Vec<Vec<f64>> = columns.iter().zip(&znorm).map(|(c, z)| z.apply(c)).collect();
        let res = search_weights(&normed, is_target, objective, step, params)?;
        Ok((
            Self {
                znorm,
                weights: res.weights.clone(),
            },
            res,
        ))
    }

    pub fn apply(&self, columns: &[Vec<f64>]) -> Result<Vec<f64>> {
        ensure_dim(self.znorm.len(), columns.len())?;
        let normed: Vec<Vec<f64>> = columns.iter().zip(&self.znorm).map(|(c, z)| z.apply(c)).collect();
        linear_fuse(&normed, &self.weights)
    }
}

/// Everything needed to replay a fusion on evaluation scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenFusion {
    pub floor: f64,
    pub uv: Option<StageParams>,
    /// Dev UV EER threshold, present with the UV stage.
    pub uv_threshold: Option<f64>,
    pub asv: StageParams,
}

impl FrozenFusion {
    /// ASV fusion, floored by the cascade when a UV stage is present.
    pub fn apply(&self, uv_columns: Option<&[Vec<f64>]>, asv_columns: &[Vec<f64>]) -> Result<Vec<f64>> {
        let asv = self.asv.apply(asv_columns)?;
        match (&self.uv, self.uv_threshold, uv_columns) {
            (Some(stage), Some(thr), Some(cols)) => cascade_fuse(&stage.apply(cols)?, &asv, thr, self.floor),
            (None, _, _) => Ok(asv),
            _ => Err(Error::invalid("UV stage needs both its scores and a threshold")),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialise fusion parameters: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("fusion", e.message().to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Fused scores of one recipe run, keyed like the trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeOutput {
    pub frozen: FrozenFusion,
    pub uv: Option<Vec<ScoreLine>>,
    pub fused: Vec<ScoreLine>,
    pub asv_search: SearchResult,
    pub uv_search: Option<SearchResult>,
}

fn read_stage(stage: &StageRecipe, keys: &[(String, String)]) -> Result<Vec<Vec<f64>>> {
    if stage.systems.is_empty() {
        return Err(Error::config("fusion.systems", "a stage needs at least one score file"));
    }
    let files = stage.systems.iter().map(|p| read_scores(p)).collect::<Result<Vec<_>>>()?;
    align_columns(&files, keys)
}

fn lines(keys: &[(String, String)], scores: Vec<f64>) -> Vec<ScoreLine> {
    keys.iter()
        .zip(scores)
        .map(|((model, test), score)| ScoreLine {
            model: model.clone(),
            test: test.clone(),
            score,
        })
        .collect()
}

/// Fits the recipe on its development trials. The UV stage treats correct
/// phrase trials (TC, IC) as targets and sets the cascade threshold at its
/// EER point; the ASV stage treats TC as the only target.
pub fn fit_recipe(recipe: &FusionRecipe, params: &DcfParams) -> Result<RecipeOutput> {
    let trials = read_trials(&recipe.trials)?;
    let keys: Vec<(String, String)> = trials.iter().map(|t| (t.model_id.clone(), t.test_utt.clone())).collect();
    let asv_cols = read_stage(&recipe.asv, &keys)?;
    let asv_target: Vec<bool> = trials.iter().map(|t| t.condition.is_target()).collect();
    let (asv, asv_search) = StageParams::fit(&asv_cols, &asv_target, recipe.objective, recipe.step, params)?;
    let (uv, uv_threshold, uv_search, uv_scores) = match &recipe.uv {
        Some(stage) => {
            let cols = read_stage(stage, &keys)?;
            let phrase_ok: Vec<bool> = trials
                .iter()
                .map(|t| matches!(t.condition, Condition::TC | Condition::IC))
                .collect();
            let (p, res) = StageParams::fit(&cols, &phrase_ok, recipe.objective, recipe.step, params)?;
            let fused = p.apply(&cols)?;
            let (_, thr) = compute_eer(&fused, &phrase_ok)?;
            (Some(p), Some(thr), Some(res), Some(fused))
        }
        None => (None, None, None, None),
    };
    let frozen = FrozenFusion {
        floor: recipe.floor,
        uv,
        uv_threshold,
        asv,
    };
    let asv_fused = frozen.asv.apply(&asv_cols)?;
    let fused = match (&uv_scores, frozen.uv_threshold) {
        (Some(u), Some(thr)) => cascade_fuse(u, &asv_fused, thr, frozen.floor)?,
        _ => asv_fused,
    };
    Ok(RecipeOutput {
        frozen,
        uv: uv_scores.map(|u| lines(&keys, u)),
        fused: lines(&keys, fused),
        asv_search,
        uv_search,
    })
}

/// Replays frozen parameters on evaluation score files aligned to `keys`.
pub fn apply_frozen(
    frozen: &FrozenFusion,
    uv: Option<&StageRecipe>,
    asv: &StageRecipe,
    keys: &[(String, String)],
) -> Result<Vec<ScoreLine>> {
    let asv_cols = read_stage(asv, keys)?;
    let uv_cols = uv.map(|s| read_stage(s, keys)).transpose()?;
    Ok(lines(keys, frozen.apply(uv_cols.as_deref(), &asv_cols)?))
}
