//! Bottleneck features: context stacking, sTCL frame labels, a sigmoid MLP
//! frame classifier, hidden-layer tapping and PCA projection.

mod mlp;
mod pca;
mod stcl;

pub use mlp::{train_mlp, MlpFit, MlpModel, SgdConfig};
pub use pca::PcaTransform;
pub use stcl::{stcl_labels, StclConfig, StclResult};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Concatenates frames `t - left ..= t + right`, replicating the edges.
pub fn stack_context(features: &FeatureMatrix, left: usize, right: usize) -> FeatureMatrix {
    let (rows, dim) = (features.rows(), features.dim());
    let span = left + right + 1;
    let mut out = FeatureMatrix::zeros(rows, dim * span);
    for t in 0..rows {
        let row = out.row_mut(t);
        for (j, off) in (-(left as isize)..=right as isize).enumerate() {
            let src = (t as isize + off).clamp(0, rows as isize - 1) as usize;
            row[j * dim..(j + 1) * dim].copy_from_slice(features.row(src));
        }
    }
    out
}

/// Which activation of a hidden layer is tapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    PreActivation,
    PostActivation,
}

/// Hidden-layer outputs for every frame; `layer_index` is 1-based.
pub fn bottleneck_features(
    mlp: &MlpModel,
    inputs: &FeatureMatrix,
    layer_index: usize,
    tap: Tap,
) -> Result<FeatureMatrix> {
    mlp.hidden_output(inputs, layer_index, tap)
}

/// One frame-label sequence per utterance, in file order.
pub type FrameLabels = Vec<(String, Vec<usize>)>;

pub fn format_frame_labels(labels: &FrameLabels) -> String {
    let mut s = String::new();
    for (id, ls) in labels {
        s.push_str(id);
        s.push(' ');
        s.push_str(&ls.len().to_string());
        for l in ls {
            s.push(' ');
            s.push_str(&l.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn write_frame_labels(path: &Path, labels: &FrameLabels) -> Result<()> {
    std::fs::write(path, format_frame_labels(labels)).map_err(|e| Error::io(path, e))
}

/// Parses `utt-id n_frames label label ...` lines.
pub fn read_frame_labels(path: &Path) -> Result<FrameLabels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let bad = |why: &str| Error::format(path, format!("line {}: {why}", n + 1));
        let count: usize = fields
            .next()
            .ok_or_else(|| bad("missing frame count"))?
            .parse()
            .map_err(|_| bad("frame count is not an integer"))?;
        let labels = fields
            .map(|f| f.parse::<usize>().map_err(|_| bad("label is not an integer")))
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != count {
            return Err(bad(&format!("declares {count} frames but lists {}", labels.len())));
        }
        out.push((id.to_string(), labels));
    }
    Ok(out)
}
