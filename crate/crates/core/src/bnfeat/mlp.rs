//! Sigmoid MLP frame classifier with a softmax output, trained by minibatch
//! SGD on cross-entropy.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Tap;
use crate::binio::{read_file, BinReader, BinWriter};
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::FeatureMatrix;
use crate::parallel::ordered_map;

const MAGIC: &[u8; 4] = b"SMLP";
const FORWARD_BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Factor applied to the learning rate when the epoch loss stops falling.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            lr_decay: 0.5,
            batch_size: 256,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `in x out`.
    w: DMatrix<f64>,
    b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct MlpFit {
    pub model: MlpModel,
    /// Mean training cross-entropy per epoch.
    pub losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(h: &DMatrix<f64>, layer: &Layer) -> DMatrix<f64> {
    let mut z = h * &layer.w;
    for mut row in z.row_iter_mut() {
        row += layer.b.transpose();
    }
    z
}

/// Row-wise softmax in place.
fn softmax_rows(z: &mut DMatrix<f64>) {
    for mut row in z.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

fn to_dmatrix(m: &FeatureMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.dim(), m.as_slice())
}

impl MlpModel {
    /// Glorot-uniform weights and zero biases.
    pub fn random(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config("bnfeat.hidden", "layer sizes must be positive"));
        }
        let layers = dims
            .windows(2)
            .map(|p| {
                let a = (6.0 / (p[0] + p[1]) as f64).sqrt();
                let w = DMatrix::from_fn(p[0], p[1], |_, _| rng.random_range(-a..a));
                Layer { w, b: DVector::zeros(p[1]) }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.ncols())
    }

    pub fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// Input, hidden and output sizes.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.w.ncols()))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters per layer: weights row-major, then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for i in 0..l.w.nrows() {
                out.extend(l.w.row(i).iter());
            }
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim(self.n_params(), params.len())?;
        let mut it = params.iter();
        for l in &mut self.layers {
            let (r, c) = l.w.shape();
            for i in 0..r {
                for j in 0..c {
                    l.w[(i, j)] = *it.next().unwrap();
                }
            }
            for v in l.b.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Post-activations of every layer, the input first and the softmax last.
    fn forward(&self, x: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = vec![x];
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = affine(acts.last().unwrap(), l);
            if i + 1 == self.layers.len() {
                softmax_rows(&mut z);
            } else {
                z.apply(|v| *v = sigmoid(*v));
            }
            acts.push(z);
        }
        acts
    }

    fn check_batch(&self, inputs: &FeatureMatrix, labels: &[usize]) -> Result<()> {
        ensure_dim(self.input_dim(), inputs.dim())?;
        ensure_dim(inputs.rows(), labels.len())?;
        if inputs.is_empty() {
            return Err(Error::empty("no training frames"));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= self.output_dim()) {
            return Err(Error::invalid(format!("label {l} exceeds {} classes", self.output_dim())));
        }
        Ok(())
    }

    fn backprop(&self, x: DMatrix<f64>, labels: &[usize]) -> (f64, Vec<(DMatrix<f64>, DVector<f64>)>) {
        let n = labels.len() as f64;
        let acts = self.forward(x);
        let out = acts.last().unwrap();
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(t, &l)| out[(t, l)].max(1e-300).ln())
            .sum::<f64>()
            / n;
        let mut delta = out.clone();
        for (t, &l) in labels.iter().enumerate() {
            delta[(t, l)] -= 1.0;
        }
        delta /= n;
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let h = &acts[i];
            let gw = h.tr_mul(&delta);
            let gb = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            if i > 0 {
                let mut back = &delta * self.layers[i].w.transpose();
                back.zip_apply(h, |d, a| *d *= a * (1.0 - a));
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        (loss, grads)
    }

    /// Mean cross-entropy and its gradient, ordered as [`Self::params`].
    pub fn loss_and_gradient(&self, inputs: &FeatureMatrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check_batch(inputs, labels)?;
        let (loss, grads) = self.backprop(to_dmatrix(inputs), labels);
        let mut flat = Vec::with_capacity(self.n_params());
        for (gw, gb) in &grads {
            for i in 0..gw.nrows() {
                flat.extend(gw.row(i).iter());
            }
            flat.extend(gb.iter());
        }
        Ok((loss, flat))
    }

    fn sgd_step(&mut self, x: DMatrix<f64>, labels: &[usize], lr: f64) -> f64 {
        let (loss, grads) = self.backprop(x, labels);
        for (l, (gw, gb)) in self.layers.iter_mut().zip(grads) {
            l.w -= gw * lr;
            l.b -= gb * lr;
        }
        loss
    }

    pub fn predict_proba(&self, inputs: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.layer_output(inputs, self.layers.len(), true)
    }

    /// Hidden layer `layer_index` (1-based) for every frame.
    pub fn hidden_output(&self, inputs: &FeatureMatrix, layer_index: usize, tap: Tap) -> Result<FeatureMatrix> {
        if layer_index == 0 || layer_index > self.n_hidden() {
            return Err(Error::config(
                "bnfeat.tap_layer",
                format!("must lie in 1..={}", self.n_hidden()),
            ));
        }
        self.layer_output(inputs, layer_index, tap == Tap::PostActivation)
    }

    fn layer_output(&self, inputs: &FeatureMatrix, upto: usize, activate: bool) -> Result<FeatureMatrix> {
        ensure_dim(self.input_dim(), inputs.dim())?;
        let width = self.layers[upto - 1].w.ncols();
        let starts: Vec<usize> = (0..inputs.rows()).step_by(FORWARD_BLOCK).collect();
        let blocks = ordered_map(&starts, |&s| {
            let e = (s + FORWARD_BLOCK).min(inputs.rows());
            let mut h = DMatrix::from_row_slice(e - s, inputs.dim(), &inputs.as_slice()[s * inputs.dim()..e * inputs.dim()]);
            for (i, l) in self.layers[..upto].iter().enumerate() {
                h = affine(&h, l);
                let last = i + 1 == upto;
                if last && !activate {
                    break;
                }
                if i + 1 == self.layers.len() {
                    softmax_rows(&mut h);
                } else {
                    h.apply(|v| *v = sigmoid(*v));
                }
            }
            h
        });
        let mut out = Vec::with_capacity(inputs.rows() * width);
        for b in &blocks {
            for r in b.row_iter() {
                out.extend(r.iter());
            }
        }
        FeatureMatrix::new(inputs.rows(), width, out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::with_header(MAGIC);
        w.len_u32(self.layers.len())?;
        for d in self.dims() {
            w.len_u32(d)?;
        }
        w.f64s(&self.params());
        w.write_to(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::new(&bytes, path);
        r.header(MAGIC)?;
        let n = r.usize()?;
        if n == 0 {
            return Err(r.fail("no layers"));
        }
        let dims = (0..=n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if dims.contains(&0) {
            return Err(r.fail("zero layer width"));
        }
        let mut model = Self {
            layers: dims
                .windows(2)
                .map(|p| Layer { w: DMatrix::zeros(p[0], p[1]), b: DVector::zeros(p[1]) })
                .collect(),
        };
        model.set_params(&r.f64s(model.n_params())?)?;
        r.finish()?;
        Ok(model)
    }
}

/// Trains a classifier with `hidden` sigmoid layers on labelled frames.
pub fn train_mlp(
    inputs: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
    hidden: &[usize],
    cfg: &SgdConfig,
) -> Result<MlpFit> {
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::config("bnfeat.sgd.learning_rate", "must be positive"));
    }
    if !(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0) {
        return Err(Error::config("bnfeat.sgd.lr_decay", "must lie in (0, 1]"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("bnfeat.sgd.batch_size", "must be positive"));
    }
    inputs.check_finite("MLP inputs")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims: Vec<usize> = std::iter::once(inputs.dim())
        .chain(hidden.iter().copied())
        .chain(std::iter::once(n_classes))
        .collect();
    let mut model = MlpModel::random(&dims, &mut rng)?;
    model.check_batch(inputs, labels)?;

    let d = inputs.dim();
    let data = inputs.as_slice();
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    let mut lr = cfg.learning_rate;
    let mut losses: Vec<f64> = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = DMatrix::from_fn(batch.len(), d, |i, j| data[batch[i] * d + j]);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            total += model.sgd_step(x, &y, lr) * batch.len() as f64;
        }
        let loss = total / inputs.rows() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("MLP training loss".into()));
        }
        if losses.last().is_some_and(|&prev| loss >= prev) {
            lr *= cfg.lr_decay;
        }
        losses.push(loss);
    }
    Ok(MlpFit { model, losses })
}
