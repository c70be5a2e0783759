use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::binio::{read_file, BinReader, BinWriter};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::sorted_symmetric_eigen;
use crate::matrix::FeatureMatrix;

const MAGIC: &[u8; 4] = b"SPCA";

/// Mean-centred projection onto the leading principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    mean: DVector<f64>,
    /// `D_in x d`, orthonormal columns in descending eigenvalue order.
    projection: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl PcaTransform {
    pub fn fit(data: &FeatureMatrix, out_dim: usize) -> Result<Self> {
        if out_dim == 0 || out_dim > data.rows().min(data.dim()) {
            return Err(Error::config(
                "bnfeat.pca_dim",
                format!("must lie in 1..={}", data.rows().min(data.dim())),
            ));
        }
        let (mean, _) = crate::matrix::mean_and_variance(data);
        let d = data.dim();
        let mean = DVector::from_vec(mean);
        let mut centred = DMatrix::from_row_slice(data.rows(), d, data.as_slice());
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.tr_mul(&centred) / data.rows() as f64;
        let (vals, vecs) = sorted_symmetric_eigen(&cov);
        Ok(Self {
            mean,
            projection: vecs.columns(0, out_dim).into_owned(),
            eigenvalues: vals.iter().take(out_dim).cloned().collect(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn apply(&self, data: &FeatureMatrix) -> Result<FeatureMatrix> {
        ensure_dim(self.in_dim(), data.dim())?;
        let mut x = DMatrix::from_row_slice(data.rows(), data.dim(), data.as_slice());
        for mut row in x.row_iter_mut() {
            row -= self.mean.transpose();
        }
        let y = x * &self.projection;
        Ok(FeatureMatrix::from_fn(data.rows(), self.out_dim(), |t, j| y[(t, j)]))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::with_header(MAGIC);
        w.len_u32(self.in_dim())?;
        w.len_u32(self.out_dim())?;
        w.f64s(self.mean.as_slice());
        w.f64s(&self.eigenvalues);
        for i in 0..self.in_dim() {
            for j in 0..self.out_dim() {
                w.f64(self.projection[(i, j)]);
            }
        }
        w.write_to(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = BinReader::new(&bytes, path);
        r.header(MAGIC)?;
        let (din, dout) = (r.usize()?, r.usize()?);
        let mean = DVector::from_vec(r.f64s(din)?);
        let eigenvalues = r.f64s(dout)?;
        let projection = DMatrix::from_row_slice(din, dout, &r.f64s(din * dout)?);
        r.finish()?;
        Ok(Self {
            mean,
            projection,
            eigenvalues,
        })
    }
}
