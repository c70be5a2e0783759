//! Frame-by-dimension feature storage and the `SDSV` matrix file format.

use std::path::Path;

use crate::binio::{read_file, BinReader, BinWriter};
use crate::error::{ensure_dim, Error, Result};

const MAGIC: &[u8; 4] = b"SDSV";

/// A row-major `frames x dim` matrix of finite reals.
///
/// Zero-frame matrices are allowed (they carry their dimension), which lets
/// empty adaptation data and empty statistics flow through the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "data length {} does not match {rows}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        assert!(dim > 0, "feature dimension must be positive");
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self::zeros(0, dim)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::empty("no rows to build a matrix from"))?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            ensure_dim(dim, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.data[t * self.dim + d]
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        self.iter_rows().map(|r| r[d]).collect()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Rows whose mask entry is `true`, in order.
    pub fn select_rows(&self, mask: &[bool]) -> Result<Self> {
        ensure_dim(self.rows, mask.len())?;
        let data = self
            .iter_rows()
            .zip(mask)
            .filter(|(_, &keep)| keep)
            .flat_map(|(r, _)| r.iter().copied())
            .collect::<Vec<_>>();
        Ok(Self {
            rows: data.len() / self.dim,
            dim: self.dim,
            data,
        })
    }

    /// Stacks matrices vertically. All parts must share one dimension.
    pub fn vstack<'a, I>(parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureMatrix>,
    {
        let mut iter = parts.into_iter().peekable();
        let dim = iter
            .peek()
            .map(|m| m.dim)
            .ok_or_else(|| Error::empty("nothing to stack"))?;
        let mut data = Vec::new();
        for m in iter {
            ensure_dim(dim, m.dim)?;
            data.extend_from_slice(&m.data);
        }
        Ok(Self {
            rows: data.len() / dim,
            dim,
            data,
        })
    }

    /// Builds a matrix from `rows x dim` values produced by `f(t, d)`.
    pub fn from_fn(rows: usize, dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, dim);
        for t in 0..rows {
            for d in 0..dim {
                m.data[t * dim + d] = f(t, d);
            }
        }
        m
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            dim: self.dim,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Serializes to the `SDSV` layout: magic, version, rows, cols, then
    /// row-major f32 values, all little-endian.
    pub fn to_sdsv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BinWriter::with_header(MAGIC);
        w.len_u32(self.rows)?;
        w.len_u32(self.dim)?;
        for &v in &self.data {
            w.f32(v as f32);
        }
        Ok(w.into_bytes())
    }

    pub fn from_sdsv_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = BinReader::new(bytes, path);
        r.header(MAGIC)?;
        let rows = r.usize()?;
        let cols = r.usize()?;
        if cols == 0 {
            return Err(r.fail("zero columns"));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from(r.f32()?));
        }
        r.finish()?;
        Self::new(rows, cols, data).map_err(|e| r.fail(e.to_string()))
    }

    pub fn write_sdsv(&self, path: &Path) -> Result<()> {
        let bytes = self.to_sdsv_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_sdsv(path: &Path) -> Result<Self> {
        Self::from_sdsv_bytes(&read_file(path)?, path)
    }
}

pub(crate) fn mean_and_variance(m: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let d = m.dim();
    let n = m.rows().max(1) as f64;
    let mut mean = vec![0.0; d];
    for r in m.iter_rows() {
        for (a, &x) in mean.iter_mut().zip(r) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; d];
    for r in m.iter_rows() {
        for ((a, &x), &mu) in var.iter_mut().zip(r).zip(&mean) {
            *a += (x - mu) * (x - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}
