//! Dense row-major 2-D array of `f64`.
//!
//! Every quantity in the toolkit (instance data, allocations, network
//! activations, parameters) is a matrix; scalars are `1 x 1` and vectors are
//! single columns or rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(repr: TensorRepr) -> Result<Self> {
        let [rows, cols] = repr.shape[..] else {
            return Err(Error::invalid(format!(
                "tensor shape must have two dimensions, got {:?}",
                repr.shape
            )));
        };
        Tensor::from_vec(rows, cols, repr.data)
    }
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr {
            shape: vec![t.rows, t.cols],
            data: t.data,
        }
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "tensor data has {} elements, shape {}x{} needs {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// Row vector from a slice.
    pub fn row_vector(values: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("ragged nested array"));
        }
        Ok(Tensor {
            rows: n,
            cols: m,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// First `at` rows and the rest.
    pub fn split_rows(mut self, at: usize) -> (Tensor, Tensor) {
        assert!(at <= self.rows, "split at row {at} of {}", self.rows);
        let rest = self.data.split_off(at * self.cols);
        let top = Tensor {
            rows: at,
            cols: self.cols,
            data: self.data,
        };
        let bottom = Tensor {
            rows: self.rows - at,
            cols: self.cols,
            data: rest,
        };
        (top, bottom)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Same data, new shape.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {}x{} into {}x{}",
                self.rows, self.cols, rows, cols
            )));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        // no early exit, so the loop vectorizes
        self.data.iter().fold(true, |ok, v| ok & v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows reordered so that row `k` of the result is row `perm[k]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Tensor {
        Tensor::from_fn(perm.len(), self.cols, |r, c| self.get(perm[r], c))
    }

    /// Columns reordered so that column `k` of the result is column `perm[k]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Tensor {
        Tensor::from_fn(self.rows, perm.len(), |r, c| self.get(r, perm[c]))
    }
}

/// Serde adapter writing a tensor as row-major nested arrays.
pub mod nested {
    use super::Tensor;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        t.to_rows().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Tensor::from_rows(&rows).map_err(D::Error::custom)
    }
}
