use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Binary category membership, `c` rows by `n` columns. A sample may belong
/// to several categories but always to at least one.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    entries: DMatrix<f64>,
}

impl LabelMatrix {
    pub fn from_dense(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::InvalidData("label matrix must be non-empty".into()));
        }
        for (j, col) in entries.column_iter().enumerate() {
            if let Some(v) = col.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidData(format!(
                    "label entry {v} of sample {j} is not 0 or 1"
                )));
            }
            if col.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidData(format!("sample {j} has no active label")));
            }
        }
        Ok(Self { entries })
    }

    /// One-hot labels from category indices in `0..categories`.
    pub fn from_indices(indices: &[usize], categories: usize) -> Result<Self> {
        let mut entries = DMatrix::zeros(categories, indices.len());
        for (j, &k) in indices.iter().enumerate() {
            if k >= categories {
                return Err(Error::InvalidData(format!(
                    "category index {k} of sample {j} out of range 0..{categories}"
                )));
            }
            entries[(k, j)] = 1.0;
        }
        Self::from_dense(entries)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn categories(&self) -> usize {
        self.entries.nrows()
    }

    pub fn len(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.ncols() == 0
    }

    pub fn is_active(&self, category: usize, sample: usize) -> bool {
        self.entries[(category, sample)] != 0.0
    }

    pub fn select(&self, samples: &[usize]) -> Self {
        Self {
            entries: self.entries.select_columns(samples.iter()),
        }
    }

    /// Per-sample category bitsets, `ceil(c / 64)` words each.
    pub fn masks(&self) -> Vec<Vec<u64>> {
        let words = self.categories().div_ceil(64);
        self.entries
            .column_iter()
            .map(|col| {
                let mut mask = vec![0u64; words];
                for (k, &v) in col.iter().enumerate() {
                    if v != 0.0 {
                        mask[k / 64] |= 1 << (k % 64);
                    }
                }
                mask
            })
            .collect()
    }

    /// `true` when the two samples share at least one category.
    pub fn shares_category(&self, a: usize, other: &LabelMatrix, b: usize) -> bool {
        (0..self.categories().min(other.categories())).any(|k| self.is_active(k, a) && other.is_active(k, b))
    }
}
