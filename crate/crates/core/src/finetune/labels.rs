use std::collections::HashSet;

use candle_core::{DType, Device, Tensor};

use crate::corpus::SimilarityGroundTruth;
use crate::error::{bail_arg, Result};

/// Symmetric 0/1 similarity matrix over the items of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    n: usize,
    cells: Vec<u8>,
}

impl LabelMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, cells: vec![0; n * n] }
    }

    /// From explicit rows; must be square, symmetric, 0/1 with zero diagonal.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                bail_arg!("label matrix row {i} has {} entries, expected {n}", row.len());
            }
            for (j, &v) in row.iter().enumerate() {
                if v > 1 || (i == j && v != 0) || rows[j][i] != v {
                    bail_arg!("label matrix must be symmetric 0/1 with zero diagonal");
                }
                m.cells[i * n + j] = v;
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j] == 1
    }

    fn set(&mut self, i: usize, j: usize) {
        self.cells[i * self.n + j] = 1;
        self.cells[j * self.n + i] = 1;
    }

    /// Number of ordered positive pairs.
    pub fn n_positive(&self) -> usize {
        self.cells.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| !self.get(i, i) && (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.cells.chunks(self.n.max(1)).map(<[u8]>::to_vec).take(self.n).collect()
    }

    /// The matrix with rows and columns reordered: `out[i][j] = self[p[i]][p[j]]`.
    pub fn permuted(&self, p: &[usize]) -> Self {
        let mut out = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.cells[i * self.n + j] = self.cells[p[i] * self.n + p[j]];
            }
        }
        out
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let data: Vec<f32> = self.cells.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(data, (self.n, self.n), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

pub fn build_label_matrix(ids: &[String], gt: &SimilarityGroundTruth) -> Result<LabelMatrix> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            bail_arg!("duplicate id {id:?} in batch");
        }
    }
    let mut m = LabelMatrix::zeros(ids.len());
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            if gt.is_similar(&ids[i], &ids[j]) {
                m.set(i, j);
            }
        }
    }
    Ok(m)
}
