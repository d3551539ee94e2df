//! Learnable node embedding tables.

use std::io::{Read, Write};

use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, ParamSet};
use crate::rng;

/// Standard deviation used when no scale is configured.
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

/// One row per graph node (entity and attribute nodes share the table).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Array2<f64>,
}

impl EmbeddingTable {
    pub fn num_nodes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        checkpoint::write_matrix(out, &self.weights)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        Ok(EmbeddingTable {
            weights: checkpoint::read_matrix(r)?,
        })
    }
}

/// Zero-mean Gaussian initialization with standard deviation `scale`.
pub fn init_embeddings(num_nodes: usize, dim: usize, seed: u64, scale: f64) -> Result<EmbeddingTable> {
    if num_nodes == 0 || dim == 0 {
        return Err(Error::Domain(format!(
            "embedding table needs positive shape, got {num_nodes}x{dim}"
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!("embedding scale must be positive, got {scale}")));
    }
    let normal = Normal::new(0.0, scale).expect("valid normal");
    let mut rng = rng::stream(seed, 0xE3B);
    let weights = Array2::from_shape_simple_fn((num_nodes, dim), || normal.sample(&mut rng));
    Ok(EmbeddingTable { weights })
}

/// Gather rows `indices` into a `|indices| x dim` matrix.
pub fn lookup(table: &EmbeddingTable, indices: &[usize]) -> Result<Array2<f64>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= table.num_nodes()) {
        return Err(Error::Index(format!(
            "embedding index {bad} outside table of {} rows",
            table.num_nodes()
        )));
    }
    Ok(table.weights.select(ndarray::Axis(0), indices))
}

/// Backward of [`lookup`]: add `d_rows[r]` into `grad[indices[r]]`.
/// Repeated indices accumulate.
pub fn scatter_add(grad: &mut Array2<f64>, indices: &[usize], d_rows: &Array2<f64>) {
    for (&i, row) in indices.iter().zip(d_rows.rows()) {
        grad.row_mut(i).scaled_add(1.0, &row);
    }
}

impl ParamSet for EmbeddingTable {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![nn::slice(&self.weights)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![nn::slice_mut(&mut self.weights)]
    }
}
