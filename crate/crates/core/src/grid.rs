//! Dense `layers x heads` grid of reals, stored layer-major.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {layers}x{heads}")]
    EmptyDims { layers: usize, heads: usize },
    #[error("expected {expected} values for a {layers}x{heads} grid, got {got}")]
    LengthMismatch {
        layers: usize,
        heads: usize,
        expected: usize,
        got: usize,
    },
    #[error("ragged rows: row {row} has {got} entries, expected {expected}")]
    RaggedRows { row: usize, expected: usize, got: usize },
}

/// One value per attention head. Index `(l, h)` lives at `l * heads + h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadGrid {
    layers: usize,
    heads: usize,
    values: Vec<f64>,
}

impl HeadGrid {
    pub fn zeros(layers: usize, heads: usize) -> Self {
        Self {
            layers,
            heads,
            values: vec![0.0; layers * heads],
        }
    }

    pub fn from_vec(layers: usize, heads: usize, values: Vec<f64>) -> Result<Self, GridError> {
        if layers == 0 || heads == 0 {
            return Err(GridError::EmptyDims { layers, heads });
        }
        if values.len() != layers * heads {
            return Err(GridError::LengthMismatch {
                layers,
                heads,
                expected: layers * heads,
                got: values.len(),
            });
        }
        Ok(Self { layers, heads, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, GridError> {
        let layers = rows.len();
        let heads = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(layers * heads);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != heads {
                return Err(GridError::RaggedRows {
                    row: i,
                    expected: heads,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::from_vec(layers, heads, values)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.layers, self.heads)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.heads + head]
    }

    pub fn set(&mut self, layer: usize, head: usize, value: f64) {
        self.values[layer * self.heads + head] = value;
    }

    pub fn add_at(&mut self, layer: usize, head: usize, value: f64) {
        self.values[layer * self.heads + head] += value;
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.heads..(layer + 1) * self.heads]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.heads)
    }

    /// Flat layer-major view.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            layers: self.layers,
            heads: self.heads,
            values: self.values.iter().copied().map(f).collect(),
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }
}
