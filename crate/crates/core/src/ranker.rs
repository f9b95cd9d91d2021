//! Head importance from accumulated gradients.
//!
//! Raw per-head gradient mass is turned into an importance matrix in two
//! steps: each layer row is divided by its sum, then the whole `L x H` array
//! is min-max scaled to `[0, 1]`. Flattening the matrix layer-major and
//! sorting gives the head ranking used for task correlation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradstore::HeadGradientTensor;
use crate::grid::HeadGrid;

/// Relative spread below which a layer-normalized array is treated as
/// constant. Covers rounding in the per-layer sums (a constant row of `H`
/// equal values may not divide to exactly `1/H`).
pub const CONSTANT_RELATIVE_SPREAD: f64 = 64.0 * f64::EPSILON;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("cannot accumulate an empty sequence of batch gradients")]
    EmptySequence,
    #[error("batch {index} is {got:?}, expected {expected:?}")]
    DimsMismatch {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("batch {index} contains a non-finite gradient")]
    NonFinite { index: usize },
}

/// Sums `|g|` cell-wise over a sequence of per-batch head gradients, in
/// sequence order.
pub fn accumulate<'a, I>(task_id: &str, batch_grads: I) -> Result<HeadGradientTensor, RankError>
where
    I: IntoIterator<Item = &'a HeadGrid>,
{
    let mut iter = batch_grads.into_iter().enumerate();
    let (_, first) = iter.next().ok_or(RankError::EmptySequence)?;
    let dims = first.dims();
    let mut total = HeadGrid::zeros(dims.0, dims.1);
    for (index, batch) in std::iter::once((0, first)).chain(iter) {
        if batch.dims() != dims {
            return Err(RankError::DimsMismatch {
                index,
                expected: dims,
                got: batch.dims(),
            });
        }
        if batch.as_slice().iter().any(|g| !g.is_finite()) {
            return Err(RankError::NonFinite { index });
        }
        for (acc, g) in total.as_mut_slice().iter_mut().zip(batch.as_slice()) {
            *acc += g.abs();
        }
    }
    Ok(HeadGradientTensor::task(task_id, total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormMeta {
    /// Divisor applied to each layer row (its raw sum; 0 for an all-zero row).
    pub layer_sums: Vec<f64>,
    pub global_min: f64,
    pub global_max: f64,
    /// True when the layer-normalized array was constant and mapped to zeros.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadImportanceMatrix {
    pub task_id: String,
    pub values: HeadGrid,
    pub norm_meta: NormMeta,
}

impl HeadImportanceMatrix {
    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    /// Layer-major flat view, the vector that gets correlated.
    pub fn flat(&self) -> &[f64] {
        self.values.as_slice()
    }
}

/// Layer-wise L1 normalization followed by a global min-max rescale.
///
/// Rows summing to zero become zeros. If the layer-normalized array is
/// constant the result is all zeros.
pub fn normalize(tensor: &HeadGradientTensor) -> HeadImportanceMatrix {
    let raw = &tensor.values;
    let (layers, heads) = raw.dims();
    let mut layer_sums = Vec::with_capacity(layers);
    let mut scaled = Vec::with_capacity(raw.len());
    for row in raw.rows() {
        let sum: f64 = row.iter().sum();
        layer_sums.push(sum);
        if sum > 0.0 {
            scaled.extend(row.iter().map(|v| v / sum));
        } else {
            scaled.extend(std::iter::repeat_n(0.0, row.len()));
        }
    }

    let min = scaled.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = max - min;
    let degenerate = spread <= CONSTANT_RELATIVE_SPREAD * max.abs();
    if degenerate {
        scaled.iter_mut().for_each(|v| *v = 0.0);
    } else {
        scaled.iter_mut().for_each(|v| *v = (*v - min) / spread);
    }

    HeadImportanceMatrix {
        task_id: tensor.task_id.clone(),
        values: HeadGrid::from_vec(layers, heads, scaled).expect("dims preserved"),
        norm_meta: NormMeta {
            layer_sums,
            global_min: min,
            global_max: max,
            degenerate,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRankingVector {
    pub task_id: String,
    /// Flat head indices, most important first.
    pub order: Vec<usize>,
    /// `scores[i]` is the importance of head `order[i]`.
    pub scores: Vec<f64>,
}

/// Sorts flat heads by importance, descending; equal scores keep ascending
/// flat index.
pub fn flatten_ranking(matrix: &HeadImportanceMatrix) -> HeadRankingVector {
    let flat = matrix.flat();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    // Stable sort keeps index order among ties.
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]));
    let scores = order.iter().map(|&i| flat[i]).collect();
    HeadRankingVector {
        task_id: matrix.task_id.clone(),
        order,
        scores,
    }
}
