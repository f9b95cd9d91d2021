use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::derive_seed;
use super::data::{Instance, TaskDataset};
use super::model::{Gradient, Model};
use super::ToyError;

/// Gradients smaller than this in both estimates are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index (encoder then head) where the maximum occurred.
    pub worst_index: usize,
    pub checked: usize,
    pub analytic_norm: f64,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central finite differences of the mean loss over the whole `task`
/// against the analytic gradient, at up to `max_params` sampled parameters
/// (all of them when the model is smaller).
pub fn gradient_check(
    model: &Model,
    task: &TaskDataset,
    epsilon: f64,
    max_params: usize,
) -> Result<GradCheckReport, ToyError> {
    let batch: Vec<&Instance> = task.instances.iter().collect();
    if batch.is_empty() {
        return Err(ToyError::EmptyDataset(task.task_id.clone()));
    }
    let id = &task.task_id;
    let (_, grad) = model.batch_loss_and_grad(id, &batch)?;
    let Gradient { encoder, head } = &grad;
    let analytic: Vec<f64> = encoder.iter().chain(head).copied().collect();
    let n = analytic.len();
    let indices: Vec<usize> = if n <= max_params {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(model.config.seed, "gradcheck"));
        let mut v = sample(&mut rng, n, max_params).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: indices.len(),
        analytic_norm: grad.norm(),
    };
    for &i in &indices {
        let original = *probe.task_param_mut(id, i)?;
        *probe.task_param_mut(id, i)? = original + epsilon;
        let up = probe.batch_loss(id, &batch)?;
        *probe.task_param_mut(id, i)? = original - epsilon;
        let down = probe.batch_loss(id, &batch)?;
        *probe.task_param_mut(id, i)? = original;
        let err = relative_error(analytic[i], (up - down) / (2.0 * epsilon));
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
