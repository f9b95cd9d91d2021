//! Gradient accumulation at fixed parameters.
//!
//! Both entry points take `&Model`, so they cannot update parameters.

use super::config::TrainRecipe;
use super::data::{Instance, TaskDataset};
use super::model::Model;
use super::ToyError;
use crate::gradstore::{HeadGradientTensor, InstancePack};
use crate::grid::HeadGrid;
use crate::ranker;

fn check_task(model: &Model, task: &TaskDataset) -> Result<(), ToyError> {
    let head = model.head(&task.task_id)?;
    if head.objective != task.objective || head.out_dim != task.out_dim {
        return Err(ToyError::HeadMismatch {
            task_id: task.task_id.clone(),
            reason: format!(
                "model head is {:?}/{}, task is {:?}/{}",
                head.objective, head.out_dim, task.objective, task.out_dim
            ),
        });
    }
    task.check(model.config.vocab_size, model.config.max_len)
}

/// Per-batch head cells over `accumulation_passes` ordered passes, in
/// dataset order, summed by the ranker into one task tensor.
pub fn accumulate_task_gradients(
    model: &Model,
    task: &TaskDataset,
    recipe: &TrainRecipe,
) -> Result<HeadGradientTensor, ToyError> {
    check_task(model, task)?;
    if recipe.batch_size == 0 || recipe.accumulation_passes == 0 {
        return Err(ToyError::InvalidConfig(vec![
            "recipe.batch_size and recipe.accumulation_passes must be at least 1".into(),
        ]));
    }
    let all: Vec<&Instance> = task.instances.iter().collect();
    let mut cells: Vec<HeadGrid> = Vec::new();
    for _ in 0..recipe.accumulation_passes {
        for batch in all.chunks(recipe.batch_size) {
            let (_, grad) = model.batch_loss_and_grad(&task.task_id, batch)?;
            cells.push(model.head_cells(&grad.encoder));
        }
    }
    Ok(ranker::accumulate(&task.task_id, &cells)?)
}

/// One block per instance, each from a batch of that instance alone.
pub fn accumulate_instance_gradients(model: &Model, task: &TaskDataset) -> Result<InstancePack, ToyError> {
    check_task(model, task)?;
    if task.is_empty() {
        return Err(ToyError::EmptyDataset(task.task_id.clone()));
    }
    let mut ids = Vec::with_capacity(task.len());
    let mut blocks = Vec::with_capacity(task.len());
    for inst in &task.instances {
        let (_, grad) = model.batch_loss_and_grad(&task.task_id, &[inst])?;
        ids.push(inst.id.clone());
        blocks.push(model.head_cells(&grad.encoder));
    }
    Ok(InstancePack::new(&task.task_id, ids, blocks)?)
}
