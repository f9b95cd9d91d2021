//! Shared-encoder multi-task evaluation, the trial callback for selection.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{derive_seed, ToyModelConfig, TrainRecipe};
use super::data::{Instance, TaskDataset};
use super::model::Model;
use super::train::{run_batches, shuffled_batches, task_metric, Adam, TaskBatch};
use super::ToyError;
use crate::selector::{EvalError, Evaluator};

/// Everything an evaluation needs besides the task choice.
#[derive(Clone, Debug)]
pub struct ToyEvaluator {
    pub datasets: BTreeMap<String, TaskDataset>,
    pub config: ToyModelConfig,
    pub recipe: TrainRecipe,
    /// Explicit kept instance ids per task; overrides the fraction prefix.
    pub kept_ids: BTreeMap<String, Vec<String>>,
}

impl ToyEvaluator {
    pub fn new(datasets: BTreeMap<String, TaskDataset>, config: ToyModelConfig, recipe: TrainRecipe) -> Self {
        Self {
            datasets,
            config,
            recipe,
            kept_ids: BTreeMap::new(),
        }
    }

    fn dataset(&self, task_id: &str) -> Result<&TaskDataset, ToyError> {
        self.datasets
            .get(task_id)
            .ok_or_else(|| ToyError::UnknownTask(task_id.to_owned()))
    }

    /// Primary split into `(train, holdout)`. Fixed per primary; the
    /// evaluation seed does not move it.
    pub fn primary_split(&self, primary: &str) -> Result<(Vec<&Instance>, Vec<&Instance>), ToyError> {
        let ds = self.dataset(primary)?;
        let mut order: Vec<&Instance> = ds.instances.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &format!("holdout/{primary}")));
        order.shuffle(&mut rng);
        let n_hold = ((ds.len() as f64 * self.recipe.holdout_fraction).round() as usize).max(1);
        if n_hold >= ds.len() {
            return Err(ToyError::EmptyPool(primary.to_owned()));
        }
        let train = order.split_off(n_hold);
        Ok((train, order))
    }

    /// Instances of an auxiliary task that enter the pool.
    pub fn effective_aux<'a>(&'a self, task_id: &str, fraction: f64) -> Result<Vec<&'a Instance>, ToyError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(ToyError::InvalidConfig(vec![format!(
                "kept_fraction for {task_id} ({fraction}) must be in [0, 1]"
            )]));
        }
        let ds = self.dataset(task_id)?;
        if let Some(ids) = self.kept_ids.get(task_id) {
            let keep: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            return Ok(ds.filter_ids(&keep));
        }
        let n = (ds.len() as f64 * fraction).round() as usize;
        Ok(ds.instances[..n].iter().collect())
    }

    /// Trains one shared encoder with a head per task on the primary's
    /// training split plus the kept auxiliary instances, batches of all tasks
    /// interleaved at random (so each task is sampled in proportion to its
    /// size), and returns the primary's metric on its holdout split.
    pub fn mtl_evaluate(
        &self,
        primary: &str,
        aux: &[String],
        kept_fraction: &BTreeMap<String, f64>,
        seed: u64,
    ) -> Result<f64, ToyError> {
        let problems: Vec<String> = self
            .config
            .problems()
            .into_iter()
            .chain(self.recipe.problems())
            .collect();
        if !problems.is_empty() {
            return Err(ToyError::InvalidConfig(problems));
        }
        let (train, holdout) = self.primary_split(primary)?;
        let primary_ds = self.dataset(primary)?;
        let mut pool: Vec<(&TaskDataset, Vec<&Instance>)> = vec![(primary_ds, train)];
        for task_id in aux {
            if task_id == primary {
                return Err(ToyError::HeadMismatch {
                    task_id: task_id.clone(),
                    reason: "primary listed as its own auxiliary".into(),
                });
            }
            let kept = self.effective_aux(task_id, kept_fraction.get(task_id).copied().unwrap_or(1.0))?;
            if !kept.is_empty() {
                pool.push((self.dataset(task_id)?, kept));
            }
        }
        for (ds, _) in &pool {
            ds.check(self.config.vocab_size, self.config.max_len)?;
        }

        let run_seed = derive_seed(self.config.seed, &format!("mtl/{seed}"));
        let config = ToyModelConfig {
            seed: run_seed,
            ..self.config.clone()
        };
        let heads: Vec<_> = pool
            .iter()
            .map(|(ds, _)| (ds.task_id.clone(), ds.objective, ds.out_dim))
            .collect();
        let mut model = Model::new(&config, &heads)?;
        let mut opt = Adam::new(&model, &self.recipe);
        let mut step = 0;
        for epoch in 0..self.recipe.mtl_epochs {
            let mut batches: Vec<TaskBatch> = Vec::new();
            for (ds, instances) in &pool {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(run_seed, &format!("epoch/{epoch}/{}", ds.task_id)));
                batches.extend(shuffled_batches(
                    &ds.task_id,
                    instances,
                    self.recipe.batch_size,
                    &mut rng,
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, &format!("mix/{epoch}")));
            batches.shuffle(&mut rng);
            run_batches(&mut model, &mut opt, &batches, &mut step)?;
        }
        task_metric(&model, primary, primary_ds.objective, &holdout)
    }
}

impl Evaluator for ToyEvaluator {
    fn evaluate(
        &mut self,
        primary: &str,
        aux: &[String],
        kept_fraction: &BTreeMap<String, f64>,
        seed: u64,
    ) -> Result<f64, EvalError> {
        self.mtl_evaluate(primary, aux, kept_fraction, seed)
            .map_err(|e| EvalError::new(e.to_string()))
    }
}
