use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, ToyModelConfig, TrainRecipe};
use super::data::{Instance, Label, TaskDataset};
use super::model::{Gradient, Model, Prediction};
use super::ToyError;
use crate::gradstore::Objective;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let delta = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            // Subtracting a signed zero could flip -0.0 to +0.0.
            if delta != 0.0 {
                *p -= delta;
            }
        }
    }
}

/// Adam with separate moment state for the encoder and for each head, so a
/// head only moves on batches of its own task.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    encoder_lr: f64,
    clip_norm: Option<f64>,
    encoder: Moments,
    heads: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(model: &Model, recipe: &TrainRecipe) -> Self {
        Self {
            lr: recipe.learning_rate,
            encoder_lr: recipe.learning_rate,
            clip_norm: recipe.clip_norm,
            encoder: Moments::new(model.encoder.len()),
            heads: model
                .heads
                .iter()
                .map(|(id, h)| (id.clone(), Moments::new(h.params.len())))
                .collect(),
        }
    }

    /// Scales the encoder step size; zero freezes the encoder.
    pub fn with_encoder_scale(mut self, scale: f64) -> Self {
        self.encoder_lr = self.lr * scale;
        self
    }

    pub fn trains_encoder(&self) -> bool {
        self.encoder_lr != 0.0
    }

    pub fn step(&mut self, model: &mut Model, task_id: &str, mut grad: Gradient) -> Result<(), ToyError> {
        if let Some(max) = self.clip_norm {
            let norm = grad.norm();
            if norm > max {
                grad.scale(max / norm);
            }
        }
        let head = model
            .heads
            .get_mut(task_id)
            .ok_or_else(|| ToyError::UnknownTask(task_id.to_owned()))?;
        let moments = self
            .heads
            .get_mut(task_id)
            .ok_or_else(|| ToyError::UnknownTask(task_id.to_owned()))?;
        moments.step(&mut head.params, &grad.head, self.lr);
        if self.trains_encoder() {
            self.encoder.step(&mut model.encoder, &grad.encoder, self.encoder_lr);
        }
        Ok(())
    }
}

/// A batch of one task's instances.
#[derive(Clone, Debug)]
pub struct TaskBatch<'a> {
    pub task_id: &'a str,
    pub instances: Vec<&'a Instance>,
}

/// Runs the given batches in order; `step` counts from 0 across calls.
pub fn run_batches(
    model: &mut Model,
    opt: &mut Adam,
    batches: &[TaskBatch],
    step: &mut usize,
) -> Result<f64, ToyError> {
    let mut total = 0.0;
    for b in batches {
        let (loss, grad) = if opt.trains_encoder() {
            model.batch_loss_and_grad(b.task_id, &b.instances)?
        } else {
            model.batch_loss_and_head_grad(b.task_id, &b.instances)?
        };
        if !loss.is_finite() || grad.encoder.iter().chain(&grad.head).any(|g| !g.is_finite()) {
            return Err(ToyError::Divergence {
                task_id: b.task_id.to_owned(),
                step: *step,
            });
        }
        opt.step(model, b.task_id, grad)?;
        total += loss;
        *step += 1;
    }
    Ok(if batches.is_empty() {
        0.0
    } else {
        total / batches.len() as f64
    })
}

/// Shuffled minibatches of one task.
pub fn shuffled_batches<'a>(
    task_id: &'a str,
    instances: &[&'a Instance],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TaskBatch<'a>> {
    let mut order: Vec<&Instance> = instances.to_vec();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|c| TaskBatch {
            task_id,
            instances: c.to_vec(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task_id: String,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Task metric on the training data after the last epoch.
    pub final_metric: f64,
}

/// Warm-up fine-tuning of a fresh model on one task.
pub fn train_single_task(
    config: &ToyModelConfig,
    recipe: &TrainRecipe,
    task: &TaskDataset,
) -> Result<(Model, TrainSummary), ToyError> {
    let problems: Vec<String> = config.problems().into_iter().chain(recipe.problems()).collect();
    if !problems.is_empty() {
        return Err(ToyError::InvalidConfig(problems));
    }
    if task.is_empty() {
        return Err(ToyError::EmptyDataset(task.task_id.clone()));
    }
    task.check(config.vocab_size, config.max_len)?;
    let mut model = Model::for_dataset(config, task)?;
    let mut opt = Adam::new(&model, recipe).with_encoder_scale(recipe.warmup_encoder_lr_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("warmup/{}", task.task_id)));
    let all: Vec<&Instance> = task.instances.iter().collect();
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(recipe.warmup_epochs);
    for _ in 0..recipe.warmup_epochs {
        let batches = shuffled_batches(&task.task_id, &all, recipe.batch_size, &mut rng);
        epoch_losses.push(run_batches(&mut model, &mut opt, &batches, &mut step)?);
    }
    let final_metric = task_metric(&model, &task.task_id, task.objective, &all)?;
    Ok((
        model,
        TrainSummary {
            task_id: task.task_id.clone(),
            epoch_losses,
            steps: step,
            final_metric,
        },
    ))
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// CLS: accuracy. RGR: mean of Pearson and Spearman. SL: token accuracy.
pub fn task_metric(
    model: &Model,
    task_id: &str,
    objective: Objective,
    instances: &[&Instance],
) -> Result<f64, ToyError> {
    if instances.is_empty() {
        return Err(ToyError::EmptyDataset(task_id.to_owned()));
    }
    match objective {
        Objective::Classification => {
            let mut hits = 0usize;
            for inst in instances {
                if let (Prediction::Class(p), Label::Class(y)) = (model.predict(task_id, inst)?, &inst.label) {
                    hits += usize::from(p == *y);
                }
            }
            Ok(hits as f64 / instances.len() as f64)
        }
        Objective::Regression => {
            let (mut pred, mut gold) = (Vec::new(), Vec::new());
            for inst in instances {
                if let (Prediction::Value(p), Label::Value(y)) = (model.predict(task_id, inst)?, &inst.label) {
                    pred.push(p);
                    gold.push(*y);
                }
            }
            Ok((pearson(&pred, &gold) + spearman(&pred, &gold)) / 2.0)
        }
        Objective::SequenceLabeling => {
            let (mut hits, mut total) = (0usize, 0usize);
            for inst in instances {
                if let (Prediction::Tags(p), Label::Tags(y)) = (model.predict(task_id, inst)?, &inst.label) {
                    hits += p.iter().zip(y).filter(|(a, b)| a == b).count();
                    total += y.len();
                }
            }
            Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
        }
    }
}
