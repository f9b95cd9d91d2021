//! Auxiliary task selection strategies.
//!
//! * greedy trial: add tasks in affinity order until the primary's score
//!   drops, keep the set from the step before the drop;
//! * fixed threshold on the task-level tau;
//! * instance-level filtering of the trial-selected tasks;
//! * three metadata heuristics (size, type, length) used as baselines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlator::{kendall_tau, rank_auxiliaries, CorrError, TaskCorrelationMatrix, Tau};
use crate::gradstore::{GradSource, GradStore, HeadGradientTensor, InstancePack, StoreError, TaskMeta};
use crate::ranker::{normalize, HeadImportanceMatrix};

/// Instance-level threshold default.
pub const DEFAULT_FG_THRESHOLD: f64 = 0.42;
/// Task-level threshold default.
pub const DEFAULT_THRES_THRESHOLD: f64 = 0.47;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Trial,
    Threshold,
    FineGrained,
    HeuSize,
    HeuType,
    HeuLen,
    NoSel,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Trial => "trial",
            Strategy::Threshold => "threshold",
            Strategy::FineGrained => "fine_grained",
            Strategy::HeuSize => "heu_size",
            Strategy::HeuType => "heu_type",
            Strategy::HeuLen => "heu_len",
            Strategy::NoSel => "no_sel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialStep {
    pub aux: Vec<String>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub primary: String,
    pub strategy: Strategy,
    pub chosen: Vec<String>,
    pub kept_fraction: BTreeMap<String, f64>,
    pub trial_trace: Vec<TrialStep>,
    pub threshold_used: Option<f64>,
}

impl SelectionReport {
    fn whole_tasks(primary: &str, strategy: Strategy, chosen: Vec<String>) -> Self {
        Self {
            primary: primary.to_owned(),
            strategy,
            kept_fraction: chosen.iter().map(|t| (t.clone(), 1.0)).collect(),
            chosen,
            trial_trace: Vec::new(),
            threshold_used: None,
        }
    }

    /// Score recorded for the final chosen set, when the strategy ran trials.
    pub fn chosen_score(&self) -> Option<f64> {
        self.trial_trace.iter().find(|s| s.aux == self.chosen).map(|s| s.score)
    }
}

#[derive(Debug, Error)]
#[error("evaluator failed: {message}")]
pub struct EvalError {
    pub message: String,
}

impl EvalError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }
}

/// MTL evaluation callback: score of `primary` trained with `aux`
/// (restricted by `kept_fraction`). Higher is better. Must be deterministic
/// for fixed arguments.
pub trait Evaluator {
    fn evaluate(
        &mut self,
        primary: &str,
        aux: &[String],
        kept_fraction: &BTreeMap<String, f64>,
        seed: u64,
    ) -> Result<f64, EvalError>;
}

impl<F> Evaluator for F
where
    F: FnMut(&str, &[String], &BTreeMap<String, f64>, u64) -> Result<f64, EvalError>,
{
    fn evaluate(
        &mut self,
        primary: &str,
        aux: &[String],
        kept_fraction: &BTreeMap<String, f64>,
        seed: u64,
    ) -> Result<f64, EvalError> {
        self(primary, aux, kept_fraction, seed)
    }
}

/// Returns `scores[aux.len()]`; for exercising the stopping rule.
#[derive(Clone, Debug)]
pub struct ScriptedEvaluator {
    scores: Vec<f64>,
    pub calls: usize,
}

impl ScriptedEvaluator {
    pub fn new(scores: Vec<f64>) -> Self {
        Self { scores, calls: 0 }
    }
}

impl Evaluator for ScriptedEvaluator {
    fn evaluate(&mut self, _: &str, aux: &[String], _: &BTreeMap<String, f64>, _: u64) -> Result<f64, EvalError> {
        self.calls += 1;
        self.scores
            .get(aux.len())
            .copied()
            .ok_or_else(|| EvalError::new(format!("no scripted score for {} auxiliaries", aux.len())))
    }
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("no candidate auxiliary tasks")]
    EmptyCandidates,
    #[error("primary task {0:?} appears among its own candidates")]
    PrimaryAmongCandidates(String),
    #[error("unknown primary task {0:?}")]
    UnknownPrimary(String),
    #[error("{source} (after {} completed trials)", partial_trace.len())]
    Evaluator {
        #[source]
        source: EvalError,
        partial_trace: Vec<TrialStep>,
    },
    #[error("expected a {expected:?} report, got {found:?}")]
    WrongStrategy { expected: Strategy, found: Strategy },
    #[error("report is for primary {report:?} but importance matrix is for {matrix:?}")]
    PrimaryMismatch { report: String, matrix: String },
    #[error("instance tensor is {got:?}, primary importance is {expected:?}")]
    DimsMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected an instance tensor, got a task tensor")]
    NotInstance,
    #[error("no instance pack for chosen task {task_id:?}: {source}")]
    MissingInstances {
        task_id: String,
        #[source]
        source: StoreError,
    },
    #[error("task {task_id:?} lacks the {field} metadata this heuristic needs")]
    MissingMeta { task_id: String, field: &'static str },
    #[error(transparent)]
    Corr(#[from] CorrError),
}

fn check_candidates(primary: &str, ranked: &[String]) -> Result<(), SelectError> {
    if ranked.is_empty() {
        return Err(SelectError::EmptyCandidates);
    }
    if ranked.iter().any(|t| t == primary) {
        return Err(SelectError::PrimaryAmongCandidates(primary.to_owned()));
    }
    Ok(())
}

fn run_trial(
    primary: &str,
    aux: &[String],
    evaluator: &mut dyn Evaluator,
    seed: u64,
    trace: &mut Vec<TrialStep>,
) -> Result<f64, SelectError> {
    let kept: BTreeMap<String, f64> = aux.iter().map(|t| (t.clone(), 1.0)).collect();
    let score = evaluator
        .evaluate(primary, aux, &kept, seed)
        .and_then(|s| {
            if s.is_nan() {
                Err(EvalError::new("evaluator returned NaN"))
            } else {
                Ok(s)
            }
        })
        .map_err(|source| SelectError::Evaluator {
            source,
            partial_trace: trace.clone(),
        })?;
    trace.push(TrialStep {
        aux: aux.to_vec(),
        score,
    });
    Ok(score)
}

fn greedy(
    primary: &str,
    ranked: &[String],
    evaluator: &mut dyn Evaluator,
    seed: u64,
    strategy: Strategy,
) -> Result<SelectionReport, SelectError> {
    check_candidates(primary, ranked)?;
    let mut trace = Vec::with_capacity(ranked.len() + 1);
    let mut previous = run_trial(primary, &[], evaluator, seed, &mut trace)?;
    let mut chosen_len = ranked.len();
    for k in 1..=ranked.len() {
        let score = run_trial(primary, &ranked[..k], evaluator, seed, &mut trace)?;
        // A plateau is not a decrease.
        if score < previous {
            chosen_len = k - 1;
            break;
        }
        previous = score;
    }
    let mut report = SelectionReport::whole_tasks(primary, strategy, ranked[..chosen_len].to_vec());
    report.trial_trace = trace;
    Ok(report)
}

/// Greedy trial selection over `ranked_aux` (most related first). The empty
/// set is evaluated first as the single-task baseline; the first strict
/// score decrease stops the search and the previous set is kept.
pub fn select_trial(
    primary: &str,
    ranked_aux: &[String],
    evaluator: &mut dyn Evaluator,
    seed: u64,
) -> Result<SelectionReport, SelectError> {
    greedy(primary, ranked_aux, evaluator, seed, Strategy::Trial)
}

/// All tasks whose tau with the primary is strictly above `tau_star`, in
/// affinity order.
pub fn select_threshold(
    primary: &str,
    corr: &TaskCorrelationMatrix,
    tau_star: f64,
) -> Result<SelectionReport, SelectError> {
    let ranked = rank_auxiliaries(corr, primary).map_err(|e| match e {
        CorrError::UnknownTask(t) => SelectError::UnknownPrimary(t),
        other => other.into(),
    })?;
    let chosen = ranked
        .into_iter()
        .filter(|a| a.tau.exceeds(tau_star))
        .map(|a| a.task_id)
        .collect();
    let mut report = SelectionReport::whole_tasks(primary, Strategy::Threshold, chosen);
    report.threshold_used = Some(tau_star);
    Ok(report)
}

/// Every candidate, evaluated once.
pub fn select_all(
    primary: &str,
    candidates: &[String],
    evaluator: &mut dyn Evaluator,
    seed: u64,
) -> Result<SelectionReport, SelectError> {
    check_candidates(primary, candidates)?;
    let mut trace = Vec::with_capacity(1);
    run_trial(primary, candidates, evaluator, seed, &mut trace)?;
    let mut report = SelectionReport::whole_tasks(primary, Strategy::NoSel, candidates.to_vec());
    report.trial_trace = trace;
    Ok(report)
}

/// Tau between an instance's normalized gradient signature and the
/// primary task's importance matrix.
pub fn instance_affinity(
    instance_grad: &HeadGradientTensor,
    primary_importance: &HeadImportanceMatrix,
) -> Result<Tau, SelectError> {
    if instance_grad.source != GradSource::Instance {
        return Err(SelectError::NotInstance);
    }
    if instance_grad.dims() != primary_importance.dims() {
        return Err(SelectError::DimsMismatch {
            expected: primary_importance.dims(),
            got: instance_grad.dims(),
        });
    }
    let signature = normalize(instance_grad);
    Ok(kendall_tau(signature.flat(), primary_importance.flat())?)
}

/// Where instance packs come from during subsampling.
pub trait InstanceSource {
    fn instance_pack(&self, task_id: &str) -> Result<InstancePack, StoreError>;
}

impl InstanceSource for GradStore {
    fn instance_pack(&self, task_id: &str) -> Result<InstancePack, StoreError> {
        self.read_instance_pack(task_id)
    }
}

impl InstanceSource for BTreeMap<String, InstancePack> {
    fn instance_pack(&self, task_id: &str) -> Result<InstancePack, StoreError> {
        self.get(task_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownTask(task_id.to_owned()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineGrainedSelection {
    pub report: SelectionReport,
    /// Kept instance ids per chosen task, in pack order.
    pub kept_ids: BTreeMap<String, Vec<String>>,
}

/// Filters the instances of each trial-chosen task, keeping those whose
/// affinity to the primary is strictly above `tau_star`. Instances with an
/// undefined affinity are dropped but still count toward the total.
pub fn subsample_instances(
    primary_importance: &HeadImportanceMatrix,
    trial_report: &SelectionReport,
    instances: &dyn InstanceSource,
    tau_star: f64,
) -> Result<FineGrainedSelection, SelectError> {
    if trial_report.strategy != Strategy::Trial {
        return Err(SelectError::WrongStrategy {
            expected: Strategy::Trial,
            found: trial_report.strategy,
        });
    }
    if trial_report.primary != primary_importance.task_id {
        return Err(SelectError::PrimaryMismatch {
            report: trial_report.primary.clone(),
            matrix: primary_importance.task_id.clone(),
        });
    }
    let mut kept_fraction = BTreeMap::new();
    let mut kept_ids = BTreeMap::new();
    for task_id in &trial_report.chosen {
        let pack = instances
            .instance_pack(task_id)
            .map_err(|source| SelectError::MissingInstances {
                task_id: task_id.clone(),
                source,
            })?;
        let mut kept = Vec::new();
        for tensor in pack.tensors() {
            if instance_affinity(&tensor, primary_importance)?.exceeds(tau_star) {
                kept.push(tensor.instance_id.expect("pack tensors carry ids"));
            }
        }
        let fraction = if pack.is_empty() {
            0.0
        } else {
            kept.len() as f64 / pack.len() as f64
        };
        kept_fraction.insert(task_id.clone(), fraction);
        kept_ids.insert(task_id.clone(), kept);
    }
    Ok(FineGrainedSelection {
        report: SelectionReport {
            primary: trial_report.primary.clone(),
            strategy: Strategy::FineGrained,
            chosen: trial_report.chosen.clone(),
            kept_fraction,
            trial_trace: trial_report.trial_trace.clone(),
            threshold_used: Some(tau_star),
        },
        kept_ids,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicMode {
    Size,
    Type,
    Len,
}

fn split_primary<'a>(primary: &str, metas: &'a [TaskMeta]) -> Result<(&'a TaskMeta, Vec<&'a TaskMeta>), SelectError> {
    let p = metas
        .iter()
        .find(|m| m.task_id == primary)
        .ok_or_else(|| SelectError::UnknownPrimary(primary.to_owned()))?;
    Ok((p, metas.iter().filter(|m| m.task_id != primary).collect()))
}

/// Candidates by training size, largest first.
pub fn rank_by_size(primary: &str, metas: &[TaskMeta]) -> Result<Vec<String>, SelectError> {
    let (_, mut rest) = split_primary(primary, metas)?;
    rest.sort_by(|a, b| b.train_size.cmp(&a.train_size).then_with(|| a.task_id.cmp(&b.task_id)));
    Ok(rest.into_iter().map(|m| m.task_id.clone()).collect())
}

/// Candidates by distance of average length to the primary's, nearest first.
pub fn rank_by_len(primary: &str, metas: &[TaskMeta]) -> Result<Vec<String>, SelectError> {
    let (p, mut rest) = split_primary(primary, metas)?;
    for m in std::iter::once(p).chain(rest.iter().copied()) {
        if !m.avg_len.is_finite() {
            return Err(SelectError::MissingMeta {
                task_id: m.task_id.clone(),
                field: "avg_len",
            });
        }
    }
    let dist = |m: &TaskMeta| (m.avg_len - p.avg_len).abs();
    rest.sort_by(|a, b| dist(a).total_cmp(&dist(b)).then_with(|| a.task_id.cmp(&b.task_id)));
    Ok(rest.into_iter().map(|m| m.task_id.clone()).collect())
}

/// Candidates sharing the primary's task type.
pub fn same_type(primary: &str, metas: &[TaskMeta]) -> Result<Vec<String>, SelectError> {
    let (p, rest) = split_primary(primary, metas)?;
    if p.type_tag.is_empty() {
        return Err(SelectError::MissingMeta {
            task_id: p.task_id.clone(),
            field: "type_tag",
        });
    }
    let mut same: Vec<String> = rest
        .into_iter()
        .filter(|m| m.type_tag == p.type_tag)
        .map(|m| m.task_id.clone())
        .collect();
    same.sort();
    Ok(same)
}

/// Metadata heuristics. `Size` and `Len` rank candidates and then run the
/// same greedy loop as trial selection; `Type` takes every same-type task
/// without trials.
pub fn heuristic_select(
    primary: &str,
    metas: &[TaskMeta],
    mode: HeuristicMode,
    evaluator: &mut dyn Evaluator,
    seed: u64,
) -> Result<SelectionReport, SelectError> {
    match mode {
        HeuristicMode::Size => greedy(
            primary,
            &rank_by_size(primary, metas)?,
            evaluator,
            seed,
            Strategy::HeuSize,
        ),
        HeuristicMode::Len => greedy(
            primary,
            &rank_by_len(primary, metas)?,
            evaluator,
            seed,
            Strategy::HeuLen,
        ),
        HeuristicMode::Type => Ok(SelectionReport::whole_tasks(
            primary,
            Strategy::HeuType,
            same_type(primary, metas)?,
        )),
    }
}
