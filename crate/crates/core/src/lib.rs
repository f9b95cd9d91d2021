//! Auxiliary task selection from attention-head gradients.
//!
//! The pipeline: accumulate absolute gradients per attention head for each
//! task ([`ranker::accumulate`]), normalize them into head-importance
//! matrices ([`ranker::normalize`]), correlate tasks with Kendall's tau-b
//! ([`correlator`]), then pick auxiliary tasks or instances for a primary
//! task ([`selector`]). [`toymtl`] provides a small trainable transformer and
//! synthetic tasks so the whole loop runs on a laptop.

pub mod correlator;
pub mod gradstore;
pub mod grid;
pub mod ranker;
pub mod selector;
pub mod toymtl;

pub use correlator::{correlation_matrix, kendall_tau, rank_auxiliaries, TaskCorrelationMatrix, Tau};
pub use gradstore::{GradSource, GradStore, HeadGradientTensor, InstancePack, Objective, TaskMeta};
pub use grid::HeadGrid;
pub use ranker::{flatten_ranking, normalize, HeadImportanceMatrix, HeadRankingVector};
pub use selector::{
    heuristic_select, select_threshold, select_trial, subsample_instances, Evaluator, SelectionReport, Strategy,
};
