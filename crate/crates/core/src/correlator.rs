//! Kendall's tau-b between head-importance matrices and the task affinity
//! matrix built from it.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranker::HeadImportanceMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum CorrError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("input contains NaN at index {0}")]
    NaN(usize),
    #[error("matrix for {task_id:?} is {got:?}, expected {expected:?}")]
    DimsMismatch {
        task_id: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("need at least 2 tasks to correlate, got {0}")]
    TooFewTasks(usize),
    #[error("duplicate task id {0:?}")]
    DuplicateTask(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
}

/// A rank correlation, or `Undefined` when either side is constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Option<f64>", into = "Option<f64>")]
pub enum Tau {
    Defined(f64),
    Undefined,
}

impl Tau {
    pub fn value(self) -> Option<f64> {
        match self {
            Tau::Defined(v) => Some(v),
            Tau::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Tau::Defined(_))
    }

    /// Strictly above `threshold`; `Undefined` never qualifies.
    pub fn exceeds(self, threshold: f64) -> bool {
        matches!(self, Tau::Defined(v) if v > threshold)
    }

    /// Descending order with `Undefined` last.
    pub fn cmp_desc(self, other: Tau) -> Ordering {
        match (self, other) {
            (Tau::Defined(a), Tau::Defined(b)) => b.total_cmp(&a),
            (Tau::Defined(_), Tau::Undefined) => Ordering::Less,
            (Tau::Undefined, Tau::Defined(_)) => Ordering::Greater,
            (Tau::Undefined, Tau::Undefined) => Ordering::Equal,
        }
    }
}

impl From<Option<f64>> for Tau {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Tau::Undefined, Tau::Defined)
    }
}

impl From<Tau> for Option<f64> {
    fn from(t: Tau) -> Self {
        t.value()
    }
}

impl std::fmt::Display for Tau {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tau::Defined(v) => write!(f, "{v}"),
            Tau::Undefined => f.write_str("undefined"),
        }
    }
}

/// Pair classification over all `n(n-1)/2` index pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    /// Tied in x but not in y.
    pub ties_x: u64,
    /// Tied in y but not in x.
    pub ties_y: u64,
    pub ties_both: u64,
}

impl PairCounts {
    pub fn tau_b(&self) -> Tau {
        let cd = self.concordant + self.discordant;
        let left = cd + self.ties_x;
        let right = cd + self.ties_y;
        if left == 0 || right == 0 {
            return Tau::Undefined;
        }
        let num = self.concordant as f64 - self.discordant as f64;
        Tau::Defined(num / ((left as f64) * (right as f64)).sqrt())
    }
}

fn tied_pairs(run: u64) -> u64 {
    run * run.saturating_sub(1) / 2
}

fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).expect("NaN filtered on entry")
}

/// Counts tied runs in an already-sorted sequence under `eq`.
fn tied_pairs_in<T>(sorted: &[T], eq: impl Fn(&T, &T) -> bool) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if eq(&w[0], &w[1]) {
            run += 1;
        } else {
            total += tied_pairs(run);
            run = 1;
        }
    }
    total + tied_pairs(run)
}

/// Bottom-up merge sort of `ys` that returns the number of strict
/// inversions (`i < j`, `ys[i] > ys[j]`).
fn sort_counting_inversions(ys: &mut Vec<f64>) -> u64 {
    let n = ys.len();
    let mut buf = vec![0.0; n];
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        for start in (0..n).step_by(2 * width) {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid && j < end {
                if ys[j] < ys[i] {
                    buf[k] = ys[j];
                    swaps += (mid - i) as u64;
                    j += 1;
                } else {
                    buf[k] = ys[i];
                    i += 1;
                }
                k += 1;
            }
            buf[k..k + (mid - i)].copy_from_slice(&ys[i..mid]);
            k += mid - i;
            buf[k..k + (end - j)].copy_from_slice(&ys[j..end]);
        }
        std::mem::swap(ys, &mut buf);
        width *= 2;
    }
    swaps
}

fn check_inputs(x: &[f64], y: &[f64]) -> Result<(), CorrError> {
    if x.len() != y.len() {
        return Err(CorrError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(CorrError::TooShort(x.len()));
    }
    if let Some(i) = x.iter().chain(y).position(|v| v.is_nan()) {
        return Err(CorrError::NaN(i % x.len()));
    }
    Ok(())
}

/// Pair counts in `O(n log n)`: sort by `(x, y)`, then count discordant
/// pairs as inversions of the `y` sequence while merge-sorting it.
pub fn pair_counts(x: &[f64], y: &[f64]) -> Result<PairCounts, CorrError> {
    check_inputs(x, y)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| cmp_f64(a.0, b.0).then(cmp_f64(a.1, b.1)));

    let tied_x = tied_pairs_in(&pairs, |a, b| a.0 == b.0);
    let tied_xy = tied_pairs_in(&pairs, |a, b| a.0 == b.0 && a.1 == b.1);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let discordant = sort_counting_inversions(&mut ys);
    let tied_y = tied_pairs_in(&ys, |a, b| a == b);

    let total = tied_pairs(n);
    let untied = total + tied_xy - tied_x - tied_y;
    Ok(PairCounts {
        concordant: untied - discordant,
        discordant,
        ties_x: tied_x - tied_xy,
        ties_y: tied_y - tied_xy,
        ties_both: tied_xy,
    })
}

/// Kendall's tau-b. `Undefined` when either vector is constant.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<Tau, CorrError> {
    Ok(pair_counts(x, y)?.tau_b())
}

/// Symmetric task-by-task tau matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCorrelationMatrix {
    pub task_ids: Vec<String>,
    pub values: Vec<Vec<Tau>>,
}

impl TaskCorrelationMatrix {
    pub fn index_of(&self, task_id: &str) -> Option<usize> {
        self.task_ids.iter().position(|t| t == task_id)
    }

    pub fn get(&self, a: &str, b: &str) -> Option<Tau> {
        Some(self.values[self.index_of(a)?][self.index_of(b)?])
    }

    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    /// Same matrix with rows and columns in ascending task-id order.
    pub fn sorted(&self) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.task_ids[a].cmp(&self.task_ids[b]));
        Self {
            task_ids: idx.iter().map(|&i| self.task_ids[i].clone()).collect(),
            values: idx
                .iter()
                .map(|&i| idx.iter().map(|&j| self.values[i][j]).collect())
                .collect(),
        }
    }

    /// Heatmap CSV: header row and first column carry task ids; values use
    /// 17 significant digits; undefined cells are empty.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["task".to_owned()];
        header.extend(self.task_ids.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.task_ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|t| format_tau(*t)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn format_full_precision(v: f64) -> String {
    format!("{v:.16e}")
}

fn format_tau(t: Tau) -> String {
    t.value().map(format_full_precision).unwrap_or_default()
}

/// Correlates every pair of importance matrices over their flattened values.
pub fn correlation_matrix(matrices: &[HeadImportanceMatrix]) -> Result<TaskCorrelationMatrix, CorrError> {
    if matrices.len() < 2 {
        return Err(CorrError::TooFewTasks(matrices.len()));
    }
    let dims = matrices[0].dims();
    let mut seen = BTreeSet::new();
    for m in matrices {
        if m.dims() != dims {
            return Err(CorrError::DimsMismatch {
                task_id: m.task_id.clone(),
                expected: dims,
                got: m.dims(),
            });
        }
        if !seen.insert(m.task_id.as_str()) {
            return Err(CorrError::DuplicateTask(m.task_id.clone()));
        }
    }
    let n = matrices.len();
    let mut values = vec![vec![Tau::Undefined; n]; n];
    for i in 0..n {
        for j in i..n {
            let tau = kendall_tau(matrices[i].flat(), matrices[j].flat())?;
            values[i][j] = tau;
            values[j][i] = tau;
        }
    }
    Ok(TaskCorrelationMatrix {
        task_ids: matrices.iter().map(|m| m.task_id.clone()).collect(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAuxiliary {
    pub task_id: String,
    pub tau: Tau,
}

/// Every task except `primary`, by tau with the primary descending; ties go
/// to the smaller task id and undefined taus sort last.
pub fn rank_auxiliaries(corr: &TaskCorrelationMatrix, primary: &str) -> Result<Vec<RankedAuxiliary>, CorrError> {
    let p = corr
        .index_of(primary)
        .ok_or_else(|| CorrError::UnknownTask(primary.to_owned()))?;
    let mut ranked: Vec<RankedAuxiliary> = corr
        .task_ids
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != p)
        .map(|(i, id)| RankedAuxiliary {
            task_id: id.clone(),
            tau: corr.values[p][i],
        })
        .collect();
    ranked.sort_by(|a, b| a.tau.cmp_desc(b.tau).then_with(|| a.task_id.cmp(&b.task_id)));
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::HeadGrid;
    use crate::ranker::NormMeta;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// O(n^2) enumeration reference.
    fn brute_counts(x: &[f64], y: &[f64]) -> PairCounts {
        let mut c = PairCounts::default();
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let dx = x[i] - x[j];
                let dy = y[i] - y[j];
                match (dx == 0.0, dy == 0.0) {
                    (true, true) => c.ties_both += 1,
                    (true, false) => c.ties_x += 1,
                    (false, true) => c.ties_y += 1,
                    _ if (dx > 0.0) == (dy > 0.0) => c.concordant += 1,
                    _ => c.discordant += 1,
                }
            }
        }
        c
    }

    fn tau(x: &[f64], y: &[f64]) -> f64 {
        kendall_tau(x, y).unwrap().value().unwrap()
    }

    #[test]
    fn identical_and_reversed() {
        assert_eq!(tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]), 1.0);
        assert_eq!(tau(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]), -1.0);
    }

    #[test]
    fn three_element_hand_case() {
        let c = pair_counts(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert_eq!((c.concordant, c.discordant), (2, 1));
        assert!((tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_vector_is_undefined() {
        assert_eq!(kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), Tau::Undefined);
        assert_eq!(kendall_tau(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), Tau::Undefined);
        assert_eq!(kendall_tau(&[2.0, 2.0, 2.0], &[5.0, 5.0, 5.0]).unwrap(), Tau::Undefined);
    }

    #[test]
    fn input_errors() {
        assert_eq!(
            kendall_tau(&[1.0, 2.0], &[1.0]).unwrap_err(),
            CorrError::LengthMismatch { left: 2, right: 1 }
        );
        assert_eq!(kendall_tau(&[1.0], &[1.0]).unwrap_err(), CorrError::TooShort(1));
        assert_eq!(
            kendall_tau(&[1.0, f64::NAN], &[1.0, 2.0]).unwrap_err(),
            CorrError::NaN(1)
        );
    }

    #[test]
    fn signed_zeros_tie() {
        let c = pair_counts(&[0.0, -0.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c, brute_counts(&[0.0, -0.0, 1.0], &[1.0, 2.0, 3.0]));
        assert_eq!(c.ties_x, 1);
    }

    #[test]
    fn matches_enumeration_on_random_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(2..=200);
            let levels = [1, 2, 5, 1_000_000][rng.random_range(0..4)];
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
            assert_eq!(pair_counts(&x, &y).unwrap(), brute_counts(&x, &y));
        }
    }

    fn matrix(id: &str, values: Vec<f64>) -> HeadImportanceMatrix {
        HeadImportanceMatrix {
            task_id: id.into(),
            values: HeadGrid::from_vec(2, 4, values).unwrap(),
            norm_meta: NormMeta {
                layer_sums: vec![],
                global_min: 0.0,
                global_max: 1.0,
                degenerate: false,
            },
        }
    }

    #[test]
    fn matrix_of_identical_and_reversed() {
        let v: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let rev: Vec<f64> = v.iter().map(|x| 1.0 - x).collect();
        let corr = correlation_matrix(&[matrix("A", v.clone()), matrix("B", v), matrix("C", rev)]).unwrap();
        assert_eq!(corr.get("A", "B"), Some(Tau::Defined(1.0)));
        assert_eq!(corr.get("A", "C"), Some(Tau::Defined(-1.0)));
        assert_eq!(corr.get("C", "C"), Some(Tau::Defined(1.0)));
    }

    #[test]
    fn matrix_entries_match_enumeration() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let ms: Vec<_> = ["A", "B", "C"]
            .iter()
            .map(|id| matrix(id, (0..8).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let corr = correlation_matrix(&ms).unwrap();
        for (i, a) in ms.iter().enumerate() {
            for (j, b) in ms.iter().enumerate() {
                let oracle = brute_counts(a.flat(), b.flat()).tau_b();
                assert_eq!(corr.values[i][j], oracle);
                assert_eq!(corr.values[i][j], corr.values[j][i]);
            }
        }
    }

    #[test]
    fn matrix_errors() {
        assert_eq!(
            correlation_matrix(&[matrix("A", vec![0.0; 8])]).unwrap_err(),
            CorrError::TooFewTasks(1)
        );
        let mut odd = matrix("B", vec![0.0; 8]);
        odd.values = HeadGrid::zeros(4, 2);
        assert!(matches!(
            correlation_matrix(&[matrix("A", vec![0.0; 8]), odd]),
            Err(CorrError::DimsMismatch { .. })
        ));
        assert!(matches!(
            correlation_matrix(&[matrix("A", vec![0.0; 8]), matrix("A", vec![0.0; 8])]),
            Err(CorrError::DuplicateTask(_))
        ));
    }

    fn corr_from_row(primary_row: &[(&str, Tau)]) -> TaskCorrelationMatrix {
        let mut ids = vec!["P".to_owned()];
        ids.extend(primary_row.iter().map(|(id, _)| id.to_string()));
        let n = ids.len();
        let mut values = vec![vec![Tau::Defined(0.0); n]; n];
        for (k, (_, t)) in primary_row.iter().enumerate() {
            values[0][k + 1] = *t;
            values[k + 1][0] = *t;
        }
        TaskCorrelationMatrix { task_ids: ids, values }
    }

    fn ids(r: &[RankedAuxiliary]) -> Vec<&str> {
        r.iter().map(|a| a.task_id.as_str()).collect()
    }

    #[test]
    fn ranks_by_tau_then_id() {
        let corr = corr_from_row(&[
            ("A", Tau::Defined(0.9)),
            ("B", Tau::Defined(0.2)),
            ("C", Tau::Defined(0.5)),
        ]);
        assert_eq!(ids(&rank_auxiliaries(&corr, "P").unwrap()), ["A", "C", "B"]);

        let tied = corr_from_row(&[
            ("Z", Tau::Defined(0.4)),
            ("Y", Tau::Undefined),
            ("M", Tau::Defined(0.4)),
        ]);
        assert_eq!(ids(&rank_auxiliaries(&tied, "P").unwrap()), ["M", "Z", "Y"]);

        assert_eq!(
            rank_auxiliaries(&corr, "nope").unwrap_err(),
            CorrError::UnknownTask("nope".into())
        );
    }

    #[test]
    fn csv_shape_and_precision() {
        let corr = corr_from_row(&[("A", Tau::Defined(1.0 / 3.0)), ("B", Tau::Undefined)]);
        let mut buf = Vec::new();
        corr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "task,P,A,B");
        assert_eq!(lines[1], "P,0.0000000000000000e0,3.3333333333333331e-1,");
        let parsed: f64 = "3.3333333333333331e-1".parse().unwrap();
        assert_eq!(parsed, 1.0 / 3.0);
    }

    #[test]
    fn tau_serializes_as_nullable_number() {
        assert_eq!(serde_json::to_string(&Tau::Undefined).unwrap(), "null");
        assert_eq!(serde_json::to_string(&Tau::Defined(0.5)).unwrap(), "0.5");
        assert_eq!(serde_json::from_str::<Tau>("null").unwrap(), Tau::Undefined);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(pairs in prop::collection::vec((0u8..6, -1e3f64..1e3), 2..60)) {
            let x: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let a = kendall_tau(&x, &y).unwrap();
            prop_assert_eq!(a, kendall_tau(&y, &x).unwrap());
            if let Tau::Defined(v) = a {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn strictly_increasing_transform_is_invariant(
            x in prop::collection::vec(-50.0f64..50.0, 2..80),
            seed in any::<u64>(),
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.random::<f64>()).collect();
            let fx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            prop_assert_eq!(pair_counts(&fx, &y).unwrap(), pair_counts(&x, &y).unwrap());
        }

        #[test]
        fn self_and_negation(x in prop::collection::btree_set(-1_000_000i64..1_000_000, 2..60)) {
            let x: Vec<f64> = x.into_iter().map(|v| v as f64).collect();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert_eq!(kendall_tau(&x, &x).unwrap(), Tau::Defined(1.0));
            prop_assert_eq!(kendall_tau(&x, &neg).unwrap(), Tau::Defined(-1.0));
        }
    }
}
