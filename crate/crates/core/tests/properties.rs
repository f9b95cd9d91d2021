use std::collections::BTreeMap;

use gradts_core::gradstore::{decode, encode_pack, encode_tensor, validate_store, GradStore, Objective, TaskMeta};
use gradts_core::ranker::accumulate;
use gradts_core::selector::{
    select_threshold, select_trial, subsample_instances, ScriptedEvaluator, SelectionReport, Strategy as SelStrategy,
};
use gradts_core::{flatten_ranking, normalize, HeadGradientTensor, HeadGrid, InstancePack, TaskCorrelationMatrix, Tau};
use proptest::prelude::*;

fn arb_value() -> impl Strategy<Value = f64> {
    prop_oneof![
        Just(0.0),
        (0.0f64..1.0).prop_map(|v| v * f64::MIN_POSITIVE),
        0.0f64..1e3,
        (0.0f64..1.0).prop_map(|v| v * 1e300),
    ]
}

fn arb_grid(max: usize) -> impl Strategy<Value = HeadGrid> {
    (1..=max, 1..=max).prop_flat_map(|(l, h)| {
        prop::collection::vec(arb_value(), l * h).prop_map(move |v| HeadGrid::from_vec(l, h, v).unwrap())
    })
}

fn bits(g: &HeadGrid) -> Vec<u64> {
    g.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn corr_matrix(taus: &[Option<f64>]) -> TaskCorrelationMatrix {
    let n = taus.len() + 1;
    let mut values = vec![vec![Tau::Defined(1.0); n]; n];
    for (j, t) in taus.iter().enumerate() {
        let t = t.map_or(Tau::Undefined, Tau::Defined);
        values[0][j + 1] = t;
        values[j + 1][0] = t;
    }
    TaskCorrelationMatrix {
        task_ids: (0..n).map(|i| format!("t{i}")).collect(),
        values,
    }
}

proptest! {
    #[test]
    fn tensor_files_round_trip_bit_exact(g in arb_grid(12)) {
        let t = HeadGradientTensor::task("rt", g);
        let file = decode(&encode_tensor(&t)).unwrap();
        prop_assert_eq!(file.blocks.len(), 1);
        prop_assert_eq!(bits(&file.blocks[0]), bits(&t.values));
        prop_assert_eq!(file.task_id, "rt");
    }

    #[test]
    fn packs_round_trip_bit_exact(blocks in (1usize..=5, 1usize..=5).prop_flat_map(|(l, h)| {
        prop::collection::vec(
            prop::collection::vec(arb_value(), l * h).prop_map(move |v| HeadGrid::from_vec(l, h, v).unwrap()),
            0..8,
        )
    })) {
        let ids = (0..blocks.len()).map(|i| format!("inst-{i}")).collect();
        let pack = InstancePack::new("p", ids, blocks).unwrap();
        let file = decode(&encode_pack(&pack)).unwrap();
        prop_assert_eq!(&file.instance_ids, &pack.instance_ids);
        prop_assert_eq!(file.blocks.iter().map(bits).collect::<Vec<_>>(), pack.blocks.iter().map(bits).collect::<Vec<_>>());
    }

    #[test]
    fn engine_written_stores_validate_clean(grids in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 6), 1..5)) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = GradStore::open_or_create(dir.path()).unwrap();
        for (i, v) in grids.iter().enumerate() {
            let id = format!("task{i}");
            store.upsert_task_meta(TaskMeta {
                task_id: id.clone(),
                objective: Objective::Regression,
                label_count: None,
                train_size: i + 1,
                avg_len: 3.0,
                type_tag: "t".into(),
            }).unwrap();
            let grid = HeadGrid::from_vec(2, 3, v.clone()).unwrap();
            store.write_tensor(&HeadGradientTensor::task(&id, grid.clone())).unwrap();
            store.write_instance_pack(&InstancePack::new(&id, vec!["a".into()], vec![grid]).unwrap()).unwrap();
        }
        prop_assert!(validate_store(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn accumulation_matches_resummation(batches in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 6), 1..100)) {
        let grids: Vec<HeadGrid> = batches.iter().map(|b| HeadGrid::from_vec(2, 3, b.clone()).unwrap()).collect();
        let t = accumulate("a", &grids).unwrap();
        for cell in 0..6 {
            // Reverse order, absolute values taken first.
            let want: f64 = batches.iter().rev().map(|b| b[cell].abs()).sum();
            let got = t.values.as_slice()[cell];
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn layer_order_and_scale_invariance(g in arb_grid(8), c in prop_oneof![Just(1e-6), Just(1.0), Just(1e6)]) {
        let t = HeadGradientTensor::task("s", g);
        let m = normalize(&t);
        let (_, h) = m.dims();
        for (r, row) in t.values.rows().enumerate() {
            let out = &m.flat()[r * h..(r + 1) * h];
            for i in 0..h {
                for j in 0..h {
                    if row[i] < row[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                    if row[i] == row[j] {
                        prop_assert_eq!(out[i], out[j]);
                    }
                }
            }
        }
        let scaled = HeadGradientTensor::task("s", HeadGrid::from_vec(
            t.values.dims().0, h, t.values.as_slice().iter().map(|v| v * c).collect()).unwrap());
        let (a, b) = (m, normalize(&scaled));
        if a.norm_meta.degenerate || b.norm_meta.degenerate {
            return Ok(());
        }
        let order = flatten_ranking(&b).order;
        prop_assert!(order.windows(2).all(|w| a.flat()[w[0]] >= a.flat()[w[1]] - 1e-12));
    }

    #[test]
    fn trial_stops_at_the_first_decrease(scores in prop::collection::vec(prop_oneof![0.0f64..1.0, Just(0.5)], 2..8)) {
        let ranked: Vec<String> = (1..scores.len()).map(|i| format!("a{i}")).collect();
        let mut ev = ScriptedEvaluator::new(scores.clone());
        let r = select_trial("p", &ranked, &mut ev, 0).unwrap();
        prop_assert_eq!(ev.calls, r.trial_trace.len());
        let stop = (1..scores.len()).find(|&k| scores[k] < scores[k - 1]);
        match stop {
            Some(k) => {
                prop_assert_eq!(r.trial_trace.len(), k + 1);
                prop_assert_eq!(&r.chosen[..], &ranked[..k - 1]);
            }
            None => {
                prop_assert_eq!(r.trial_trace.len(), scores.len());
                prop_assert_eq!(&r.chosen, &ranked);
            }
        }
        let again = select_trial("p", &ranked, &mut ScriptedEvaluator::new(scores), 0).unwrap();
        prop_assert_eq!(again, r);
    }

    #[test]
    fn threshold_selection_is_nested(
        taus in prop::collection::vec(prop::option::weighted(0.9, -1.0f64..=1.0), 1..10),
        t1 in -1.0f64..=1.0,
        t2 in -1.0f64..=1.0,
    ) {
        let corr = corr_matrix(&taus);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let wide = select_threshold("t0", &corr, lo).unwrap().chosen;
        let narrow = select_threshold("t0", &corr, hi).unwrap().chosen;
        prop_assert!(narrow.iter().all(|t| wide.contains(t)));
        for t in &wide {
            prop_assert!(corr.get("t0", t).unwrap().exceeds(lo));
        }
    }

    #[test]
    fn kept_fraction_does_not_grow_with_the_threshold(
        primary in prop::collection::vec(0.0f64..1.0, 6),
        packs in prop::collection::vec(prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..12), 1..4),
        t1 in -1.0f64..=1.0,
        t2 in -1.0f64..=1.0,
    ) {
        let primary = normalize(&HeadGradientTensor::task("p", HeadGrid::from_vec(2, 3, primary).unwrap()));
        let mut source = BTreeMap::new();
        let mut chosen = Vec::new();
        for (i, blocks) in packs.into_iter().enumerate() {
            let id = format!("x{i}");
            let ids = (0..blocks.len()).map(|k| format!("{id}-{k}")).collect();
            let grids = blocks.into_iter().map(|v| HeadGrid::from_vec(2, 3, v).unwrap()).collect();
            source.insert(id.clone(), InstancePack::new(&id, ids, grids).unwrap());
            chosen.push(id);
        }
        let trial = SelectionReport {
            primary: "p".into(),
            strategy: SelStrategy::Trial,
            kept_fraction: chosen.iter().map(|t| (t.clone(), 1.0)).collect(),
            chosen,
            trial_trace: vec![],
            threshold_used: None,
        };
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = subsample_instances(&primary, &trial, &source, lo).unwrap();
        let b = subsample_instances(&primary, &trial, &source, hi).unwrap();
        for (task, f) in &b.report.kept_fraction {
            prop_assert!(*f <= a.report.kept_fraction[task]);
            prop_assert!(b.kept_ids[task].iter().all(|id| a.kept_ids[task].contains(id)));
        }
    }
}
