use std::collections::BTreeMap;

use gradts_core::gradstore::Objective;
use gradts_core::toymtl::data::{generate_task, planted_suite_specs, SyntheticTaskSpec};
use gradts_core::toymtl::model::Gradient;
use gradts_core::toymtl::{
    accumulate_instance_gradients, accumulate_task_gradients, gen_synthetic_suite, gradient_check, train_single_task,
    Instance, Label, Model, Prediction, TaskDataset, ToyError, ToyEvaluator, ToyModelConfig, TrainRecipe,
};

fn small_config(seed: u64) -> ToyModelConfig {
    ToyModelConfig {
        layers: 2,
        heads: 2,
        model_dim: 8,
        ff_dim: 12,
        vocab_size: 16,
        max_len: 8,
        blocks_enabled: true,
        head_init_scale: 1.0,
        seed,
    }
}

fn spec(id: &str, objective: Objective, label_count: Option<usize>, rule: &str, n: usize) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        task_id: id.into(),
        objective,
        label_count,
        generator_rule_id: rule.into(),
        relatedness_group: 0,
        train_size: n,
        noise_rate: 0.0,
        seed: 11,
        min_len: 3,
        max_len: 8,
    }
}

#[test]
fn finite_differences_match_backprop() {
    let config = small_config(5);
    for (objective, k, rule) in [
        (Objective::Classification, Some(3), "lexicon"),
        (Objective::Regression, None, "overlap"),
        (Objective::SequenceLabeling, None, "lexicon"),
    ] {
        let task = generate_task(&spec("g", objective, k, rule, 4), 16, 8).unwrap();
        let model = Model::for_dataset(&config, &task).unwrap();
        assert!(model.param_count() <= 5000, "{}", model.param_count());
        let report = gradient_check(&model, &task, 1e-4, usize::MAX).unwrap();
        assert_eq!(report.checked, model.param_count());
        assert!(report.max_rel_error < 1e-4, "{objective:?}: {report:?}");
    }
}

#[test]
fn perfectly_fit_batch_has_zero_gradient() {
    let config = small_config(1);
    let task = generate_task(&spec("z", Objective::Regression, None, "constant", 5), 16, 8).unwrap();
    let mut model = Model::for_dataset(&config, &task).unwrap();
    // Zero readout and zero bias predict the constant target exactly.
    model
        .heads
        .get_mut("z")
        .unwrap()
        .params
        .iter_mut()
        .for_each(|p| *p = 0.0);
    let batch: Vec<&Instance> = task.instances.iter().collect();
    let (loss, grad) = model.batch_loss_and_grad("z", &batch).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.norm() < 1e-8);
}

#[test]
fn embedding_only_model_matches_least_squares() {
    let config = ToyModelConfig {
        blocks_enabled: false,
        ..small_config(2)
    };
    let task = generate_task(&spec("ls", Objective::Regression, None, "lexicon", 6), 16, 8).unwrap();
    let model = Model::for_dataset(&config, &task).unwrap();
    let batch: Vec<&Instance> = task.instances.iter().collect();
    let (_, grad) = model.batch_loss_and_grad("ls", &batch).unwrap();

    // Closed form: features are mean-pooled embeddings, prediction X w + b,
    // loss mean (X w + b - y)^2, so dw = 2/n X^T r and db = 2/n sum r.
    let d = config.model_dim;
    let head = &model.heads["ls"].params;
    let (w, b) = (&head[..d], head[d]);
    let tok = &model.encoder[model.layout.tok_emb.clone()];
    let pos = &model.encoder[model.layout.pos_emb.clone()];
    let n = batch.len() as f64;
    let mut dw = vec![0.0; d];
    let mut db = 0.0;
    let mut d_tok = vec![0.0; tok.len()];
    let mut d_pos = vec![0.0; pos.len()];
    for inst in &batch {
        let t_len = inst.tokens.len() as f64;
        let x: Vec<f64> = (0..d)
            .map(|j| {
                inst.tokens
                    .iter()
                    .enumerate()
                    .map(|(t, &tk)| tok[tk as usize * d + j] + pos[t * d + j])
                    .sum::<f64>()
                    / t_len
            })
            .collect();
        let Label::Value(y) = inst.label else { unreachable!() };
        let r = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b - y;
        for j in 0..d {
            dw[j] += 2.0 / n * r * x[j];
        }
        db += 2.0 / n * r;
        for (t, &tk) in inst.tokens.iter().enumerate() {
            for j in 0..d {
                d_tok[tk as usize * d + j] += 2.0 / n * r * w[j] / t_len;
                d_pos[t * d + j] += 2.0 / n * r * w[j] / t_len;
            }
        }
    }
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-8);
    assert!(close(&grad.head[..d], &dw));
    assert!((grad.head[d] - db).abs() < 1e-8);
    assert!(close(&grad.encoder[model.layout.tok_emb.clone()], &d_tok));
    assert!(close(&grad.encoder[model.layout.pos_emb.clone()], &d_pos));
    let rest = model.layout.pos_emb.end..grad.encoder.len();
    assert!(grad.encoder[rest].iter().all(|&g| g == 0.0));
}

#[test]
fn warmup_learns_a_clean_two_class_task() {
    let config = ToyModelConfig::default();
    let mut s = spec("smoke", Objective::Classification, Some(2), "lexicon", 400);
    s.max_len = 12;
    let task = generate_task(&s, config.vocab_size, config.max_len).unwrap();
    let recipe = TrainRecipe {
        warmup_encoder_lr_scale: 1.0,
        ..Default::default()
    };
    let (_, summary) = train_single_task(&config, &recipe, &task).unwrap();
    println!(
        "smoke accuracy {:.4}, epoch losses {:?}",
        summary.final_metric, summary.epoch_losses
    );
    assert!(summary.final_metric > 0.9, "{summary:?}");
    assert!(summary.epoch_losses.windows(2).all(|w| w[1] <= w[0]), "{summary:?}");
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let config = small_config(4);
    let task = generate_task(&spec("lr0", Objective::Classification, Some(2), "lexicon", 40), 16, 8).unwrap();
    let recipe = TrainRecipe {
        learning_rate: 0.0,
        ..Default::default()
    };
    let (trained, summary) = train_single_task(&config, &recipe, &task).unwrap();
    let fresh = Model::for_dataset(&config, &task).unwrap();
    assert!(summary.steps > 0);
    let bits = |m: &Model| {
        m.encoder
            .iter()
            .chain(&m.heads["lr0"].params)
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&trained), bits(&fresh));
}

#[test]
fn head_only_warmup_keeps_the_encoder() {
    let config = small_config(5);
    let task = generate_task(&spec("frz", Objective::Classification, Some(2), "lexicon", 80), 16, 8).unwrap();
    let (trained, summary) = train_single_task(&config, &TrainRecipe::default(), &task).unwrap();
    let fresh = Model::for_dataset(&config, &task).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&trained.encoder), bits(&fresh.encoder));
    assert_ne!(bits(&trained.heads["frz"].params), bits(&fresh.heads["frz"].params));
    assert!(
        summary.epoch_losses.last() < summary.epoch_losses.first(),
        "{summary:?}"
    );
}

#[test]
fn constant_regression_target_is_learned() {
    let config = small_config(6);
    let task = generate_task(&spec("c0", Objective::Regression, None, "constant", 200), 16, 8).unwrap();
    let recipe = TrainRecipe {
        learning_rate: 1e-2,
        warmup_epochs: 5,
        warmup_encoder_lr_scale: 1.0,
        ..Default::default()
    };
    let (model, _) = train_single_task(&config, &recipe, &task).unwrap();
    let worst = task
        .instances
        .iter()
        .map(|i| match model.predict("c0", i).unwrap() {
            Prediction::Value(v) => v.abs(),
            other => panic!("{other:?}"),
        })
        .fold(0.0, f64::max);
    println!("constant-target worst |prediction| {worst:.4}");
    assert!(worst < 0.1, "{worst}");
}

#[test]
fn training_is_deterministic() {
    let config = small_config(8);
    let task = generate_task(&spec("det", Objective::SequenceLabeling, None, "lexicon", 60), 16, 8).unwrap();
    let recipe = TrainRecipe::default();
    let (a, sa) = train_single_task(&config, &recipe, &task).unwrap();
    let (b, sb) = train_single_task(&config, &recipe, &task).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(sa, sb);
}

#[test]
fn divergence_is_reported_with_step() {
    let config = small_config(0);
    let mut task = generate_task(&spec("nan", Objective::Regression, None, "lexicon", 20), 16, 8).unwrap();
    task.instances[5].label = Label::Value(1e300);
    let recipe = TrainRecipe {
        batch_size: 4,
        clip_norm: None,
        ..Default::default()
    };
    match train_single_task(&config, &recipe, &task) {
        Err(ToyError::Divergence { step, .. }) => assert!(step < 20 * 3 / 4 + 1),
        Err(ToyError::BadInstance { .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn accumulation_keeps_parameters_and_is_repeatable() {
    let config = small_config(9);
    let task = generate_task(&spec("acc", Objective::Classification, Some(2), "overlap", 30), 16, 8).unwrap();
    let recipe = TrainRecipe::default();
    let (model, _) = train_single_task(&config, &recipe, &task).unwrap();
    let before = model.checksum();
    let a = accumulate_task_gradients(&model, &task, &recipe).unwrap();
    let b = accumulate_task_gradients(&model, &task, &recipe).unwrap();
    let pack = accumulate_instance_gradients(&model, &task).unwrap();
    assert_eq!(model.checksum(), before);
    assert_eq!(a, b);
    assert_eq!(a.dims(), (2, 2));
    assert_eq!(pack.len(), 30);
    let ids: std::collections::BTreeSet<_> = pack.instance_ids.iter().collect();
    assert_eq!(ids.len(), 30);

    let two = TrainRecipe {
        accumulation_passes: 2,
        ..recipe
    };
    let doubled = accumulate_task_gradients(&model, &task, &two).unwrap();
    for (x, y) in doubled.values.as_slice().iter().zip(a.values.as_slice()) {
        assert!((x - 2.0 * y).abs() <= 1e-12 * x.abs());
    }
}

#[test]
fn duplicate_instances_get_identical_blocks() {
    let config = small_config(3);
    let mut task = generate_task(&spec("dup", Objective::Regression, None, "lexicon", 4), 16, 8).unwrap();
    let mut copy = task.instances[0].clone();
    copy.id = "dup-copy".into();
    task.instances.push(copy);
    let model = Model::for_dataset(&config, &task).unwrap();
    let pack = accumulate_instance_gradients(&model, &task).unwrap();
    assert_eq!(pack.blocks[0], pack.blocks[4]);
}

#[test]
fn empty_task_cannot_be_accumulated() {
    let config = small_config(3);
    let task = TaskDataset {
        task_id: "e".into(),
        objective: Objective::Regression,
        out_dim: 1,
        instances: vec![],
    };
    let model = Model::for_dataset(&config, &task).unwrap();
    assert!(matches!(
        accumulate_task_gradients(&model, &task, &TrainRecipe::default()),
        Err(ToyError::Rank(_))
    ));
    assert!(accumulate_instance_gradients(&model, &task).is_err());
}

#[test]
fn mismatched_task_is_rejected() {
    let config = small_config(3);
    let task = generate_task(&spec("m", Objective::Regression, None, "lexicon", 4), 16, 8).unwrap();
    let other = Model::new(&config, &[("m".into(), Objective::Classification, 2)]).unwrap();
    assert!(matches!(
        accumulate_task_gradients(&other, &task, &TrainRecipe::default()),
        Err(ToyError::HeadMismatch { .. })
    ));
    let wide = generate_task(&spec("m", Objective::Regression, None, "lexicon", 4), 64, 16).unwrap();
    let model = Model::for_dataset(&config, &wide).unwrap();
    assert!(accumulate_task_gradients(&model, &wide, &TrainRecipe::default()).is_err());
}

#[test]
fn instance_tensors_sum_to_unit_batch_task_tensor() {
    let config = small_config(12);
    let task = generate_task(&spec("add", Objective::Classification, Some(3), "lexicon", 25), 16, 8).unwrap();
    let (model, _) = train_single_task(&config, &TrainRecipe::default(), &task).unwrap();
    let unit = TrainRecipe {
        batch_size: 1,
        ..Default::default()
    };
    let total = accumulate_task_gradients(&model, &task, &unit).unwrap();
    let pack = accumulate_instance_gradients(&model, &task).unwrap();
    for cell in 0..total.values.len() {
        let s: f64 = pack.blocks.iter().map(|b| b.as_slice()[cell]).sum();
        let t = total.values.as_slice()[cell];
        assert!((s - t).abs() <= 1e-6 * t.abs(), "cell {cell}: {s} vs {t}");
    }
}

fn evaluator(train_size: usize) -> ToyEvaluator {
    let config = ToyModelConfig::default();
    let mut specs = planted_suite_specs(1, train_size);
    specs.retain(|s| s.task_id.starts_with("lex"));
    let suite = gen_synthetic_suite(&specs, config.vocab_size, config.max_len).unwrap();
    ToyEvaluator::new(suite.datasets, config, TrainRecipe::default())
}

#[test]
fn empty_or_zero_fraction_aux_equals_single_task() {
    let ev = evaluator(60);
    let none = BTreeMap::new();
    let single = ev.mtl_evaluate("lex_cls2", &[], &none, 3).unwrap();
    let aux = vec!["lex_cls3".to_owned(), "lex_sl".to_owned()];
    let zero: BTreeMap<String, f64> = aux.iter().map(|t| (t.clone(), 0.0)).collect();
    assert_eq!(
        ev.mtl_evaluate("lex_cls2", &aux, &zero, 3).unwrap().to_bits(),
        single.to_bits()
    );
    assert_eq!(
        ev.mtl_evaluate("lex_cls2", &[], &none, 3).unwrap().to_bits(),
        single.to_bits()
    );
    let with = ev.mtl_evaluate("lex_cls2", &aux, &none, 3).unwrap();
    assert!((0.0..=1.0).contains(&with));
}

#[test]
fn evaluator_rejects_bad_requests() {
    let ev = evaluator(20);
    let none = BTreeMap::new();
    assert!(matches!(
        ev.mtl_evaluate("nope", &[], &none, 0),
        Err(ToyError::UnknownTask(_))
    ));
    let own = vec!["lex_cls2".to_owned()];
    assert!(ev.mtl_evaluate("lex_cls2", &own, &none, 0).is_err());
    let bad: BTreeMap<String, f64> = [("lex_sl".to_owned(), 1.5)].into();
    assert!(ev.mtl_evaluate("lex_cls2", &["lex_sl".to_owned()], &bad, 0).is_err());
}

#[test]
fn kept_ids_override_fraction() {
    let mut ev = evaluator(30);
    let ids: Vec<String> = ev.datasets["lex_sl"]
        .instances
        .iter()
        .skip(10)
        .take(5)
        .map(|i| i.id.clone())
        .collect();
    ev.kept_ids.insert("lex_sl".into(), ids.clone());
    let kept = ev.effective_aux("lex_sl", 0.9).unwrap();
    assert_eq!(kept.iter().map(|i| i.id.clone()).collect::<Vec<_>>(), ids);
}

#[test]
fn same_group_auxiliary_helps_a_small_primary() {
    let config = ToyModelConfig::default();
    let mut wins = Vec::new();
    for seed in 0..10u64 {
        let mut specs = planted_suite_specs(seed, 400);
        specs.retain(|s| s.task_id == "lex_cls2" || s.task_id == "lex_cls3");
        specs[0].train_size = 60;
        let suite = gen_synthetic_suite(&specs, config.vocab_size, config.max_len).unwrap();
        let ev = ToyEvaluator::new(suite.datasets, config.clone(), TrainRecipe::default());
        let none = BTreeMap::new();
        let single = ev.mtl_evaluate("lex_cls2", &[], &none, seed).unwrap();
        let joint = ev
            .mtl_evaluate("lex_cls2", &["lex_cls3".to_owned()], &none, seed)
            .unwrap();
        println!("seed {seed}: single {single:.3} joint {joint:.3}");
        wins.push(joint >= single);
    }
    let n = wins.iter().filter(|&&w| w).count();
    println!("same-group auxiliary helped in {n}/10 seeds (seeds 0..10)");
    assert!(n >= 8, "{wins:?}");
}

#[test]
fn gradient_struct_norm_and_scale() {
    let mut g = Gradient {
        encoder: vec![3.0],
        head: vec![4.0],
    };
    assert_eq!(g.norm(), 5.0);
    g.scale(0.5);
    assert_eq!(g.norm(), 2.5);
}
