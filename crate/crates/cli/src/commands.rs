use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use gradts_core::correlator::{format_full_precision, TaskCorrelationMatrix};
use gradts_core::gradstore::{validate_store, GradStore, TaskMeta};
use gradts_core::ranker::HeadImportanceMatrix;
use gradts_core::selector::{heuristic_select, select_all, HeuristicMode};
use gradts_core::toymtl::{
    accumulate_instance_gradients, accumulate_task_gradients, gen_synthetic_suite, train_single_task,
    SyntheticTaskSpec, ToyEvaluator,
};
use gradts_core::{
    correlation_matrix, flatten_ranking, normalize, rank_auxiliaries, select_threshold, select_trial,
    subsample_instances, HeadRankingVector, SelectionReport, Strategy,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    load_model, read_dataset, read_datasets, read_json, save_model, write_csv, write_dataset, write_json, Layout,
};
use crate::config::{Needs, RunConfig};
use crate::error::{CliError, Result};
use crate::{Command, StrategyArg};

impl StrategyArg {
    pub fn strategy(self) -> Strategy {
        match self {
            StrategyArg::Trial => Strategy::Trial,
            StrategyArg::Thres => Strategy::Threshold,
            StrategyArg::Fg => Strategy::FineGrained,
            StrategyArg::HeuSize => Strategy::HeuSize,
            StrategyArg::HeuType => Strategy::HeuType,
            StrategyArg::HeuLen => Strategy::HeuLen,
            StrategyArg::NoSel => Strategy::NoSel,
        }
    }
}

struct Ctx<'a> {
    config: &'a RunConfig,
    hash: String,
    layout: Layout,
}

impl Ctx<'_> {
    fn store(&self) -> Result<GradStore> {
        Ok(GradStore::open(&self.config.store_root)?)
    }

    fn primary(&self) -> &str {
        self.config.primary.as_deref().expect("validated: primary present")
    }

    fn evaluator(&self, store: &GradStore) -> Result<ToyEvaluator> {
        let datasets = read_datasets(&self.layout, &store.manifest().tasks)?;
        Ok(ToyEvaluator::new(
            datasets,
            self.config.model.clone(),
            self.config.recipe.clone(),
        ))
    }
}

pub fn dispatch(config: &RunConfig, command: &Command) -> Result<Vec<String>> {
    let needs = match command {
        Command::Gen => Needs::default(),
        Command::Select { .. } | Command::Evaluate { .. } => Needs {
            primary: true,
            store: true,
        },
        _ => Needs {
            primary: false,
            store: true,
        },
    };
    config.validate(needs)?;
    let ctx = Ctx {
        config,
        hash: config.config_hash(),
        layout: Layout::new(&config.output_dir),
    };
    match command {
        Command::Gen => gen(&ctx),
        Command::Warmup { tasks } => warmup(&ctx, tasks),
        Command::Grad { tasks } => grad(&ctx, tasks, false),
        Command::GradInstances { tasks } => grad(&ctx, tasks, true),
        Command::Rank { tasks } => rank(&ctx, tasks),
        Command::Correlate => correlate(&ctx),
        Command::Select { strategy, tau } => select(&ctx, *strategy, *tau),
        Command::Evaluate { aux, strategy } => evaluate(&ctx, aux, *strategy),
        Command::Report => report(&ctx),
        Command::ValidateStore => validate(&ctx),
    }
}

fn shown(p: PathBuf) -> String {
    p.display().to_string()
}

/// Manifest entries for `requested`, or all of them when it is empty.
fn chosen_metas(store: &GradStore, requested: &[String]) -> Result<Vec<TaskMeta>> {
    let metas = &store.manifest().tasks;
    if requested.is_empty() {
        return Ok(metas.clone());
    }
    requested
        .iter()
        .map(|t| {
            store
                .manifest()
                .task_meta(t)
                .cloned()
                .ok_or_else(|| CliError::Artifact(format!("task {t:?} is not in the store manifest")))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SuiteFile {
    tasks: Vec<SyntheticTaskSpec>,
}

fn gen(ctx: &Ctx) -> Result<Vec<String>> {
    let specs = ctx.config.task_specs();
    let model = &ctx.config.model;
    let suite = gen_synthetic_suite(&specs, model.vocab_size, model.max_len)?;
    let mut store = GradStore::open_or_create(&ctx.config.store_root)?;
    let mut out = Vec::new();
    for ds in suite.datasets.values() {
        write_dataset(&ctx.layout, ds)?;
        out.push(shown(ctx.layout.dataset(&ds.task_id)));
    }
    for meta in suite.metas {
        store.upsert_task_meta(meta)?;
    }
    write_json(&ctx.layout.suite(), &ctx.hash, &SuiteFile { tasks: specs })?;
    out.push(shown(ctx.layout.suite()));
    Ok(out)
}

fn warmup(ctx: &Ctx, tasks: &[String]) -> Result<Vec<String>> {
    let store = ctx.store()?;
    let mut out = Vec::new();
    for meta in chosen_metas(&store, tasks)? {
        let ds = read_dataset(&ctx.layout, &meta)?;
        let (model, summary) = train_single_task(&ctx.config.model, &ctx.config.recipe, &ds)?;
        save_model(&ctx.layout, &ctx.hash, &model, &meta.task_id, summary)?;
        out.push(shown(ctx.layout.model_meta(&meta.task_id)));
    }
    Ok(out)
}

fn grad(ctx: &Ctx, tasks: &[String], per_instance: bool) -> Result<Vec<String>> {
    let mut store = ctx.store()?;
    let mut out = Vec::new();
    for meta in chosen_metas(&store, tasks)? {
        let ds = read_dataset(&ctx.layout, &meta)?;
        let model = load_model(&ctx.layout, &meta.task_id)?;
        let before = model.checksum();
        let path = if per_instance {
            let pack = accumulate_instance_gradients(&model, &ds)?;
            store.write_instance_pack(&pack)?
        } else {
            let tensor = accumulate_task_gradients(&model, &ds, &ctx.config.recipe)?;
            store.write_tensor(&tensor)?
        };
        if model.checksum() != before {
            return Err(CliError::Artifact(format!(
                "accumulation changed the parameters of {}",
                meta.task_id
            )));
        }
        out.push(shown(path));
    }
    Ok(out)
}

fn importance(store: &GradStore, task_id: &str) -> Result<HeadImportanceMatrix> {
    Ok(normalize(&store.read_task_tensor(task_id)?))
}

fn correlation(store: &GradStore) -> Result<TaskCorrelationMatrix> {
    let matrices = store
        .tensor_task_ids()
        .iter()
        .map(|t| importance(store, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(correlation_matrix(&matrices)?.sorted())
}

#[derive(Serialize, Deserialize)]
struct ImportanceFile {
    importance: HeadImportanceMatrix,
    ranking: HeadRankingVector,
}

fn rank(ctx: &Ctx, tasks: &[String]) -> Result<Vec<String>> {
    let store = ctx.store()?;
    let ids = if tasks.is_empty() {
        store.tensor_task_ids()
    } else {
        tasks.to_vec()
    };
    let mut out = Vec::new();
    for id in ids {
        let m = importance(&store, &id)?;
        let csv_path = ctx.layout.importance(&id, "csv");
        write_csv(&csv_path, &ctx.hash, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            let mut header = vec!["layer".to_owned()];
            header.extend((0..m.values.heads()).map(|h| format!("head_{h}")));
            w.write_record(&header)?;
            for (l, row) in m.values.rows().enumerate() {
                let mut rec = vec![l.to_string()];
                rec.extend(row.iter().map(|&v| format_full_precision(v)));
                w.write_record(&rec)?;
            }
            w.flush().map_err(csv::Error::from)?;
            Ok(())
        })?;
        let ranking = flatten_ranking(&m);
        let json_path = ctx.layout.importance(&id, "json");
        write_json(&json_path, &ctx.hash, &ImportanceFile { importance: m, ranking })?;
        out.push(shown(json_path));
        out.push(shown(csv_path));
    }
    Ok(out)
}

fn correlate(ctx: &Ctx) -> Result<Vec<String>> {
    let corr = correlation(&ctx.store()?)?;
    let csv_path = ctx.layout.correlation("csv");
    write_csv(&csv_path, &ctx.hash, |buf| Ok(corr.write_csv(buf)?))?;
    let json_path = ctx.layout.correlation("json");
    write_json(&json_path, &ctx.hash, &corr)?;
    Ok(vec![shown(json_path), shown(csv_path)])
}

#[derive(Serialize, Deserialize)]
struct KeptIdsFile {
    primary: String,
    kept_ids: BTreeMap<String, Vec<String>>,
}

fn select(ctx: &Ctx, strategy: StrategyArg, tau: Option<f64>) -> Result<Vec<String>> {
    let store = ctx.store()?;
    let primary = ctx.primary();
    let seed = ctx.config.seed;
    let trial = |store: &GradStore| -> Result<SelectionReport> {
        let ranked: Vec<String> = rank_auxiliaries(&correlation(store)?, primary)?
            .into_iter()
            .map(|r| r.task_id)
            .collect();
        Ok(select_trial(primary, &ranked, &mut ctx.evaluator(store)?, seed)?)
    };
    let heuristic = |mode| -> Result<SelectionReport> {
        let metas = &store.manifest().tasks;
        Ok(heuristic_select(
            primary,
            metas,
            mode,
            &mut ctx.evaluator(&store)?,
            seed,
        )?)
    };
    let mut kept_ids = None;
    let report = match strategy {
        StrategyArg::Trial => trial(&store)?,
        StrategyArg::Thres => {
            select_threshold(primary, &correlation(&store)?, tau.unwrap_or(ctx.config.tau_star_thres))?
        }
        StrategyArg::Fg => {
            let base = trial(&store)?;
            let fg = subsample_instances(
                &importance(&store, primary)?,
                &base,
                &store,
                tau.unwrap_or(ctx.config.tau_star_fg),
            )?;
            kept_ids = Some(fg.kept_ids);
            fg.report
        }
        StrategyArg::HeuSize => heuristic(HeuristicMode::Size)?,
        StrategyArg::HeuType => heuristic(HeuristicMode::Type)?,
        StrategyArg::HeuLen => heuristic(HeuristicMode::Len)?,
        StrategyArg::NoSel => {
            let others: Vec<String> = store
                .manifest()
                .tasks
                .iter()
                .map(|m| m.task_id.clone())
                .filter(|t| t != primary)
                .collect();
            if store.manifest().task_meta(primary).is_none() {
                return Err(CliError::Artifact(format!(
                    "task {primary:?} is not in the store manifest"
                )));
            }
            select_all(primary, &others, &mut ctx.evaluator(&store)?, seed)?
        }
    };
    let name = report.strategy.as_str();
    let path = ctx.layout.selection(primary, name);
    write_json(&path, &ctx.hash, &report)?;
    let mut out = Vec::new();
    if let Some(kept_ids) = kept_ids {
        let side = ctx.layout.kept_ids(primary, name);
        write_json(
            &side,
            &ctx.hash,
            &KeptIdsFile {
                primary: primary.to_owned(),
                kept_ids,
            },
        )?;
        out.push(shown(side));
    }
    out.insert(0, shown(path));
    out.push(serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct EvaluationFile {
    primary: String,
    aux: Vec<String>,
    kept_fraction: BTreeMap<String, f64>,
    seed: u64,
    score: f64,
}

fn evaluate(ctx: &Ctx, aux: &[String], strategy: Option<StrategyArg>) -> Result<Vec<String>> {
    let store = ctx.store()?;
    let primary = ctx.primary();
    let mut ev = ctx.evaluator(&store)?;
    let (label, aux, kept_fraction) = match strategy {
        Some(s) => {
            let name = s.strategy().as_str();
            let report: SelectionReport = read_json(&ctx.layout.selection(primary, name))?.body;
            if s == StrategyArg::Fg {
                let side: KeptIdsFile = read_json(&ctx.layout.kept_ids(primary, name))?.body;
                ev.kept_ids = side.kept_ids;
            }
            (name.to_owned(), report.chosen, report.kept_fraction)
        }
        None => {
            let label = if aux.is_empty() {
                "single".to_owned()
            } else {
                aux.join("+")
            };
            (label, aux.to_vec(), BTreeMap::new())
        }
    };
    for t in std::iter::once(primary).chain(aux.iter().map(String::as_str)) {
        if !ev.datasets.contains_key(t) {
            return Err(CliError::Artifact(format!("task {t:?} is not in the store manifest")));
        }
    }
    let score = ev
        .mtl_evaluate(primary, &aux, &kept_fraction, ctx.config.seed)
        .map_err(CliError::Evaluation)?;
    let path = ctx.layout.evaluation(primary, &label);
    write_json(
        &path,
        &ctx.hash,
        &EvaluationFile {
            primary: primary.to_owned(),
            aux,
            kept_fraction,
            seed: ctx.config.seed,
            score,
        },
    )?;
    Ok(vec![shown(path), format!("score {}", format_full_precision(score))])
}

#[derive(Serialize, Deserialize)]
struct SummaryRow {
    primary: String,
    strategy: Strategy,
    chosen: Vec<String>,
    kept_fraction: BTreeMap<String, f64>,
    threshold_used: Option<f64>,
    chosen_score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct SummaryFile {
    selections: Vec<SummaryRow>,
}

/// Every saved selection report, by strategy then primary.
fn saved_reports(layout: &Layout) -> Result<Vec<SelectionReport>> {
    let dir = layout.selection_dir();
    let mut paths = Vec::new();
    let read = |p: &std::path::Path| {
        std::fs::read_dir(p).map_err(|source| CliError::Read {
            path: p.to_owned(),
            source,
        })
    };
    if dir.is_dir() {
        for primary in read(&dir)? {
            let primary = primary.map_err(|source| CliError::Read {
                path: dir.clone(),
                source,
            })?;
            if !primary.path().is_dir() {
                continue;
            }
            for f in read(&primary.path())? {
                let f = f.map_err(|source| CliError::Read {
                    path: primary.path(),
                    source,
                })?;
                let name = f.file_name().to_string_lossy().into_owned();
                if name.ends_with(".json") && !name.ends_with(".kept_ids.json") {
                    paths.push(f.path());
                }
            }
        }
    }
    let mut reports = paths
        .iter()
        .map(|p| Ok(read_json::<SelectionReport>(p)?.body))
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| a.strategy.cmp(&b.strategy).then_with(|| a.primary.cmp(&b.primary)));
    Ok(reports)
}

fn report(ctx: &Ctx) -> Result<Vec<String>> {
    let store = ctx.store()?;
    let mut tasks: Vec<String> = store.manifest().tasks.iter().map(|m| m.task_id.clone()).collect();
    tasks.sort();
    let reports = saved_reports(&ctx.layout)?;
    let mut out = Vec::new();
    let mut by_strategy: BTreeMap<Strategy, Vec<&SelectionReport>> = BTreeMap::new();
    for r in &reports {
        by_strategy.entry(r.strategy).or_default().push(r);
    }
    for (strategy, rows) in &by_strategy {
        let path = ctx.layout.report(&format!("{}.csv", strategy.as_str()));
        write_csv(&path, &ctx.hash, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            let mut header = vec!["primary".to_owned()];
            header.extend(tasks.iter().cloned());
            w.write_record(&header)?;
            for r in rows {
                let mut rec = vec![r.primary.clone()];
                // The primary's own cell stays empty; unselected tasks are 0.
                rec.extend(tasks.iter().map(|t| {
                    if *t == r.primary {
                        String::new()
                    } else {
                        format_full_precision(r.kept_fraction.get(t).copied().unwrap_or(0.0))
                    }
                }));
                w.write_record(&rec)?;
            }
            w.flush().map_err(csv::Error::from)?;
            Ok(())
        })?;
        out.push(shown(path));
    }
    let summary = SummaryFile {
        selections: reports
            .iter()
            .map(|r| SummaryRow {
                primary: r.primary.clone(),
                strategy: r.strategy,
                chosen: r.chosen.clone(),
                kept_fraction: r.kept_fraction.clone(),
                threshold_used: r.threshold_used,
                chosen_score: r.chosen_score(),
            })
            .collect(),
    };
    let path = ctx.layout.report("summary.json");
    write_json(&path, &ctx.hash, &summary)?;
    out.insert(0, shown(path));
    Ok(out)
}

fn validate(ctx: &Ctx) -> Result<Vec<String>> {
    let findings = validate_store(&ctx.config.store_root)?;
    let _ = writeln!(std::io::stdout(), "{}", serde_json::json!({ "findings": findings }));
    if findings.is_empty() {
        Ok(Vec::new())
    } else {
        Err(CliError::InvalidStore(findings.len()))
    }
}
