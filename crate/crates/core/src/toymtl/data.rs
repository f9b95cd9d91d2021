//! Synthetic tasks with planted relatedness.
//!
//! A task draws its inputs and labels from a labeling rule. The rule's hidden
//! structure (which tokens are positive, which token pairs match) is fixed by
//! `(generator_rule_id, relatedness_group)`, so two tasks in the same group
//! label shared inputs identically, while the task seed only controls which
//! inputs get sampled.
//!
//! Token `0` is the separator; content tokens are `1..vocab_size`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::derive_seed;
use super::ToyError;
use crate::gradstore::{Objective, TaskMeta};

pub const SEP: u32 = 0;
/// Tag count for sequence labeling: neutral, positive, negative.
pub const SL_TAGS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Single sentence; the latent is the balance of positive and negative
    /// lexicon tokens.
    Lexicon,
    /// Sentence pair `a SEP b`; the latent is the share of `b` tokens that
    /// match some `a` token under a hidden permutation.
    Overlap,
    /// Every label is the same (class 0, target 0, tag 0).
    Constant,
}

impl LabelRule {
    pub fn parse(id: &str) -> Option<Self> {
        match id {
            "lexicon" => Some(Self::Lexicon),
            "overlap" => Some(Self::Overlap),
            "constant" => Some(Self::Constant),
            _ => None,
        }
    }

    pub fn type_tag(self) -> &'static str {
        match self {
            Self::Lexicon | Self::Constant => "single_sentence",
            Self::Overlap => "sentence_pair",
        }
    }
}

fn default_min_len() -> usize {
    4
}

fn default_max_len() -> usize {
    12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    pub objective: Objective,
    #[serde(default)]
    pub label_count: Option<usize>,
    pub generator_rule_id: String,
    pub relatedness_group: u32,
    pub train_size: usize,
    #[serde(default)]
    pub noise_rate: f64,
    pub seed: u64,
    /// Token count bounds per instance, separator included.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
    Tags(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<u32>,
    pub label: Label,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord<'a> {
    id: std::borrow::Cow<'a, str>,
    tokens: std::borrow::Cow<'a, [u32]>,
    label: std::borrow::Cow<'a, Label>,
    task_id: std::borrow::Cow<'a, str>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: String,
    pub objective: Objective,
    /// Output width of the task head: classes, 1, or tag count.
    pub out_dim: usize,
    pub instances: Vec<Instance>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        self.instances.iter().map(|i| i.tokens.len()).sum::<usize>() as f64 / self.instances.len() as f64
    }

    /// Checks that every instance fits a model and matches the objective.
    pub fn check(&self, vocab_size: usize, max_len: usize) -> Result<(), ToyError> {
        for inst in &self.instances {
            let bad = |reason: String| ToyError::BadInstance {
                task_id: self.task_id.clone(),
                instance_id: inst.id.clone(),
                reason,
            };
            if inst.tokens.is_empty() || inst.tokens.len() > max_len {
                return Err(bad(format!("length {} outside 1..={max_len}", inst.tokens.len())));
            }
            if let Some(t) = inst.tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(bad(format!("token {t} outside vocabulary of {vocab_size}")));
            }
            match (&inst.label, self.objective) {
                (Label::Class(c), Objective::Classification) if *c < self.out_dim => {}
                (Label::Value(v), Objective::Regression) if v.is_finite() => {}
                (Label::Tags(tags), Objective::SequenceLabeling)
                    if tags.len() == inst.tokens.len() && tags.iter().all(|&t| t < self.out_dim) => {}
                (label, objective) => return Err(bad(format!("label {label:?} does not fit a {objective:?} task"))),
            }
        }
        Ok(())
    }

    pub fn meta(&self, type_tag: &str) -> TaskMeta {
        TaskMeta {
            task_id: self.task_id.clone(),
            objective: self.objective,
            label_count: (self.objective == Objective::Classification).then_some(self.out_dim),
            train_size: self.instances.len(),
            avg_len: self.avg_len(),
            type_tag: type_tag.to_owned(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for inst in &self.instances {
            let rec = JsonlRecord {
                id: (&inst.id[..]).into(),
                tokens: (&inst.tokens[..]).into(),
                label: std::borrow::Cow::Borrowed(&inst.label),
                task_id: (&self.task_id[..]).into(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a dataset written by [`TaskDataset::write_jsonl`]. Objective and
    /// head width come from the task metadata.
    pub fn read_jsonl<R: BufRead>(r: R, meta: &TaskMeta) -> Result<Self, ToyError> {
        let mut instances = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| ToyError::Parse {
                what: format!("{} line {}", meta.task_id, n + 1),
                reason: e.to_string(),
            })?;
            if rec.task_id != meta.task_id {
                return Err(ToyError::Parse {
                    what: format!("{} line {}", meta.task_id, n + 1),
                    reason: format!("record belongs to task {:?}", rec.task_id),
                });
            }
            let label = match (rec.label.into_owned(), meta.objective) {
                // An integral regression target may deserialize as a class.
                (Label::Class(c), Objective::Regression) => Label::Value(c as f64),
                (l, _) => l,
            };
            instances.push(Instance {
                id: rec.id.into_owned(),
                tokens: rec.tokens.into_owned(),
                label,
            });
        }
        Ok(Self {
            task_id: meta.task_id.clone(),
            objective: meta.objective,
            out_dim: out_dim(meta.objective, meta.label_count),
            instances,
        })
    }

    /// Instances whose ids are in `keep`, in dataset order.
    pub fn filter_ids(&self, keep: &BTreeSet<&str>) -> Vec<&Instance> {
        self.instances.iter().filter(|i| keep.contains(i.id.as_str())).collect()
    }
}

pub fn out_dim(objective: Objective, label_count: Option<usize>) -> usize {
    match objective {
        Objective::Classification => label_count.unwrap_or(0),
        Objective::Regression => 1,
        Objective::SequenceLabeling => SL_TAGS,
    }
}

/// Hidden structure shared by every task of one `(rule, group)`.
struct RuleKey {
    positive: BTreeSet<u32>,
    negative: BTreeSet<u32>,
    /// `b` matches `a` when `inverse[b] == a`; `forward` is the inverse map.
    inverse: Vec<u32>,
    forward: Vec<u32>,
}

impl RuleKey {
    fn new(rule_id: &str, group: u32, vocab: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(u64::from(group), &format!("rule/{rule_id}")));
        let mut tokens: Vec<u32> = (1..vocab as u32).collect();
        tokens.shuffle(&mut rng);
        // Every content token carries polarity, so each instance is
        // evidence about the group's whole key.
        let share = (tokens.len() / 2).max(1);
        let positive = tokens[..share].iter().copied().collect();
        let negative = tokens[share..(2 * share).min(tokens.len())].iter().copied().collect();
        let mut perm: Vec<u32> = (1..vocab as u32).collect();
        perm.shuffle(&mut rng);
        let mut forward = vec![0; vocab];
        let mut inverse = vec![0; vocab];
        for (a, &b) in (1..vocab as u32).zip(&perm) {
            forward[a as usize] = b;
            inverse[b as usize] = a;
        }
        Self {
            positive,
            negative,
            inverse,
            forward,
        }
    }

    fn polarity(&self, t: u32) -> usize {
        if self.positive.contains(&t) {
            1
        } else if self.negative.contains(&t) {
            2
        } else {
            0
        }
    }
}

fn check_spec(spec: &SyntheticTaskSpec, vocab: usize) -> Result<LabelRule, ToyError> {
    let bad = |reason: &str| ToyError::InvalidSpec {
        task_id: spec.task_id.clone(),
        reason: reason.to_owned(),
    };
    crate::gradstore::validate_task_id(&spec.task_id).map_err(|e| bad(&e.to_string()))?;
    let rule = LabelRule::parse(&spec.generator_rule_id).ok_or_else(|| bad("unknown generator_rule_id"))?;
    match (spec.objective, spec.label_count) {
        (Objective::Classification, None) => return Err(bad("classification needs label_count")),
        (Objective::Classification, Some(k)) if k < 2 => return Err(bad("label_count must be at least 2")),
        (Objective::Classification, _) => {}
        (_, Some(_)) => return Err(bad("label_count only applies to classification")),
        (_, None) => {}
    }
    if !(0.0..=1.0).contains(&spec.noise_rate) {
        return Err(bad("noise_rate must be in [0, 1]"));
    }
    let floor = if rule == LabelRule::Overlap { 3 } else { 1 };
    if spec.min_len < floor || spec.min_len > spec.max_len {
        return Err(bad(
            "need a valid min_len..=max_len range (pairs need at least 3 tokens)",
        ));
    }
    if vocab < 3 {
        return Err(bad("vocabulary too small for synthetic rules"));
    }
    Ok(rule)
}

fn sample_input(
    rule: LabelRule,
    key: &RuleKey,
    spec: &SyntheticTaskSpec,
    vocab: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let content = |rng: &mut ChaCha8Rng| rng.random_range(1..vocab as u32);
    match rule {
        LabelRule::Constant | LabelRule::Lexicon => (0..len).map(|_| content(rng)).collect(),
        LabelRule::Overlap => {
            let la = rng.random_range(1..=len - 2);
            let lb = len - 1 - la;
            let a: Vec<u32> = (0..la).map(|_| content(rng)).collect();
            let mut tokens = a.clone();
            tokens.push(SEP);
            for _ in 0..lb {
                let t = if rng.random_bool(0.5) {
                    key.forward[a[rng.random_range(0..la)] as usize]
                } else {
                    content(rng)
                };
                tokens.push(t);
            }
            tokens
        }
    }
}

/// Per-token evidence in `[0, 1]` for the positive side, or `None` for
/// tokens the rule ignores, plus the per-token tag.
fn token_evidence(rule: LabelRule, key: &RuleKey, tokens: &[u32]) -> Vec<(Option<f64>, usize)> {
    match rule {
        LabelRule::Constant => tokens.iter().map(|_| (Some(0.0), 0)).collect(),
        LabelRule::Lexicon => tokens
            .iter()
            .map(|&t| match key.polarity(t) {
                1 => (Some(1.0), 1),
                2 => (Some(0.0), 2),
                _ => (Some(0.5), 0),
            })
            .collect(),
        LabelRule::Overlap => {
            let sep = tokens.iter().position(|&t| t == SEP).unwrap_or(tokens.len());
            let a: BTreeSet<u32> = tokens[..sep].iter().copied().collect();
            tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    if i <= sep {
                        (None, 0)
                    } else if a.contains(&key.inverse[t as usize]) {
                        (Some(1.0), 1)
                    } else {
                        (Some(0.0), 2)
                    }
                })
                .collect()
        }
    }
}

fn clean_label(rule: LabelRule, objective: Objective, k: usize, evidence: &[(Option<f64>, usize)]) -> Label {
    let scored: Vec<f64> = evidence.iter().filter_map(|e| e.0).collect();
    let latent = if rule == LabelRule::Constant || scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    match objective {
        Objective::Classification => Label::Class(((latent * k as f64) as usize).min(k - 1)),
        Objective::Regression => Label::Value(latent),
        Objective::SequenceLabeling => Label::Tags(evidence.iter().map(|e| e.1).collect()),
    }
}

fn random_label(objective: Objective, k: usize, len: usize, rng: &mut ChaCha8Rng) -> Label {
    match objective {
        Objective::Classification => Label::Class(rng.random_range(0..k)),
        Objective::Regression => Label::Value(rng.random::<f64>()),
        Objective::SequenceLabeling => Label::Tags((0..len).map(|_| rng.random_range(0..SL_TAGS)).collect()),
    }
}

/// Label an arbitrary input under a spec's rule, without noise.
pub fn rule_label(spec: &SyntheticTaskSpec, vocab_size: usize, tokens: &[u32]) -> Result<Label, ToyError> {
    let rule = check_spec(spec, vocab_size)?;
    let key = RuleKey::new(&spec.generator_rule_id, spec.relatedness_group, vocab_size);
    let k = out_dim(spec.objective, spec.label_count);
    Ok(clean_label(
        rule,
        spec.objective,
        k,
        &token_evidence(rule, &key, tokens),
    ))
}

/// Checks a spec against the model's vocabulary and length limit.
pub fn validate_spec(spec: &SyntheticTaskSpec, vocab_size: usize, max_len: usize) -> Result<LabelRule, ToyError> {
    let rule = check_spec(spec, vocab_size)?;
    if spec.max_len > max_len {
        return Err(ToyError::InvalidSpec {
            task_id: spec.task_id.clone(),
            reason: format!("max_len {} exceeds the model's {max_len}", spec.max_len),
        });
    }
    Ok(rule)
}

pub fn generate_task(spec: &SyntheticTaskSpec, vocab_size: usize, max_len: usize) -> Result<TaskDataset, ToyError> {
    let rule = validate_spec(spec, vocab_size, max_len)?;
    let key = RuleKey::new(&spec.generator_rule_id, spec.relatedness_group, vocab_size);
    let k = out_dim(spec.objective, spec.label_count);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("data/{}", spec.task_id)));
    let width = spec.train_size.saturating_sub(1).to_string().len();
    let instances = (0..spec.train_size)
        .map(|i| {
            let tokens = sample_input(rule, &key, spec, vocab_size, &mut rng);
            let noisy = spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate);
            let label = if noisy {
                random_label(spec.objective, k, tokens.len(), &mut rng)
            } else {
                clean_label(rule, spec.objective, k, &token_evidence(rule, &key, &tokens))
            };
            Instance {
                id: format!("{}-{:0width$}", spec.task_id, i),
                tokens,
                label,
            }
        })
        .collect();
    Ok(TaskDataset {
        task_id: spec.task_id.clone(),
        objective: spec.objective,
        out_dim: k,
        instances,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub datasets: BTreeMap<String, TaskDataset>,
    pub metas: Vec<TaskMeta>,
}

/// Generates every task. Metadata reflects the generated sizes and lengths.
pub fn gen_synthetic_suite(specs: &[SyntheticTaskSpec], vocab_size: usize, max_len: usize) -> Result<Suite, ToyError> {
    let mut datasets = BTreeMap::new();
    let mut metas = Vec::with_capacity(specs.len());
    for spec in specs {
        if datasets.contains_key(&spec.task_id) {
            return Err(ToyError::DuplicateTask(spec.task_id.clone()));
        }
        let rule = check_spec(spec, vocab_size)?;
        let ds = generate_task(spec, vocab_size, max_len)?;
        metas.push(ds.meta(rule.type_tag()));
        datasets.insert(spec.task_id.clone(), ds);
    }
    Ok(Suite { datasets, metas })
}

/// Six tasks in two relatedness groups. Both groups use the lexicon rule,
/// each with its own hidden polarity key: group 0 has two classification
/// tasks and one sequence labeling task, group 1 two classification tasks
/// and one regression task.
pub fn planted_suite_specs(seed: u64, train_size: usize) -> Vec<SyntheticTaskSpec> {
    let spec = |id: &str, objective, label_count, rule: &str, group| SyntheticTaskSpec {
        task_id: id.to_owned(),
        objective,
        label_count,
        generator_rule_id: rule.to_owned(),
        relatedness_group: group,
        train_size,
        noise_rate: 0.0,
        seed: derive_seed(seed, id),
        min_len: 6,
        max_len: 12,
    };
    vec![
        spec("lex_cls2", Objective::Classification, Some(2), "lexicon", 0),
        spec("lex_cls3", Objective::Classification, Some(3), "lexicon", 0),
        spec("lex_sl", Objective::SequenceLabeling, None, "lexicon", 0),
        spec("lexb_cls2", Objective::Classification, Some(2), "lexicon", 1),
        spec("lexb_cls4", Objective::Classification, Some(4), "lexicon", 1),
        spec("lexb_rgr", Objective::Regression, None, "lexicon", 1),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(id: &str, group: u32, noise: f64, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task_id: id.into(),
            objective: Objective::Classification,
            label_count: Some(2),
            generator_rule_id: "lexicon".into(),
            relatedness_group: group,
            train_size: 200,
            noise_rate: noise,
            seed,
            min_len: 4,
            max_len: 12,
        }
    }

    #[test]
    fn same_group_labels_shared_inputs_alike() {
        let a = lex("a", 3, 0.0, 1);
        let b = lex("b", 3, 0.0, 2);
        let ds = generate_task(&a, 64, 16).unwrap();
        for inst in &ds.instances {
            assert_eq!(rule_label(&b, 64, &inst.tokens).unwrap(), inst.label);
        }
        let other = lex("c", 4, 0.0, 1);
        let disagreements = ds
            .instances
            .iter()
            .filter(|i| rule_label(&other, 64, &i.tokens).unwrap() != i.label)
            .count();
        assert!(disagreements > 20, "{disagreements}");
    }

    #[test]
    fn full_noise_decouples_labels() {
        let spec = lex("n", 0, 1.0, 9);
        let ds = generate_task(&spec, 64, 16).unwrap();
        let agree = ds
            .instances
            .iter()
            .filter(|i| rule_label(&spec, 64, &i.tokens).unwrap() == i.label)
            .count();
        // Chance agreement for two classes is about half.
        assert!((60..140).contains(&agree), "{agree}");
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = lex("r", 0, 0.3, 5);
        assert_eq!(
            generate_task(&spec, 64, 16).unwrap(),
            generate_task(&spec, 64, 16).unwrap()
        );
    }

    #[test]
    fn planted_suite_objective_counts() {
        let suite = gen_synthetic_suite(&planted_suite_specs(0, 50), 64, 16).unwrap();
        let count = |o| suite.metas.iter().filter(|m| m.objective == o).count();
        assert_eq!(count(Objective::Classification), 4);
        assert_eq!(count(Objective::Regression), 1);
        assert_eq!(count(Objective::SequenceLabeling), 1);
        for m in &suite.metas {
            assert_eq!(m.train_size, 50);
            assert!(m.avg_len >= 6.0 && m.avg_len <= 12.0);
            m.check().unwrap();
            suite.datasets[&m.task_id].check(64, 16).unwrap();
        }
    }

    #[test]
    fn overlap_pairs_have_one_separator() {
        let mut spec = lex("o", 1, 0.0, 3);
        spec.generator_rule_id = "overlap".into();
        spec.objective = Objective::Regression;
        spec.label_count = None;
        let ds = generate_task(&spec, 64, 16).unwrap();
        let mut positive = 0;
        for inst in &ds.instances {
            assert_eq!(inst.tokens.iter().filter(|&&t| t == SEP).count(), 1);
            let Label::Value(v) = inst.label else { panic!() };
            assert!((0.0..=1.0).contains(&v));
            positive += usize::from(v > 0.0);
        }
        assert!(positive > 100);
    }

    #[test]
    fn invalid_specs() {
        let mut s = lex("x", 0, 0.0, 0);
        s.label_count = None;
        assert!(matches!(generate_task(&s, 64, 16), Err(ToyError::InvalidSpec { .. })));
        let mut s = lex("x", 0, 0.0, 0);
        s.generator_rule_id = "nope".into();
        assert!(generate_task(&s, 64, 16).is_err());
        let mut s = lex("x", 0, 1.5, 0);
        assert!(generate_task(&s, 64, 16).is_err());
        s.noise_rate = 0.0;
        s.max_len = 20;
        assert!(generate_task(&s, 64, 16).is_err());
        let dup = vec![lex("d", 0, 0.0, 0), lex("d", 1, 0.0, 1)];
        assert!(matches!(
            gen_synthetic_suite(&dup, 64, 16),
            Err(ToyError::DuplicateTask(_))
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        for spec in planted_suite_specs(2, 20) {
            let ds = generate_task(&spec, 64, 16).unwrap();
            let mut buf = Vec::new();
            ds.write_jsonl(&mut buf).unwrap();
            let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap().to_owned();
            assert!(first.contains("\"task_id\""), "{first}");
            let back = TaskDataset::read_jsonl(&buf[..], &ds.meta("t")).unwrap();
            assert_eq!(back, ds);
        }
    }
}
