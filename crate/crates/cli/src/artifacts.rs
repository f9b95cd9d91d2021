//! On-disk layout under `output_dir`:
//!
//! ```text
//! data/<task>.jsonl            generated datasets
//! data/suite.json              the specs they came from
//! models/<task>.json, .f64     warmed-up model: metadata, raw LE f64 params
//! importance/<task>.json, .csv normalized head importance
//! correlation.json, .csv       task-by-task tau
//! selection/<primary>/<strategy>.json (+ .kept_ids.json for fine_grained)
//! evaluation/<primary>/<label>.json
//! report/summary.json, report/<strategy>.csv
//! ```
//!
//! Every JSON artifact carries `config_hash`; every CSV starts with a
//! `# config_hash: <hex>` line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use gradts_core::gradstore::{Objective, TaskMeta};
use gradts_core::toymtl::{Model, TaskDataset, ToyModelConfig, TrainSummary};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_owned(),
            source,
        })?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_owned(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, config_hash: &str, body: &T) -> Result<()> {
    let stamped = Stamped {
        config_hash: config_hash.to_owned(),
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&stamped).map_err(|source| CliError::Json {
        path: path.to_owned(),
        source,
    })?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>> {
    let bytes = fs::read(path).map_err(|source| CliError::Read {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: path.to_owned(),
        source,
    })
}

/// CSV text with the hash line in front.
pub fn write_csv(path: &Path, config_hash: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = format!("# config_hash: {config_hash}\n").into_bytes();
    fill(&mut buf)?;
    write_bytes(path, &buf)
}

/// Paths of every artifact kind.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self, task_id: &str) -> PathBuf {
        self.root.join("data").join(format!("{task_id}.jsonl"))
    }

    pub fn suite(&self) -> PathBuf {
        self.root.join("data").join("suite.json")
    }

    pub fn model_meta(&self, task_id: &str) -> PathBuf {
        self.root.join("models").join(format!("{task_id}.json"))
    }

    pub fn model_params(&self, task_id: &str) -> PathBuf {
        self.root.join("models").join(format!("{task_id}.f64"))
    }

    pub fn importance(&self, task_id: &str, ext: &str) -> PathBuf {
        self.root.join("importance").join(format!("{task_id}.{ext}"))
    }

    pub fn correlation(&self, ext: &str) -> PathBuf {
        self.root.join(format!("correlation.{ext}"))
    }

    pub fn selection_dir(&self) -> PathBuf {
        self.root.join("selection")
    }

    pub fn selection(&self, primary: &str, strategy: &str) -> PathBuf {
        self.selection_dir().join(primary).join(format!("{strategy}.json"))
    }

    pub fn kept_ids(&self, primary: &str, strategy: &str) -> PathBuf {
        self.selection_dir()
            .join(primary)
            .join(format!("{strategy}.kept_ids.json"))
    }

    pub fn evaluation(&self, primary: &str, label: &str) -> PathBuf {
        self.root.join("evaluation").join(primary).join(format!("{label}.json"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("report").join(name)
    }
}

/// Sidecar of a saved model; parameters live next to it as raw f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub task_id: String,
    pub objective: Objective,
    pub out_dim: usize,
    pub model: ToyModelConfig,
    pub encoder_len: usize,
    pub head_len: usize,
    /// [`Model::checksum`] at save time.
    pub checksum: String,
    pub warmup: TrainSummary,
}

pub fn save_model(
    layout: &Layout,
    config_hash: &str,
    model: &Model,
    task_id: &str,
    warmup: TrainSummary,
) -> Result<()> {
    let head = model.head(task_id)?;
    let mut raw = Vec::with_capacity(8 * (model.encoder.len() + head.params.len()));
    for v in model.encoder.iter().chain(&head.params) {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(&layout.model_params(task_id), &raw)?;
    let meta = ModelMeta {
        task_id: task_id.to_owned(),
        objective: head.objective,
        out_dim: head.out_dim,
        model: model.config.clone(),
        encoder_len: model.encoder.len(),
        head_len: head.params.len(),
        checksum: model.checksum(),
        warmup,
    };
    write_json(&layout.model_meta(task_id), config_hash, &meta)
}

/// Loads a saved model and checks its checksum.
pub fn load_model(layout: &Layout, task_id: &str) -> Result<Model> {
    let meta: ModelMeta = read_json(&layout.model_meta(task_id))?.body;
    let path = layout.model_params(task_id);
    let raw = fs::read(&path).map_err(|source| CliError::Read {
        path: path.clone(),
        source,
    })?;
    let mut model = Model::new(&meta.model, &[(task_id.to_owned(), meta.objective, meta.out_dim)])?;
    let head_len = model.head(task_id)?.params.len();
    if raw.len() % 8 != 0
        || raw.len() / 8 != meta.encoder_len + meta.head_len
        || meta.encoder_len != model.encoder.len()
        || meta.head_len != head_len
    {
        return Err(CliError::Artifact(format!(
            "{} holds {} bytes; expected {} parameters for this model",
            path.display(),
            raw.len(),
            model.encoder.len() + head_len
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (enc, head) = values.split_at(meta.encoder_len);
    model.encoder.copy_from_slice(enc);
    model
        .heads
        .get_mut(task_id)
        .expect("head created above")
        .params
        .copy_from_slice(head);
    if model.checksum() != meta.checksum {
        return Err(CliError::Artifact(format!("checksum mismatch for model {task_id}")));
    }
    Ok(model)
}

pub fn write_dataset(layout: &Layout, ds: &TaskDataset) -> Result<()> {
    let path = layout.dataset(&ds.task_id);
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf).map_err(|source| CliError::Write {
        path: path.clone(),
        source,
    })?;
    buf.flush().expect("writing to a Vec cannot fail");
    write_bytes(&path, &buf)
}

pub fn read_dataset(layout: &Layout, meta: &TaskMeta) -> Result<TaskDataset> {
    let path = layout.dataset(&meta.task_id);
    let file = fs::File::open(&path).map_err(|source| CliError::Read {
        path: path.clone(),
        source,
    })?;
    Ok(TaskDataset::read_jsonl(BufReader::new(file), meta)?)
}

pub fn read_datasets(layout: &Layout, metas: &[TaskMeta]) -> Result<BTreeMap<String, TaskDataset>> {
    metas
        .iter()
        .map(|m| Ok((m.task_id.clone(), read_dataset(layout, m)?)))
        .collect()
}
