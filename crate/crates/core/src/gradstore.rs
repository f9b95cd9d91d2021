//! On-disk store for accumulated head gradients.
//!
//! A store is a directory holding `manifest.json` plus one binary file per
//! task tensor (`tensors/<task>.grts`) and one pack per task of instance
//! tensors (`instances/<task>.grts`).
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! "GRTS"            4 bytes
//! version           u32
//! L                 u32
//! H                 u32
//! source            u8      0 = task, 1 = instance
//! N                 u32     blocks; 1 for task tensors
//! payload           N * L * H f64, layer-major, head-minor
//! string table      u32 length + UTF-8 bytes, repeated:
//!                   task_id, then N instance ids (instance files only)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, HeadGrid};

pub const MAGIC: &[u8; 4] = b"GRTS";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1 + 4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"GRTS\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after string table")]
    TrailingBytes(usize),
    #[error("invalid source flag {0}")]
    BadSourceFlag(u8),
    #[error("string table entry is not valid UTF-8")]
    BadUtf8,
    #[error("value at flat index {index} is {value}: gradient mass must be finite and non-negative")]
    InvalidValue { index: usize, value: f64 },
    #[error("dimension mismatch: store is {expected:?}, tensor is {got:?}")]
    DimsMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid task id {0:?}: use letters, digits, '.', '_' or '-', not starting with '.'")]
    InvalidTaskId(String),
    #[error("expected a {expected} tensor, found {found}")]
    WrongSource { expected: GradSource, found: GradSource },
    #[error("instance pack holds {blocks} blocks but {ids} ids")]
    PackIdMismatch { blocks: usize, ids: usize },
    #[error("duplicate instance id {0:?} in pack")]
    DuplicateInstanceId(String),
    #[error("file holds {0} tensors; read it as an instance pack")]
    NotSingleTensor(usize),
    #[error("task {0:?} has no entry in the store")]
    UnknownTask(String),
    #[error("manifest missing at {0}")]
    MissingManifest(PathBuf),
    #[error("manifest is malformed: {0}")]
    BadManifest(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid task metadata for {task_id:?}: {reason}")]
    InvalidMeta { task_id: String, reason: String },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradSource {
    Task,
    Instance,
}

impl std::fmt::Display for GradSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradSource::Task => f.write_str("task"),
            GradSource::Instance => f.write_str("instance"),
        }
    }
}

/// Accumulated absolute gradient mass per head for one task or one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradientTensor {
    pub task_id: String,
    pub values: HeadGrid,
    pub source: GradSource,
    pub instance_id: Option<String>,
}

impl HeadGradientTensor {
    pub fn task(task_id: impl Into<String>, values: HeadGrid) -> Self {
        Self {
            task_id: task_id.into(),
            values,
            source: GradSource::Task,
            instance_id: None,
        }
    }

    pub fn instance(task_id: impl Into<String>, instance_id: impl Into<String>, values: HeadGrid) -> Self {
        Self {
            task_id: task_id.into(),
            values,
            source: GradSource::Instance,
            instance_id: Some(instance_id.into()),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn check_values(&self) -> Result<()> {
        check_values(self.values.as_slice(), 0)
    }
}

fn check_values(values: &[f64], base: usize) -> Result<()> {
    match values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        Some((i, &value)) => Err(StoreError::InvalidValue { index: base + i, value }),
        None => Ok(()),
    }
}

/// All per-instance tensors for one task, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePack {
    pub task_id: String,
    pub instance_ids: Vec<String>,
    pub blocks: Vec<HeadGrid>,
}

impl InstancePack {
    pub fn new(task_id: impl Into<String>, instance_ids: Vec<String>, blocks: Vec<HeadGrid>) -> Result<Self> {
        let pack = Self {
            task_id: task_id.into(),
            instance_ids,
            blocks,
        };
        pack.check()?;
        Ok(pack)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.blocks.first().map(HeadGrid::dims)
    }

    pub fn tensors(&self) -> impl Iterator<Item = HeadGradientTensor> + '_ {
        self.instance_ids
            .iter()
            .zip(&self.blocks)
            .map(|(id, block)| HeadGradientTensor::instance(&self.task_id, id, block.clone()))
    }

    fn check(&self) -> Result<()> {
        if self.blocks.len() != self.instance_ids.len() {
            return Err(StoreError::PackIdMismatch {
                blocks: self.blocks.len(),
                ids: self.instance_ids.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for id in &self.instance_ids {
            if !seen.insert(id.as_str()) {
                return Err(StoreError::DuplicateInstanceId(id.clone()));
            }
        }
        if let Some(dims) = self.dims() {
            for (i, block) in self.blocks.iter().enumerate() {
                if block.dims() != dims {
                    return Err(StoreError::DimsMismatch {
                        expected: dims,
                        got: block.dims(),
                    });
                }
                check_values(block.as_slice(), i * block.len())?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "CLS")]
    Classification,
    #[serde(rename = "RGR")]
    Regression,
    #[serde(rename = "SL")]
    SequenceLabeling,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Classification => "CLS",
            Objective::Regression => "RGR",
            Objective::SequenceLabeling => "SL",
        })
    }
}

/// Dataset-level facts about a task; what the heuristic selectors rank on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task_id: String,
    pub objective: Objective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_count: Option<usize>,
    pub train_size: usize,
    pub avg_len: f64,
    pub type_tag: String,
}

impl TaskMeta {
    pub fn check(&self) -> Result<()> {
        let bad = |reason: &str| StoreError::InvalidMeta {
            task_id: self.task_id.clone(),
            reason: reason.to_owned(),
        };
        match (self.objective, self.label_count) {
            (Objective::Classification, None) => return Err(bad("CLS task without label_count")),
            (Objective::Classification, Some(0)) => return Err(bad("label_count must be positive")),
            (Objective::Regression | Objective::SequenceLabeling, Some(_)) => {
                return Err(bad("label_count is only meaningful for CLS tasks"))
            }
            _ => {}
        }
        if !(self.avg_len.is_finite() && self.avg_len >= 0.0) {
            return Err(bad("avg_len must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradStoreManifest {
    pub version: u32,
    /// `(layers, heads)`; `None` until the first tensor is written.
    pub dims: Option<(usize, usize)>,
    pub tasks: Vec<TaskMeta>,
    pub tensor_index: BTreeMap<String, String>,
    pub instance_index: BTreeMap<String, String>,
}

impl GradStoreManifest {
    pub fn empty() -> Self {
        Self {
            version: MANIFEST_VERSION,
            ..Self::default()
        }
    }

    pub fn task_meta(&self, task_id: &str) -> Option<&TaskMeta> {
        self.tasks.iter().find(|m| m.task_id == task_id)
    }
}

pub fn validate_task_id(task_id: &str) -> Result<()> {
    let ok = !task_id.is_empty()
        && !task_id.starts_with('.')
        && task_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidTaskId(task_id.to_owned()))
    }
}

// ----------------------------------------------------------------------------
// Binary encoding

fn encode(layers: usize, heads: usize, source: GradSource, blocks: &[&HeadGrid], strings: &[&str]) -> Vec<u8> {
    let payload = blocks.len() * layers * heads * 8;
    let table: usize = strings.iter().map(|s| 4 + s.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + payload + table);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(layers as u32).to_le_bytes());
    out.extend_from_slice(&(heads as u32).to_le_bytes());
    out.push(match source {
        GradSource::Task => 0,
        GradSource::Instance => 1,
    });
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for block in blocks {
        for v in block.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in strings {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    out
}

pub fn encode_tensor(tensor: &HeadGradientTensor) -> Vec<u8> {
    let (l, h) = tensor.dims();
    let mut strings = vec![tensor.task_id.as_str()];
    if let Some(id) = &tensor.instance_id {
        strings.push(id);
    }
    encode(l, h, tensor.source, &[&tensor.values], &strings)
}

pub fn encode_pack(pack: &InstancePack) -> Vec<u8> {
    let (l, h) = pack.dims().unwrap_or((0, 0));
    let blocks: Vec<&HeadGrid> = pack.blocks.iter().collect();
    let mut strings = vec![pack.task_id.as_str()];
    strings.extend(pack.instance_ids.iter().map(String::as_str));
    encode(l, h, GradSource::Instance, &blocks, &strings)
}

/// Decoded contents of a tensor file before it is interpreted as a single
/// tensor or a pack.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub layers: usize,
    pub heads: usize,
    pub source: GradSource,
    pub task_id: String,
    pub instance_ids: Vec<String>,
    pub blocks: Vec<HeadGrid>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(StoreError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| StoreError::BadUtf8)
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = match cur.take(4) {
        Ok(m) => m.try_into().unwrap(),
        Err(_) => {
            let mut found = [0u8; 4];
            found[..bytes.len()].copy_from_slice(bytes);
            return Err(StoreError::BadMagic { found });
        }
    };
    if &magic != MAGIC {
        return Err(StoreError::BadMagic { found: magic });
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let layers = cur.u32()? as usize;
    let heads = cur.u32()? as usize;
    let source = match cur.take(1)?[0] {
        0 => GradSource::Task,
        1 => GradSource::Instance,
        other => return Err(StoreError::BadSourceFlag(other)),
    };
    let n = cur.u32()? as usize;
    let cell = layers * heads;
    let payload_len = n.checked_mul(cell).and_then(|x| x.checked_mul(8)).unwrap_or(usize::MAX);
    let payload = cur.take(payload_len)?;
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    check_values(&values, 0)?;
    let blocks = values
        .chunks(cell.max(1))
        .take(n)
        .map(|c| HeadGrid::from_vec(layers, heads, c.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let task_id = cur.string()?;
    let instance_ids = match source {
        GradSource::Task => Vec::new(),
        GradSource::Instance => (0..n).map(|_| cur.string()).collect::<Result<_>>()?,
    };
    let trailing = bytes.len() - cur.pos;
    if trailing != 0 {
        return Err(StoreError::TrailingBytes(trailing));
    }
    Ok(TensorFile {
        layers,
        heads,
        source,
        task_id,
        instance_ids,
        blocks,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads a single tensor: a task tensor, or an instance file with one block.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<HeadGradientTensor> {
    let file = decode(&read_bytes(path.as_ref())?)?;
    if file.blocks.len() != 1 {
        return Err(StoreError::NotSingleTensor(file.blocks.len()));
    }
    let TensorFile {
        source,
        task_id,
        mut instance_ids,
        mut blocks,
        ..
    } = file;
    Ok(HeadGradientTensor {
        task_id,
        values: blocks.pop().unwrap(),
        source,
        instance_id: instance_ids.pop(),
    })
}

pub fn read_instance_pack(path: impl AsRef<Path>) -> Result<InstancePack> {
    let file = decode(&read_bytes(path.as_ref())?)?;
    if file.source != GradSource::Instance {
        return Err(StoreError::WrongSource {
            expected: GradSource::Instance,
            found: file.source,
        });
    }
    InstancePack::new(file.task_id, file.instance_ids, file.blocks)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| StoreError::Io {
        path: path.to_owned(),
        source,
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

// ----------------------------------------------------------------------------
// Store

/// Single-writer handle to a store directory.
#[derive(Debug)]
pub struct GradStore {
    root: PathBuf,
    manifest: GradStoreManifest,
}

impl GradStore {
    /// Opens an existing store, or initializes an empty one at `root`.
    pub fn open_or_create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if root.join(MANIFEST_FILE).exists() {
            return Self::open(root);
        }
        let store = Self {
            root,
            manifest: GradStoreManifest::empty(),
        };
        store.save_manifest()?;
        Ok(store)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = load_manifest(&root)?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &GradStoreManifest {
        &self.manifest
    }

    fn save_manifest(&self) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(&self.manifest)?;
        json.push(b'\n');
        write_atomic(&self.root.join(MANIFEST_FILE), &json)
    }

    fn adopt_dims(&mut self, dims: (usize, usize)) -> Result<()> {
        match self.manifest.dims {
            Some(expected) if expected != dims => Err(StoreError::DimsMismatch { expected, got: dims }),
            Some(_) => Ok(()),
            None => {
                self.manifest.dims = Some(dims);
                Ok(())
            }
        }
    }

    /// Writes a task tensor and indexes it. Returns the absolute file path.
    pub fn write_tensor(&mut self, tensor: &HeadGradientTensor) -> Result<PathBuf> {
        if tensor.source != GradSource::Task {
            return Err(StoreError::WrongSource {
                expected: GradSource::Task,
                found: tensor.source,
            });
        }
        validate_task_id(&tensor.task_id)?;
        tensor.check_values()?;
        let previous = self.manifest.dims;
        self.adopt_dims(tensor.dims())?;
        let rel = format!("tensors/{}.grts", tensor.task_id);
        let path = self.root.join(&rel);
        if let Err(e) = write_atomic(&path, &encode_tensor(tensor)) {
            self.manifest.dims = previous;
            return Err(e);
        }
        self.manifest.tensor_index.insert(tensor.task_id.clone(), rel);
        self.save_manifest()?;
        Ok(path)
    }

    pub fn write_instance_pack(&mut self, pack: &InstancePack) -> Result<PathBuf> {
        validate_task_id(&pack.task_id)?;
        pack.check()?;
        let previous = self.manifest.dims;
        if let Some(dims) = pack.dims() {
            self.adopt_dims(dims)?;
        }
        let rel = format!("instances/{}.grts", pack.task_id);
        let path = self.root.join(&rel);
        if let Err(e) = write_atomic(&path, &encode_pack(pack)) {
            self.manifest.dims = previous;
            return Err(e);
        }
        self.manifest.instance_index.insert(pack.task_id.clone(), rel);
        self.save_manifest()?;
        Ok(path)
    }

    pub fn upsert_task_meta(&mut self, meta: TaskMeta) -> Result<()> {
        validate_task_id(&meta.task_id)?;
        meta.check()?;
        match self.manifest.tasks.iter_mut().find(|m| m.task_id == meta.task_id) {
            Some(slot) => *slot = meta,
            None => {
                self.manifest.tasks.push(meta);
                self.manifest.tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
            }
        }
        self.save_manifest()
    }

    pub fn read_task_tensor(&self, task_id: &str) -> Result<HeadGradientTensor> {
        let rel = self
            .manifest
            .tensor_index
            .get(task_id)
            .ok_or_else(|| StoreError::UnknownTask(task_id.to_owned()))?;
        read_tensor(self.root.join(rel))
    }

    pub fn read_instance_pack(&self, task_id: &str) -> Result<InstancePack> {
        let rel = self
            .manifest
            .instance_index
            .get(task_id)
            .ok_or_else(|| StoreError::UnknownTask(task_id.to_owned()))?;
        read_instance_pack(self.root.join(rel))
    }

    /// Task ids with an indexed task tensor, sorted.
    pub fn tensor_task_ids(&self) -> Vec<String> {
        self.manifest.tensor_index.keys().cloned().collect()
    }
}

/// Free-function form of [`GradStore::write_tensor`]: opens (or creates) the
/// store at `store_root` and writes one task tensor.
pub fn write_tensor(store_root: impl Into<PathBuf>, tensor: &HeadGradientTensor) -> Result<PathBuf> {
    GradStore::open_or_create(store_root)?.write_tensor(tensor)
}

fn load_manifest(root: &Path) -> Result<GradStoreManifest> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(StoreError::MissingManifest(path));
    }
    let bytes = read_bytes(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

// ----------------------------------------------------------------------------
// Validation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    MissingFile,
    Unparsable,
    DimsMismatch,
    TaskIdMismatch,
    WrongSource,
    InvalidMeta,
    MissingDims,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub task_id: String,
    pub detail: String,
}

/// Checks every manifest invariant without modifying anything. An empty list
/// means the store is valid.
pub fn validate_store(store_root: impl AsRef<Path>) -> Result<Vec<Finding>> {
    let root = store_root.as_ref();
    let manifest = load_manifest(root)?;
    let mut findings = Vec::new();
    let mut push = |kind, task_id: &str, detail: String| {
        findings.push(Finding {
            kind,
            task_id: task_id.to_owned(),
            detail,
        })
    };

    let mut seen = BTreeSet::new();
    for meta in &manifest.tasks {
        if !seen.insert(meta.task_id.as_str()) {
            push(FindingKind::InvalidMeta, &meta.task_id, "duplicate task entry".into());
        }
        if let Err(e) = meta.check() {
            push(FindingKind::InvalidMeta, &meta.task_id, e.to_string());
        }
    }

    let indexed = !manifest.tensor_index.is_empty() || !manifest.instance_index.is_empty();
    if manifest.dims.is_none() && indexed {
        push(
            FindingKind::MissingDims,
            "",
            "tensors indexed but manifest has no dims".into(),
        );
    }

    let entries = manifest
        .tensor_index
        .iter()
        .map(|e| (e, GradSource::Task))
        .chain(manifest.instance_index.iter().map(|e| (e, GradSource::Instance)));
    for ((task_id, rel), expected_source) in entries {
        let path = root.join(rel);
        if !path.is_file() {
            push(FindingKind::MissingFile, task_id, format!("{rel} does not exist"));
            continue;
        }
        let file = match read_bytes(&path).and_then(|b| decode(&b)) {
            Ok(f) => f,
            Err(e) => {
                push(FindingKind::Unparsable, task_id, format!("{rel}: {e}"));
                continue;
            }
        };
        if file.source != expected_source {
            push(
                FindingKind::WrongSource,
                task_id,
                format!("{rel}: expected {expected_source} tensor, found {}", file.source),
            );
        }
        if &file.task_id != task_id {
            push(
                FindingKind::TaskIdMismatch,
                task_id,
                format!("{rel} holds task {:?}", file.task_id),
            );
        }
        if expected_source == GradSource::Instance {
            if let Err(e) = InstancePack::new(&file.task_id, file.instance_ids.clone(), file.blocks.clone()) {
                push(FindingKind::Unparsable, task_id, format!("{rel}: {e}"));
            }
        }
        let got = (file.layers, file.heads);
        if let Some(dims) = manifest.dims {
            // An empty instance pack carries no head dims to compare.
            let empty_pack = expected_source == GradSource::Instance && file.blocks.is_empty();
            if got != dims && !empty_pack {
                push(
                    FindingKind::DimsMismatch,
                    task_id,
                    format!("{rel} is {}x{}, manifest says {}x{}", got.0, got.1, dims.0, dims.1),
                );
            }
        }
    }
    Ok(findings)
}
