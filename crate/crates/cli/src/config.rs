use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use gradts_core::gradstore::MANIFEST_FILE;
use gradts_core::selector::{DEFAULT_FG_THRESHOLD, DEFAULT_THRES_THRESHOLD};
use gradts_core::toymtl::data::{planted_suite_specs, validate_spec};
use gradts_core::toymtl::{SyntheticTaskSpec, ToyModelConfig, TrainRecipe};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Instances per task in the built-in planted suite.
    pub train_size: usize,
    /// Explicit task specs; empty selects the built-in six-task suite.
    pub tasks: Vec<SyntheticTaskSpec>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            train_size: 400,
            tasks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub store_root: PathBuf,
    pub output_dir: PathBuf,
    pub primary: Option<String>,
    pub tau_star_fg: f64,
    pub tau_star_thres: f64,
    /// Seeds data generation and every multi-task evaluation.
    pub seed: u64,
    pub model: ToyModelConfig,
    pub recipe: TrainRecipe,
    pub suite: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            store_root: PathBuf::from("store"),
            output_dir: PathBuf::from("out"),
            primary: None,
            tau_star_fg: DEFAULT_FG_THRESHOLD,
            tau_star_thres: DEFAULT_THRES_THRESHOLD,
            seed: 0,
            model: ToyModelConfig::default(),
            recipe: TrainRecipe::default(),
            suite: SuiteConfig::default(),
        }
    }
}

/// `none` disables clipping; anything else is a norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipArg(pub Option<f64>);

impl std::str::FromStr for ClipArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(Self(None));
        }
        s.parse::<f64>().map(|v| Self(Some(v))).map_err(|e| e.to_string())
    }
}

/// One flag per config field. Flags beat `GRADTS_STORE`, which beats the
/// config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Gradient store directory.
    #[arg(long, global = true, env = "GRADTS_STORE")]
    pub store_root: Option<PathBuf>,
    /// Directory for every other artifact.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Primary task for `select` and `evaluate`.
    #[arg(long, global = true)]
    pub primary: Option<String>,
    /// Instance threshold for `fg`.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub tau_star_fg: Option<f64>,
    /// Task threshold for `thres`.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub tau_star_thres: Option<f64>,
    /// Seed for data generation and evaluation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Encoder layers.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Attention heads per layer.
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// Hidden width; a multiple of `heads`.
    #[arg(long, global = true)]
    pub model_dim: Option<usize>,
    /// Feed-forward width.
    #[arg(long, global = true)]
    pub ff_dim: Option<usize>,
    /// Token vocabulary, including the separator.
    #[arg(long, global = true)]
    pub vocab_size: Option<usize>,
    /// Longest accepted sequence.
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    /// False reduces the model to pooled embeddings.
    #[arg(long, global = true)]
    pub blocks_enabled: Option<bool>,
    /// Task-head init std in units of 1/sqrt(model_dim).
    #[arg(long, global = true)]
    pub head_init_scale: Option<f64>,
    /// Initialization seed of the toy model.
    #[arg(long, global = true)]
    pub model_seed: Option<u64>,

    /// Warm-up epochs per task.
    #[arg(long, global = true)]
    pub warmup_epochs: Option<usize>,
    /// Adam step size.
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    /// Encoder step size during warm-up relative to the learning rate; 0 trains only the head.
    #[arg(long, global = true)]
    pub warmup_encoder_lr_scale: Option<f64>,
    /// Batch size for training and accumulation.
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Passes over the data when accumulating gradients.
    #[arg(long, global = true)]
    pub accumulation_passes: Option<usize>,
    /// Joint training epochs per evaluation.
    #[arg(long, global = true)]
    pub mtl_epochs: Option<usize>,
    /// Share of the primary task held out for scoring.
    #[arg(long, global = true)]
    pub holdout_fraction: Option<f64>,
    /// A positive norm, or `none`.
    #[arg(long, global = true)]
    pub clip_norm: Option<ClipArg>,

    /// Instances per planted task; used when the config lists no tasks.
    #[arg(long, global = true)]
    pub train_size: Option<usize>,
}

macro_rules! apply {
    ($($flag:expr => $slot:expr),* $(,)?) => {
        $(if let Some(v) = $flag.clone() { $slot = v; })*
    };
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) {
        apply! {
            self.store_root => c.store_root,
            self.output_dir => c.output_dir,
            self.tau_star_fg => c.tau_star_fg,
            self.tau_star_thres => c.tau_star_thres,
            self.seed => c.seed,
            self.layers => c.model.layers,
            self.heads => c.model.heads,
            self.model_dim => c.model.model_dim,
            self.ff_dim => c.model.ff_dim,
            self.vocab_size => c.model.vocab_size,
            self.max_len => c.model.max_len,
            self.blocks_enabled => c.model.blocks_enabled,
            self.head_init_scale => c.model.head_init_scale,
            self.model_seed => c.model.seed,
            self.warmup_epochs => c.recipe.warmup_epochs,
            self.learning_rate => c.recipe.learning_rate,
            self.warmup_encoder_lr_scale => c.recipe.warmup_encoder_lr_scale,
            self.batch_size => c.recipe.batch_size,
            self.accumulation_passes => c.recipe.accumulation_passes,
            self.mtl_epochs => c.recipe.mtl_epochs,
            self.holdout_fraction => c.recipe.holdout_fraction,
            self.train_size => c.suite.train_size,
        }
        if let Some(p) = &self.primary {
            c.primary = Some(p.clone());
        }
        if let Some(ClipArg(v)) = self.clip_norm {
            c.recipe.clip_norm = v;
        }
    }
}

/// What a subcommand needs to exist before it runs.
#[derive(Clone, Copy, Debug, Default)]
pub struct Needs {
    pub primary: bool,
    pub store: bool,
}

impl RunConfig {
    /// Reads `path`; relative paths inside it resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.store_root, &mut config.output_dir] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        overrides.apply(&mut config);
        Ok(config)
    }

    /// Task specs `gen` generates.
    pub fn task_specs(&self) -> Vec<SyntheticTaskSpec> {
        if self.suite.tasks.is_empty() {
            planted_suite_specs(self.seed, self.suite.train_size)
        } else {
            self.suite.tasks.clone()
        }
    }

    /// Every violated constraint.
    pub fn problems(&self, needs: Needs) -> Vec<String> {
        let mut out = self.model.problems();
        out.extend(self.recipe.problems());
        for (name, v) in [
            ("tau_star_fg", self.tau_star_fg),
            ("tau_star_thres", self.tau_star_thres),
        ] {
            if !v.is_finite() {
                out.push(format!("{name} ({v}) must be finite"));
            }
        }
        for (name, p) in [("store_root", &self.store_root), ("output_dir", &self.output_dir)] {
            if p.as_os_str().is_empty() {
                out.push(format!("{name} must not be empty"));
            }
        }
        if self.suite.tasks.is_empty() && self.suite.train_size < 2 {
            out.push(format!(
                "suite.train_size ({}) must be at least 2",
                self.suite.train_size
            ));
        }
        let mut seen = BTreeSet::new();
        for spec in &self.suite.tasks {
            if !seen.insert(spec.task_id.as_str()) {
                out.push(format!("suite.tasks: duplicate task id {:?}", spec.task_id));
            }
            if self.model.problems().is_empty() {
                if let Err(e) = validate_spec(spec, self.model.vocab_size, self.model.max_len) {
                    out.push(format!("suite.tasks: {e}"));
                }
            }
        }
        if needs.primary && self.primary.is_none() {
            out.push("primary is required for this command".into());
        }
        if needs.store && !self.store_root.as_os_str().is_empty() && !self.store_root.join(MANIFEST_FILE).is_file() {
            out.push(format!(
                "store_root {} has no {MANIFEST_FILE}; run `gradts gen` first",
                self.store_root.display()
            ));
        }
        out
    }

    pub fn validate(&self, needs: Needs) -> Result<()> {
        let problems = self.problems(needs);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems))
        }
    }

    /// Hex sha256 of the config without its paths, so moving a run
    /// directory keeps its hash.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object_mut().expect("config is an object");
        map.remove("store_root");
        map.remove("output_dir");
        // serde_json maps are sorted, so this encoding is canonical.
        let bytes = serde_json::to_vec(&value).expect("value serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_thresholds() {
        let c = RunConfig::default();
        assert_eq!(c.tau_star_fg, 0.42);
        assert_eq!(c.tau_star_thres, 0.47);
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.store_root = "/elsewhere".into();
        b.output_dir = "/other".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn every_problem_is_listed() {
        let mut c = RunConfig::default();
        c.model.heads = 3;
        c.recipe.batch_size = 0;
        c.tau_star_fg = f64::NAN;
        c.output_dir = PathBuf::new();
        let p = c.problems(Needs {
            primary: true,
            store: false,
        });
        assert_eq!(p.len(), 5, "{p:?}");
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::default();
        let o = Overrides {
            heads: Some(8),
            clip_norm: Some(ClipArg(None)),
            primary: Some("t".into()),
            ..Default::default()
        };
        o.apply(&mut c);
        assert_eq!(c.model.heads, 8);
        assert_eq!(c.recipe.clip_norm, None);
        assert_eq!(c.primary.as_deref(), Some("t"));
    }
}
