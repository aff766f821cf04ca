//! Run configuration: presets, TOML documents, environment overrides and
//! the assembly of model, plan and datasets for a run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::scenegen::{load_dataset, DataFormat, DatasetEntry, DatasetManifest, LoadedDataset, ResizeTargets};
use crate::task::{TaskDescriptor, TaskType};
use crate::trainer::{
    MaskMode, Model, ModelConfig, OptimizerConfig, PlanDataset, PreparedDataset, SampleWeights,
    SharingMode, TrainPlan,
};

pub const ENV_DATA_ROOT: &str = "UNIHCP_DATA_ROOT";
pub const ENV_SEED: &str = "UNIHCP_SEED";
pub const ENV_STEPS: &str = "UNIHCP_STEPS";

/// Deep prompt tokens per decoder block when none are configured; nine
/// blocks of 14 tokens at width 256 give 32,256 prompt parameters.
pub const DEFAULT_DEEP_PROMPT_TOKENS: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    #[default]
    Toy,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Toy => "toy",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            _ => Err(Error::config(format!("unknown preset `{s}` (paper|toy)"))),
        }
    }
}

/// Query counts for tasks whose count is a model choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryCounts {
    /// Feature slots; the re-identification feature is `reid × width` long.
    pub reid: usize,
    pub peddet: usize,
}

/// Training overrides; unset fields take the preset's values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub total_steps: Option<u64>,
    pub warmup_steps: Option<u64>,
    pub peak_lr: Option<f64>,
    pub layer_decay: Option<f64>,
    pub weight_decay: Option<f64>,
    pub drop_path: Option<f64>,
    pub det_batch_factor: Option<f64>,
    pub det_micro_batches: Option<usize>,
    pub sample_weights: Option<SampleWeights>,
    pub loss: Option<LossWeights>,
    pub optimizer: Option<OptimizerConfig>,
    pub sharing_mode: Option<SharingMode>,
    pub mask_mode: Option<MaskMode>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSettings {
    /// Datasets whose queries are tuned; empty means every dataset.
    #[serde(default)]
    pub tasks: Vec<String>,
    #[serde(default = "default_deep_tokens")]
    pub deep_prompt_tokens: usize,
}

fn default_deep_tokens() -> usize {
    DEFAULT_DEEP_PROMPT_TOKENS
}

impl Default for PromptSettings {
    fn default() -> Self {
        PromptSettings {
            tasks: Vec::new(),
            deep_prompt_tokens: DEFAULT_DEEP_PROMPT_TOKENS,
        }
    }
}

/// The whole configuration of a command. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub resize: Option<ResizeTargets>,
    #[serde(default)]
    pub queries: Option<QueryCounts>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub prompt: PromptSettings,
    /// Extra manifest files; relative paths resolve against the config file.
    #[serde(default)]
    pub manifests: Vec<PathBuf>,
    #[serde(default, rename = "dataset")]
    pub datasets: Vec<DatasetEntry>,
    /// Samples per evaluation forward pass.
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_eval_batch() -> usize {
    8
}

impl RunConfig {
    pub fn new(preset: Preset) -> Self {
        RunConfig {
            preset,
            seed: 0,
            model: None,
            resize: None,
            queries: None,
            train: TrainSettings::default(),
            prompt: PromptSettings::default(),
            manifests: Vec::new(),
            datasets: Vec::new(),
            eval_batch: default_eval_batch(),
        }
    }

    /// Five synthetic datasets, one per task type, `samples` each.
    pub fn toy_joint(samples: usize, seed: u64) -> Self {
        let mut cfg = RunConfig::new(Preset::Toy);
        cfg.seed = seed;
        cfg.datasets = TaskType::ALL
            .into_iter()
            .enumerate()
            .map(|(i, t)| DatasetEntry {
                id: format!("syn_{t}"),
                task_type: t,
                format: DataFormat::Synthetic,
                root: PathBuf::new(),
                split: "train".into(),
                batch_size: 8,
                samples: Some(samples),
                seed: Some(seed.wrapping_add(i as u64)),
            })
            .collect();
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))
    }

    /// Reads a config file and merges its manifests into the dataset list.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in std::mem::take(&mut cfg.manifests) {
            let p = if m.is_absolute() { m } else { base.join(m) };
            cfg.datasets.extend(DatasetManifest::load(&p)?.datasets);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("run config: {e}")))
    }

    /// Applies `UNIHCP_SEED` and `UNIHCP_STEPS` from `env`.
    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = env(ENV_SEED) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{ENV_SEED}=`{s}` is not an integer")))?;
        }
        if let Some(s) = env(ENV_STEPS) {
            let n = s
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{ENV_STEPS}=`{s}` is not an integer")))?;
            self.train.total_steps = Some(n);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        DatasetManifest {
            datasets: self.datasets.clone(),
        }
        .validate()?;
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch must be positive"));
        }
        let q = self.query_counts();
        if q.reid == 0 || q.peddet == 0 {
            return Err(Error::config("query counts must be positive"));
        }
        for t in &self.prompt.tasks {
            if !self.datasets.iter().any(|d| &d.id == t) {
                return Err(Error::config(format!("prompt task `{t}` is not a configured dataset")));
            }
        }
        self.model_config().validate()
    }

    pub fn query_counts(&self) -> QueryCounts {
        self.queries.unwrap_or(match self.preset {
            Preset::Paper => QueryCounts { reid: 6, peddet: 100 },
            Preset::Toy => QueryCounts { reid: 2, peddet: 16 },
        })
    }

    pub fn resize_targets(&self) -> ResizeTargets {
        self.resize.unwrap_or(match self.preset {
            Preset::Paper => ResizeTargets::paper(),
            Preset::Toy => ResizeTargets::toy(),
        })
    }

    fn drop_path(&self) -> f64 {
        self.train.drop_path.unwrap_or(match self.preset {
            Preset::Paper => 0.2,
            Preset::Toy => 0.0,
        })
    }

    /// Model configuration with the run's drop-path rate.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone().unwrap_or(match self.preset {
            Preset::Paper => ModelConfig::paper(),
            Preset::Toy => ModelConfig::toy(),
        });
        m.encoder.drop_path_rate = self.drop_path();
        m
    }

    /// The training plan over the configured datasets.
    pub fn plan(&self) -> TrainPlan {
        let t = &self.train;
        let det_factor = t.det_batch_factor.unwrap_or(0.6);
        let datasets = self
            .datasets
            .iter()
            .map(|d| PlanDataset::from_nominal(&d.id, &d.id, d.task_type, d.batch_size, det_factor))
            .collect();
        let (steps, warmup, lr) = match self.preset {
            Preset::Paper => (105_000, 1500, 1e-3),
            Preset::Toy => (3000, 150, 1e-3),
        };
        let mut plan = TrainPlan::paper(datasets, t.total_steps.unwrap_or(steps));
        plan.warmup_steps = t.warmup_steps.unwrap_or(warmup.min(plan.total_steps.saturating_sub(1)));
        plan.peak_lr = t.peak_lr.unwrap_or(lr);
        plan.det_batch_factor = det_factor;
        plan.drop_path = self.drop_path();
        plan.seed = self.seed;
        if let Some(v) = t.layer_decay {
            plan.layer_decay = v;
        }
        if let Some(v) = t.weight_decay {
            plan.weight_decay = v;
        }
        if let Some(v) = t.det_micro_batches {
            plan.det_micro_batches = v;
        }
        if let Some(v) = t.sample_weights {
            plan.sample_weights = v;
        }
        if let Some(v) = t.loss.clone() {
            plan.loss = v;
        }
        if let Some(v) = t.optimizer {
            plan.optimizer = v;
        }
        if let Some(v) = t.sharing_mode {
            plan.sharing_mode = v;
        }
        if let Some(v) = t.mask_mode {
            plan.mask_mode = v;
        }
        plan
    }

    /// Datasets opened up by prompt tuning.
    pub fn prompt_targets(&self) -> Vec<String> {
        if self.prompt.tasks.is_empty() {
            self.datasets.iter().map(|d| d.id.clone()).collect()
        } else {
            self.prompt.tasks.clone()
        }
    }
}

/// Six tasks over the five task types with benchmark-sized query sets, for
/// parameter accounting without data.
pub fn reference_tasks() -> Vec<TaskDescriptor> {
    vec![
        TaskDescriptor::new("market1501", TaskType::Reid, 6),
        TaskDescriptor::new("pa100k", TaskType::Par, 26),
        TaskDescriptor::new("lip", TaskType::Seg, 20),
        TaskDescriptor::new("coco_pose", TaskType::Pose, 17),
        TaskDescriptor::new("aic", TaskType::Pose, 14),
        TaskDescriptor::new("crowdhuman", TaskType::PedDet, 100),
    ]
}

/// Data root from the environment, else the current directory.
pub fn data_root(env: impl Fn(&str) -> Option<String>) -> PathBuf {
    env(ENV_DATA_ROOT).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Model, plan and prepared datasets of a run.
#[derive(Debug)]
pub struct PreparedRun {
    pub model: Model,
    pub plan: TrainPlan,
    pub datasets: Vec<PreparedDataset>,
    /// Records dropped by the loaders, per dataset.
    pub skipped: BTreeMap<String, usize>,
}

/// One task per dataset, with query counts from the data or the config.
pub fn task_descriptor(cfg: &RunConfig, loaded: &LoadedDataset) -> TaskDescriptor {
    let q = cfg.query_counts();
    let e = &loaded.entry;
    let n = match e.task_type {
        TaskType::Reid => q.reid,
        TaskType::PedDet => q.peddet,
        _ => loaded.num_queries,
    };
    let mut t = TaskDescriptor::new(&e.id, e.task_type, n);
    if e.task_type.queries_are_classes() {
        t.class_names = loaded.class_names.clone();
    }
    if cfg.plan().mask_mode == MaskMode::PromptDeep && cfg.prompt_targets().contains(&e.id) {
        t.deep_prompt_tokens = cfg.prompt.deep_prompt_tokens;
    }
    t
}

/// Loaded datasets of a config with the tasks they define.
#[derive(Debug)]
pub struct PreparedData {
    pub tasks: Vec<TaskDescriptor>,
    pub datasets: Vec<PreparedDataset>,
    /// Records dropped by the loaders, per dataset.
    pub skipped: BTreeMap<String, usize>,
}

impl PreparedData {
    /// `(task, identities)` for every re-identification dataset.
    pub fn identity_counts(&self) -> Vec<(String, usize)> {
        self.datasets
            .iter()
            .filter(|d| d.task_type == TaskType::Reid)
            .map(|d| (d.task_id.clone(), d.num_identities))
            .collect()
    }
}

/// Loads and resizes every configured dataset.
pub fn prepare_data(cfg: &RunConfig, data_root: &Path) -> Result<PreparedData> {
    cfg.validate()?;
    let resize = cfg.resize_targets();
    let mut tasks = Vec::new();
    let mut datasets = Vec::new();
    let mut skipped = BTreeMap::new();
    for entry in &cfg.datasets {
        let loaded = load_dataset(entry, data_root)?;
        if loaded.samples.is_empty() {
            return Err(Error::config(format!("dataset `{}` has no usable samples", entry.id)));
        }
        let task = task_descriptor(cfg, &loaded);
        let prepared = PreparedDataset::new(
            &entry.id,
            &entry.id,
            entry.task_type,
            &loaded.samples,
            &resize,
            task.num_queries,
        )?;
        skipped.insert(entry.id.clone(), loaded.skipped);
        tasks.push(task);
        datasets.push(prepared);
    }
    Ok(PreparedData {
        tasks,
        datasets,
        skipped,
    })
}

/// Loads every dataset, derives tasks and builds a freshly initialized
/// model with ID classifiers for re-identification tasks.
pub fn prepare_run(cfg: &RunConfig, data_root: &Path, dtype: DType) -> Result<PreparedRun> {
    let plan = cfg.plan();
    plan.validate()?;
    let data = prepare_data(cfg, data_root)?;
    let mut model = Model::build(&cfg.model_config(), &data.tasks, plan.sharing_mode, cfg.seed, dtype)?;
    for (task, n) in data.identity_counts() {
        model.add_id_classifier(&task, n, cfg.seed)?;
    }
    Ok(PreparedRun {
        model,
        plan,
        datasets: data.datasets,
        skipped: data.skipped,
    })
}
