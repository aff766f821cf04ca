use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecodedQueries, DecoderConfig, QueryDecoder, TaskQuerySet};
use crate::encoder::{Encoder, EncoderConfig, ForwardMode, ImageBatch, PatchTokens};
use crate::error::{Error, Result};
use crate::interpreter::{Interpreter, UnitOutputs};
use crate::nn::Linear;
use crate::objectives::{
    auxiliary_apply, supervised_layers, IdClassifier, LossBreakdown, LossContext, LossWeights,
    TaskTargets,
};
use crate::params::{self, Decl, ParamSpec, ParamStore, Scope};
use crate::task::TaskDescriptor;

/// Which of decoder and interpreter are duplicated. Queries are always
/// per task and the encoder is always shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// One decoder and one interpreter for every task.
    #[default]
    Baseline,
    /// Shared decoder, one interpreter per task.
    PerTaskInterpreter,
    /// Decoder and interpreter per task.
    EncoderOnly,
    /// Decoder and interpreter per task type.
    PerTaskType,
}

impl SharingMode {
    pub const ALL: [SharingMode; 4] = [
        SharingMode::Baseline,
        SharingMode::PerTaskInterpreter,
        SharingMode::PerTaskType,
        SharingMode::EncoderOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SharingMode::Baseline => "baseline",
            SharingMode::PerTaskInterpreter => "per_task_interpreter",
            SharingMode::EncoderOnly => "encoder_only",
            SharingMode::PerTaskType => "per_task_type",
        }
    }

    pub fn decoder_prefix(self, desc: &TaskDescriptor) -> String {
        match self {
            SharingMode::Baseline | SharingMode::PerTaskInterpreter => "decoder".into(),
            SharingMode::EncoderOnly => format!("decoder@{}", desc.task_id),
            SharingMode::PerTaskType => format!("decoder@{}", desc.task_type),
        }
    }

    pub fn interpreter_prefix(self, desc: &TaskDescriptor) -> String {
        match self {
            SharingMode::Baseline => "interpreter".into(),
            SharingMode::PerTaskInterpreter | SharingMode::EncoderOnly => {
                format!("interpreter@{}", desc.task_id)
            }
            SharingMode::PerTaskType => format!("interpreter@{}", desc.task_type),
        }
    }
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        SharingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::config(format!("unknown sharing mode `{s}`")))
    }
}

/// Which parameters an optimizer update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Full,
    /// Content queries and their positional embeddings (or anchors).
    PromptQueries,
    /// Queries, per-block decoder prompt tokens and decoder norm parameters.
    PromptDeep,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::Full, MaskMode::PromptQueries, MaskMode::PromptDeep];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Full => "full",
            MaskMode::PromptQueries => "prompt_queries",
            MaskMode::PromptDeep => "prompt_deep",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        MaskMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::config(format!("unknown mask mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            encoder: EncoderConfig::paper(),
            decoder: DecoderConfig::paper(),
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.width != self.decoder.encoder_width {
            return Err(Error::config(format!(
                "encoder width {} != decoder input width {}",
                self.encoder.width, self.decoder.encoder_width
            )));
        }
        Ok(())
    }
}

fn check_tasks(tasks: &[TaskDescriptor]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for t in tasks {
        t.validate()?;
        if !seen.insert(t.task_id.as_str()) {
            return Err(Error::config(format!("duplicate task `{}`", t.task_id)));
        }
    }
    Ok(())
}

/// Parameter specs of a model without materializing any values.
pub fn declare_model(
    cfg: &ModelConfig,
    tasks: &[TaskDescriptor],
    mode: SharingMode,
) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    check_tasks(tasks)?;
    let mut specs = Vec::new();
    let mut d = Decl::root(&mut specs);
    Encoder::declare(&cfg.encoder, &mut d.pp("encoder"));
    let mut decoders = BTreeSet::new();
    let mut interpreters = BTreeSet::new();
    // the shared modules exist even with no tasks
    if tasks.is_empty() || matches!(mode, SharingMode::Baseline | SharingMode::PerTaskInterpreter) {
        decoders.insert("decoder".to_string());
    }
    if tasks.is_empty() || mode == SharingMode::Baseline {
        interpreters.insert("interpreter".to_string());
    }
    for t in tasks {
        decoders.insert(mode.decoder_prefix(t));
        interpreters.insert(mode.interpreter_prefix(t));
    }
    for p in &decoders {
        QueryDecoder::declare(&cfg.decoder, &mut d.pp(p));
    }
    for p in &interpreters {
        Interpreter::declare(&mut d.pp(p), cfg.decoder.width, cfg.encoder.width);
    }
    for t in tasks {
        TaskQuerySet::declare(t, &cfg.decoder, &mut d.pp("queries").pp(&t.task_id));
    }
    Ok(specs)
}

fn id_classifier_specs(task: &TaskDescriptor, width: usize, num_ids: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    Linear::declare(
        &mut Decl::root(&mut specs).pp("aux").pp(&task.task_id).pp("id_classifier"),
        task.num_queries * width,
        num_ids,
    );
    specs
}

/// Output of one forward pass for one task.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub tokens: PatchTokens,
    pub decoded: DecodedQueries,
    /// One entry per requested decoder layer.
    pub units: Vec<UnitOutputs>,
}

/// Encoder, decoders, interpreters and task queries over one parameter
/// store. Training-only heads live under `aux.`.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    mode: SharingMode,
    tasks: Vec<TaskDescriptor>,
    store: ParamStore,
    encoder: Encoder,
    decoders: BTreeMap<String, QueryDecoder>,
    interpreters: BTreeMap<String, Interpreter>,
    queries: BTreeMap<String, TaskQuerySet>,
    id_classifiers: BTreeMap<String, IdClassifier>,
}

impl Model {
    pub fn build(
        cfg: &ModelConfig,
        tasks: &[TaskDescriptor],
        mode: SharingMode,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let specs = declare_model(cfg, tasks, mode)?;
        let store = ParamStore::materialize(&specs, seed, dtype)?;
        Self::from_store(cfg, tasks, mode, store)
    }

    fn from_store(
        cfg: &ModelConfig,
        tasks: &[TaskDescriptor],
        mode: SharingMode,
        store: ParamStore,
    ) -> Result<Self> {
        let root = Scope::root(&store);
        let encoder = Encoder::load(&cfg.encoder, &root.pp("encoder"))?;
        let mut decoders = BTreeMap::new();
        let mut interpreters = BTreeMap::new();
        let mut queries = BTreeMap::new();
        for t in tasks {
            let dp = mode.decoder_prefix(t);
            if !decoders.contains_key(&dp) {
                let dec = QueryDecoder::load(&cfg.decoder, &root.pp(&dp))?;
                decoders.insert(dp, dec);
            }
            let ip = mode.interpreter_prefix(t);
            if !interpreters.contains_key(&ip) {
                let it = Interpreter::load(&root.pp(&ip), cfg.decoder.width, cfg.encoder.width)?;
                interpreters.insert(ip, it);
            }
            let q = TaskQuerySet::load(t, &cfg.decoder, &root.pp("queries").pp(&t.task_id))?;
            queries.insert(t.task_id.clone(), q);
        }
        Ok(Model {
            config: cfg.clone(),
            mode,
            tasks: tasks.to_vec(),
            store,
            encoder,
            decoders,
            interpreters,
            queries,
            id_classifiers: BTreeMap::new(),
        })
    }

    /// Adds the training-only ID classifier of a re-identification task.
    pub fn add_id_classifier(&mut self, task_id: &str, num_ids: usize, seed: u64) -> Result<()> {
        let task = self.task(task_id)?.clone();
        if num_ids == 0 {
            return Err(Error::config(format!("task `{task_id}` has no identities")));
        }
        let width = self.config.decoder.width;
        let specs = id_classifier_specs(&task, width, num_ids);
        if !self.store.contains(&specs[0].name) {
            self.store.extend(&specs, seed)?;
        }
        let s = Scope::root(&self.store).pp("aux").pp(task_id).pp("id_classifier");
        let linear = Linear::load(&s, task.num_queries * width, num_ids)?;
        self.id_classifiers
            .insert(task_id.to_string(), IdClassifier { linear, num_ids });
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> SharingMode {
        self.mode
    }

    pub fn tasks(&self) -> &[TaskDescriptor] {
        &self.tasks
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskDescriptor> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::config(format!("unknown task `{task_id}`")))
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder_for(&self, task_id: &str) -> Result<&QueryDecoder> {
        let p = self.mode.decoder_prefix(self.task(task_id)?);
        Ok(&self.decoders[&p])
    }

    pub fn interpreter_for(&self, task_id: &str) -> Result<&Interpreter> {
        let p = self.mode.interpreter_prefix(self.task(task_id)?);
        Ok(&self.interpreters[&p])
    }

    pub fn queries(&self, task_id: &str) -> Result<&TaskQuerySet> {
        self.queries
            .get(task_id)
            .ok_or_else(|| Error::config(format!("unknown task `{task_id}`")))
    }

    pub fn id_classifier(&self, task_id: &str) -> Option<&IdClassifier> {
        self.id_classifiers.get(task_id)
    }

    pub fn id_classifier_sizes(&self) -> BTreeMap<String, usize> {
        self.id_classifiers
            .iter()
            .map(|(k, v)| (k.clone(), v.num_ids))
            .collect()
    }

    /// Encoder, decoder and interpreter for `task_id`; `layers` defaults to
    /// the final decoder state.
    pub fn forward(
        &self,
        task_id: &str,
        batch: &ImageBatch,
        fmode: &ForwardMode,
        layers: Option<&[usize]>,
    ) -> Result<ModelOutput> {
        let tokens = self.encoder.forward(batch, fmode)?;
        self.forward_tokens(task_id, tokens, layers)
    }

    /// Decoder and interpreter on precomputed encoder tokens.
    pub fn forward_tokens(
        &self,
        task_id: &str,
        tokens: PatchTokens,
        layers: Option<&[usize]>,
    ) -> Result<ModelOutput> {
        let q = self.queries(task_id)?;
        let decoded = self.decoder_for(task_id)?.decode(q, &tokens)?;
        let last = [self.config.decoder.depth];
        let layers = layers.unwrap_or(&last);
        let units = self.interpreter_for(task_id)?.interpret(&decoded, &tokens, q, layers)?;
        Ok(ModelOutput {
            tokens,
            decoded,
            units,
        })
    }

    /// Task loss summed over the supervised decoder layers.
    pub fn loss(
        &self,
        task_id: &str,
        batch: &ImageBatch,
        targets: &TaskTargets,
        fmode: &ForwardMode,
        weights: &LossWeights,
    ) -> Result<LossBreakdown> {
        let task = self.task(task_id)?;
        if task.task_type != targets.task_type() {
            return Err(Error::config(format!(
                "task `{task_id}` is {}, targets are {}",
                task.task_type,
                targets.task_type()
            )));
        }
        let depth = self.config.decoder.depth;
        let layers = supervised_layers(task.task_type, depth);
        let out = self.forward(task_id, batch, fmode, Some(&layers))?;
        let ctx = LossContext {
            weights,
            id_classifier: self.id_classifiers.get(task_id),
        };
        auxiliary_apply(depth, &out.units, targets, ctx)
    }

    /// A model with the same structure whose parameters are fresh copies.
    pub fn deep_clone(&self) -> Result<Self> {
        let store = self.store.deep_clone()?;
        let mut m = Self::from_store(&self.config, &self.tasks, self.mode, store)?;
        for (task, n) in self.id_classifier_sizes() {
            m.add_id_classifier(&task, n, 0)?;
        }
        Ok(m)
    }
}

/// Parameter accounting in the layout of a four-row table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamShareReport {
    pub encoder: usize,
    pub decoder: usize,
    pub interpreter: usize,
    pub queries: usize,
    /// Everything except training-only heads.
    pub total: usize,
    pub task_agnostic: usize,
    /// `task_agnostic / total`; 1 for a model without parameters.
    pub ratio: f64,
}

impl ParamShareReport {
    pub fn from_specs(specs: &[ParamSpec]) -> Self {
        let sum = |pred: &dyn Fn(&str) -> bool| -> usize {
            specs.iter().filter(|s| pred(&s.name)).map(ParamSpec::numel).sum()
        };
        let encoder = params::count_prefix(specs, "encoder.");
        let decoder = sum(&|n| n.starts_with("decoder.") || n.starts_with("decoder@"));
        let interpreter = sum(&|n| n.starts_with("interpreter.") || n.starts_with("interpreter@"));
        let queries = params::count_prefix(specs, "queries.");
        let total = sum(&|n| !n.starts_with("aux."));
        let task_agnostic = total - queries;
        ParamShareReport {
            encoder,
            decoder,
            interpreter,
            queries,
            total,
            task_agnostic,
            ratio: if total == 0 { 1.0 } else { task_agnostic as f64 / total as f64 },
        }
    }
}

pub fn param_share_report(model: &Model) -> ParamShareReport {
    ParamShareReport::from_specs(&store_specs(model.store()))
}

/// Name and shape of every stored parameter.
pub fn store_specs(store: &ParamStore) -> Vec<ParamSpec> {
    store
        .iter()
        .map(|(n, v)| ParamSpec {
            name: n.to_string(),
            shape: v.dims().to_vec(),
            init: params::Init::Zeros,
        })
        .collect()
}

/// A mask mode resolved against concrete parameter names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableMask {
    pub mode: MaskMode,
    pub names: BTreeSet<String>,
}

impl TrainableMask {
    /// Resolves `mode` for the tasks in `targets`. Prompt modes also admit
    /// the targets' training-only heads.
    pub fn resolve(
        mode: MaskMode,
        specs: &[ParamSpec],
        tasks: &[TaskDescriptor],
        sharing: SharingMode,
        targets: &[String],
    ) -> Result<Self> {
        let mut names = BTreeSet::new();
        if mode == MaskMode::Full {
            names.extend(specs.iter().map(|s| s.name.clone()));
            return Ok(TrainableMask { mode, names });
        }
        if targets.is_empty() {
            return Err(Error::config("prompt tuning needs at least one target task"));
        }
        for id in targets {
            let desc = tasks
                .iter()
                .find(|t| &t.task_id == id)
                .ok_or_else(|| Error::config(format!("unknown prompt-tuning task `{id}`")))?;
            if mode == MaskMode::PromptDeep && desc.deep_prompt_tokens == 0 {
                return Err(Error::config(format!(
                    "deep prompt tuning of `{id}` needs deep_prompt_tokens > 0"
                )));
            }
            let qp = format!("queries.{id}.");
            let aux = format!("aux.{id}.");
            let dec = format!("{}.", sharing.decoder_prefix(desc));
            for s in specs {
                let n = s.name.as_str();
                let allowed = if let Some(rest) = n.strip_prefix(&qp) {
                    mode == MaskMode::PromptDeep || !rest.starts_with("prompt")
                } else if n.starts_with(&aux) {
                    true
                } else if let Some(rest) = n.strip_prefix(&dec) {
                    mode == MaskMode::PromptDeep && is_norm_param(rest)
                } else {
                    false
                };
                if allowed {
                    names.insert(s.name.clone());
                }
            }
        }
        Ok(TrainableMask { mode, names })
    }

    pub fn for_model(model: &Model, mode: MaskMode, targets: &[String]) -> Result<Self> {
        Self::resolve(mode, &store_specs(model.store()), model.tasks(), model.mode(), targets)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }
}

/// Decoder LayerNorm parameters: `norm.*` or `block{i}.norm{j}.*`.
fn is_norm_param(rest: &str) -> bool {
    let mut parts = rest.split('.');
    match (parts.next(), parts.next()) {
        (Some("norm"), _) => true,
        (Some(b), Some(n)) => b.starts_with("block") && n.starts_with("norm"),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub learnable: usize,
    /// All parameters except training-only heads.
    pub total: usize,
    pub ratio: f64,
}

/// Share of model parameters the mask lets the optimizer update.
/// Training-only heads count toward neither side.
pub fn trainable_mask_report(specs: &[ParamSpec], mask: &TrainableMask) -> MaskReport {
    let model: Vec<&ParamSpec> = specs.iter().filter(|s| !s.name.starts_with("aux.")).collect();
    let total: usize = model.iter().map(|s| s.numel()).sum();
    let learnable: usize = model
        .iter()
        .filter(|s| mask.contains(&s.name))
        .map(|s| s.numel())
        .sum();
    MaskReport {
        learnable,
        total,
        ratio: if total == 0 { 1.0 } else { learnable as f64 / total as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskType;

    fn six_tasks() -> Vec<TaskDescriptor> {
        vec![
            TaskDescriptor::new("market", TaskType::Reid, 6),
            TaskDescriptor::new("peta", TaskType::Par, 35),
            TaskDescriptor::new("atr", TaskType::Seg, 18),
            TaskDescriptor::new("coco", TaskType::Pose, 17),
            TaskDescriptor::new("mpii", TaskType::Pose, 16),
            TaskDescriptor::new("crowd", TaskType::PedDet, 100),
        ]
    }

    #[test]
    fn paper_accounting() {
        let specs = declare_model(&ModelConfig::paper(), &six_tasks(), SharingMode::Baseline).unwrap();
        let r = ParamShareReport::from_specs(&specs);
        assert!((r.encoder as f64 - 91.1e6).abs() / 91.1e6 <= 0.02);
        assert!((r.decoder as f64 - 14.5e6).abs() / 14.5e6 <= 0.03);
        assert!((r.interpreter as f64 - 3.5e6).abs() / 3.5e6 <= 0.05);
        assert!((r.total as f64 - 109.1e6).abs() / 109.1e6 <= 0.03);
        assert!(r.ratio >= 0.999, "ratio {}", r.ratio);
    }

    #[test]
    fn sharing_modes_are_ordered() {
        let cfg = ModelConfig::paper();
        let tasks = six_tasks();
        let totals: Vec<usize> = SharingMode::ALL
            .iter()
            .map(|&m| ParamShareReport::from_specs(&declare_model(&cfg, &tasks, m).unwrap()).total)
            .collect();
        assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
    }

    #[test]
    fn empty_task_list_is_fully_shared() {
        let specs = declare_model(&ModelConfig::toy(), &[], SharingMode::Baseline).unwrap();
        assert_eq!(ParamShareReport::from_specs(&specs).ratio, 1.0);
    }

    #[test]
    fn toy_single_task_ratio_by_hand() {
        let cfg = ModelConfig::toy();
        let task = TaskDescriptor::new("p", TaskType::Par, 5);
        let specs = declare_model(&cfg, &[task.clone()], SharingMode::Baseline).unwrap();
        let r = ParamShareReport::from_specs(&specs);
        let c = cfg.decoder.width;
        assert_eq!(r.queries, 2 * 5 * c);
        let mask = TrainableMask::resolve(
            MaskMode::PromptQueries,
            &specs,
            &[task],
            SharingMode::Baseline,
            &["p".into()],
        )
        .unwrap();
        let m = trainable_mask_report(&specs, &mask);
        assert_eq!(m.learnable, 2 * 5 * c);
        let full = TrainableMask::resolve(MaskMode::Full, &specs, &[], SharingMode::Baseline, &[]).unwrap();
        assert_eq!(trainable_mask_report(&specs, &full).ratio, 1.0);
    }

    #[test]
    fn mode_names_parse() {
        assert_eq!("per-task-type".parse::<SharingMode>().unwrap(), SharingMode::PerTaskType);
        assert_eq!("prompt_deep".parse::<MaskMode>().unwrap(), MaskMode::PromptDeep);
        assert!("nope".parse::<MaskMode>().is_err());
    }
}
