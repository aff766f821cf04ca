//! Operator commands. Configuration precedence: file < environment <
//! flags. Every command writes under `--out` and records what it wrote in
//! `outputs.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{
    prepare_data, prepare_run, reference_tasks, Preset, RunConfig, ENV_DATA_ROOT,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, EvalReport};
use crate::scenegen::{load_dataset, write_dataset, DataFormat, DatasetEntry, DatasetManifest, SceneSpec};
use crate::task::TaskDescriptor;
use crate::trainer::{
    atomic_write, declare_model, load_checkpoint, param_share_report, store_specs,
    trainable_mask_report, Checkpoint, MaskMode, MetricLog, Model, ParamShareReport, SharingMode,
    StepMetrics, Trainer, TrainableMask,
};

/// Samples per dataset of the built-in toy configuration.
pub const TOY_SAMPLES: usize = 16;
pub const OUTPUTS_MANIFEST: &str = "outputs.json";
const FINAL_CHECKPOINT: &str = "checkpoint.safetensors";
const PROGRESS_EVERY: u64 = 50;

#[derive(Debug, Parser)]
#[command(name = "unihcp", version, about = "Unified human-centric perception: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML). Without it the preset's built-in setup is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `paper` or `toy`.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// `baseline`, `per_task_interpreter`, `per_task_type` or `encoder_only`.
    #[arg(long)]
    pub sharing_mode: Option<SharingMode>,
    /// `full`, `prompt_queries` or `prompt_deep`.
    #[arg(long)]
    pub mask_mode: Option<MaskMode>,
    /// Total optimizer steps of the schedule.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic datasets in their on-disk formats.
    GenData(CommonArgs),
    /// Joint training; resumes from `--checkpoint` when given.
    Train(CommonArgs),
    /// Direct evaluation of a checkpoint on every configured dataset.
    Eval(CommonArgs),
    /// Parameter accounting, sharing ratio and prompt-mask ratios.
    InspectParams {
        #[command(flatten)]
        common: CommonArgs,
        /// Account a six-task reference set instead of the configured datasets.
        #[arg(long)]
        reference_tasks: bool,
    },
    /// Tune target-task queries of a checkpoint under a prompt mask.
    PromptTune(CommonArgs),
    /// Collect the artifacts under `--out` into `report.md` and `report.json`.
    ExportReport(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::InspectParams { .. } => "inspect-params",
            Command::PromptTune(_) => "prompt-tune",
            Command::ExportReport(_) => "export-report",
        }
    }

    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::GenData(c)
            | Command::Train(c)
            | Command::Eval(c)
            | Command::PromptTune(c)
            | Command::ExportReport(c) => c,
            Command::InspectParams { common, .. } => common,
        }
    }
}

/// A configuration with every override applied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub cfg: RunConfig,
    /// Relative dataset roots resolve here: the data-root variable, else the
    /// config file's directory, else the working directory.
    pub data_root: PathBuf,
}

pub fn resolve_config(args: &CommonArgs, env: &dyn Fn(&str) -> Option<String>) -> Result<Resolved> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => match args.preset.unwrap_or(Preset::Toy) {
            Preset::Toy => RunConfig::toy_joint(TOY_SAMPLES, 0),
            Preset::Paper => RunConfig::new(Preset::Paper),
        },
    };
    cfg.apply_env(env)?;
    if let Some(p) = args.preset {
        cfg.preset = p;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.steps {
        cfg.train.total_steps = Some(n);
    }
    if let Some(m) = args.sharing_mode {
        cfg.train.sharing_mode = Some(m);
    }
    if let Some(m) = args.mask_mode {
        cfg.train.mask_mode = Some(m);
    }
    cfg.validate()?;
    let data_root = match env(ENV_DATA_ROOT) {
        Some(r) => PathBuf::from(r),
        None => args
            .config
            .as_deref()
            .and_then(Path::parent)
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    Ok(Resolved { cfg, data_root })
}

/// Files written by one command, relative to the output directory.
pub struct Outputs {
    root: PathBuf,
    command: &'static str,
    files: BTreeSet<PathBuf>,
}

impl Outputs {
    pub fn new(root: &Path, command: &'static str) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Outputs {
            root: root.to_path_buf(),
            command,
            files: BTreeSet::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path of `rel`, recorded as an output.
    pub fn path(&mut self, rel: impl AsRef<Path>) -> PathBuf {
        self.files.insert(rel.as_ref().to_path_buf());
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, text: &str) -> Result<()> {
        let p = self.path(rel);
        atomic_write(&p, |w| w.write_all(text.as_bytes()))
    }

    pub fn write_json<T: Serialize>(&mut self, rel: impl AsRef<Path>, v: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        self.write(rel, &text)
    }

    /// Records every file below `rel`.
    pub fn record_tree(&mut self, rel: &Path) -> Result<()> {
        let dir = self.root.join(rel);
        let mut entries: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(&dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let r = rel.join(e.file_name());
            if e.path().is_dir() {
                self.record_tree(&r)?;
            } else {
                self.files.insert(r);
            }
        }
        Ok(())
    }

    /// Merges this command's files into the output manifest.
    pub fn finish(mut self) -> Result<()> {
        let path = self.root.join(OUTPUTS_MANIFEST);
        let mut files: BTreeMap<String, Value> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str::<Value>(&text)
                .ok()
                .and_then(|v| v.get("files").cloned())
                .and_then(|v| serde_json::from_value(v).ok())
                .unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        for rel in std::mem::take(&mut self.files) {
            let abs = self.root.join(&rel);
            let bytes = fs::metadata(&abs).map_err(|e| Error::io(&abs, e))?.len();
            files.insert(
                rel.to_string_lossy().replace('\\', "/"),
                json!({ "command": self.command, "bytes": bytes }),
            );
        }
        let text = serde_json::to_string_pretty(&json!({ "files": files }))? + "\n";
        atomic_write(&path, |w| w.write_all(text.as_bytes()))
    }
}

fn config_json(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).unwrap_or(Value::Null)
}

/// Parses `args`, runs the command and maps the outcome to an exit code:
/// 0 success, 1 invalid input, 2 runtime or numeric failure.
pub fn main_with<I, T>(args: I, env: &dyn Fn(&str) -> Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(cmd: &Command, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
    let r = resolve_config(cmd.common(), env)?;
    let mut outs = Outputs::new(&cmd.common().out, cmd.name())?;
    outs.write(format!("config.{}.toml", cmd.name()), &r.cfg.to_toml()?)?;
    match cmd {
        Command::GenData(_) => cmd_gen_data(&r, &mut outs)?,
        Command::Train(a) => cmd_train(&r, a, &mut outs)?,
        Command::Eval(a) => cmd_eval(&r, a, &mut outs)?,
        Command::InspectParams { reference_tasks, .. } => cmd_inspect_params(&r, *reference_tasks, &mut outs)?,
        Command::PromptTune(a) => cmd_prompt_tune(&r, a, &mut outs)?,
        Command::ExportReport(_) => cmd_export_report(&r, &mut outs)?,
    }
    outs.finish()
}

/// Writes every synthetic dataset of the config under `data/<id>` in the
/// loader format of its task type, plus `datasets.toml` and a `run.toml`
/// that trains on the written files.
pub fn cmd_gen_data(r: &Resolved, outs: &mut Outputs) -> Result<()> {
    let cfg = &r.cfg;
    if cfg.datasets.is_empty() {
        return Err(Error::config("no datasets configured"));
    }
    let mut entries = Vec::new();
    for e in &cfg.datasets {
        if e.format != DataFormat::Synthetic {
            return Err(Error::config(format!(
                "gen-data writes synthetic datasets; `{}` is {:?}",
                e.id, e.format
            )));
        }
        let format = DataFormat::for_task(e.task_type);
        let rel = PathBuf::from("data").join(&e.id);
        let dir = outs.root().join(&rel);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
        }
        let spec = SceneSpec::toy(e.seed.unwrap_or(cfg.seed));
        let n = write_dataset(&dir, format, &spec, e.samples.unwrap_or(0))?;
        outs.record_tree(&rel)?;
        let entry = DatasetEntry {
            format,
            root: rel,
            samples: None,
            seed: None,
            ..e.clone()
        };
        let loaded = load_dataset(&entry, outs.root())?;
        if loaded.skipped > 0 || loaded.samples.is_empty() {
            return Err(Error::Domain(format!(
                "dataset `{}` does not reload cleanly: {} samples, {} skipped",
                e.id,
                loaded.samples.len(),
                loaded.skipped
            )));
        }
        println!("{:<16} {:<26} {n:>5} records -> {}", e.id, format!("{format:?}"), entry.root.display());
        entries.push(entry);
    }
    let manifest = DatasetManifest { datasets: entries };
    outs.write("datasets.toml", &manifest.to_toml()?)?;
    let mut run = cfg.clone();
    run.datasets.clear();
    run.manifests = vec![PathBuf::from("datasets.toml")];
    outs.write("run.toml", &run.to_toml()?)?;
    Ok(())
}

fn print_step(m: &StepMetrics, total: u64) {
    if m.step % PROGRESS_EVERY == 0 || m.step == total {
        let parts: Vec<String> = m.datasets.iter().map(|(k, d)| format!("{k}={:.4}", d.loss)).collect();
        eprintln!(
            "step {:>6}/{total} lr {:.3e} loss {:.5} | {}",
            m.step,
            m.lr,
            m.total,
            parts.join(" ")
        );
    }
    for w in &m.warnings {
        eprintln!("warning at step {}: {w}", m.step);
    }
}

fn check_resume(ck: &Checkpoint, model: &Model, seed: u64) -> Result<()> {
    let m = &ck.meta;
    if &m.model != model.config() || m.sharing_mode != model.mode() || m.tasks != model.tasks() {
        return Err(Error::Checkpoint(
            "checkpoint model, sharing mode or tasks differ from the configuration".into(),
        ));
    }
    if m.rng_seed != seed {
        return Err(Error::config(format!(
            "checkpoint seed {} differs from the configured seed {seed}",
            m.rng_seed
        )));
    }
    Ok(())
}

/// Joint training. Writes `metrics.jsonl` (one line per step), periodic
/// `checkpoints/step_<n>.safetensors`, the final checkpoint and a summary.
pub fn cmd_train(r: &Resolved, args: &CommonArgs, outs: &mut Outputs) -> Result<()> {
    let cfg = &r.cfg;
    if cfg.datasets.is_empty() {
        return Err(Error::config("no datasets configured"));
    }
    let run = prepare_run(cfg, &r.data_root, DType::F32)?;
    let mut trainer = Trainer::new(run.model, run.plan, &cfg.prompt_targets())?;
    let log_path = outs.path("metrics.jsonl");
    match &args.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            check_resume(&ck, trainer.model(), cfg.seed)?;
            ck.apply_to(trainer.model(), |_| false)?;
            trainer.resume(&ck)?;
        }
        None => {
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            }
        }
    }
    let total = trainer.plan().total_steps;
    if trainer.step() > total {
        return Err(Error::config(format!(
            "checkpoint is at step {}, past the schedule's {total} steps",
            trainer.step()
        )));
    }
    for (id, n) in &run.skipped {
        if *n > 0 {
            eprintln!("warning: {id}: {n} malformed records skipped");
        }
    }
    let every = cfg.train.checkpoint_every.unwrap_or(0);
    let mut log = MetricLog::open(&log_path)?;
    let mut last = None;
    while trainer.step() < total {
        trainer.run(&run.datasets, 1, Some(&mut log), |m| {
            print_step(m, total);
            last = Some(m.clone());
        })?;
        if every > 0 && trainer.step() % every == 0 && trainer.step() < total {
            trainer.save(&outs.path(format!("checkpoints/step_{:06}.safetensors", trainer.step())))?;
        }
    }
    trainer.save(&outs.path(FINAL_CHECKPOINT))?;
    outs.write_json(
        "train_summary.json",
        &json!({
            "final_step": trainer.step(),
            "loss_weights": trainer.loss_weights(),
            "last_step": last,
            "skipped_records": run.skipped,
            "config": config_json(cfg),
        }),
    )?;
    println!("trained to step {total}; checkpoint {}", outs.root().join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn require_checkpoint(args: &CommonArgs, cmd: &str) -> Result<Checkpoint> {
    let p = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config(format!("{cmd} needs --checkpoint")))?;
    load_checkpoint(p)
}

fn print_report(rep: &EvalReport) {
    let m: Vec<String> = rep.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!("{:<16} {:<7} n={:<5} {}", rep.dataset, rep.task_type.as_str(), rep.samples, m.join(" "));
}

/// Direct evaluation: the checkpoint as stored, no tuning.
pub fn cmd_eval(r: &Resolved, args: &CommonArgs, outs: &mut Outputs) -> Result<()> {
    let cfg = &r.cfg;
    let ck = require_checkpoint(args, "eval")?;
    let model = ck.to_model()?;
    let data = prepare_data(cfg, &r.data_root)?;
    let mut reports = Vec::new();
    for (task, ds) in data.tasks.iter().zip(&data.datasets) {
        let stored = model.task(&task.task_id)?;
        if stored.task_type != task.task_type || stored.num_queries != task.num_queries {
            return Err(Error::config(format!(
                "dataset `{}` does not match the checkpoint's task of that name",
                task.task_id
            )));
        }
        let mut rep = evaluate_dataset(&model, ds, cfg.eval_batch)?;
        rep.config = config_json(cfg);
        rep.validate()?;
        print_report(&rep);
        outs.write_json(format!("eval/{}.json", rep.dataset), &rep)?;
        reports.push(rep);
    }
    outs.write_json(
        "eval_summary.json",
        &json!({
            "checkpoint_step": ck.meta.step,
            "reports": reports,
        }),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct MaskRow {
    task: String,
    learnable: usize,
    total: usize,
    ratio: f64,
}

/// Parameter accounting per component and sharing mode, and the learnable
/// share of each prompt mask per target task.
pub fn cmd_inspect_params(r: &Resolved, reference: bool, outs: &mut Outputs) -> Result<()> {
    let cfg = &r.cfg;
    let model_cfg = cfg.model_config();
    let tasks: Vec<TaskDescriptor> = if reference {
        let q = cfg.query_counts();
        reference_tasks()
            .into_iter()
            .map(|mut t| {
                match t.task_type {
                    crate::task::TaskType::Reid => t.num_queries = q.reid,
                    crate::task::TaskType::PedDet => t.num_queries = q.peddet,
                    _ => {}
                }
                t
            })
            .collect()
    } else {
        prepare_data(cfg, &r.data_root)?.tasks
    };
    let sharing = cfg.plan().sharing_mode;
    let specs = declare_model(&model_cfg, &tasks, sharing)?;
    let rep = ParamShareReport::from_specs(&specs);
    let m = |n: usize| n as f64 / 1e6;
    println!("preset {} | sharing {} | {} tasks", cfg.preset, sharing, tasks.len());
    println!("{:<14} {:>12} {:>10}", "component", "params", "M");
    for (name, n) in [
        ("encoder", rep.encoder),
        ("decoder", rep.decoder),
        ("interpreter", rep.interpreter),
        ("queries", rep.queries),
    ] {
        println!("{name:<14} {n:>12} {:>10.3}", m(n));
    }
    println!("{:<14} {:>12} {:>10.3}", "total", rep.total, m(rep.total));
    println!("task-agnostic / total = {:.5}%", 100.0 * rep.ratio);
    let mut modes = Vec::new();
    println!("\n{:<22} {:>12}", "sharing mode", "total");
    for mode in SharingMode::ALL {
        let r = ParamShareReport::from_specs(&declare_model(&model_cfg, &tasks, mode)?);
        println!("{:<22} {:>12}", mode.as_str(), r.total);
        modes.push(json!({ "mode": mode.as_str(), "total": r.total, "ratio": r.ratio }));
    }
    let mut masks: BTreeMap<&str, Vec<MaskRow>> = BTreeMap::new();
    for mode in [MaskMode::PromptQueries, MaskMode::PromptDeep] {
        for t in &tasks {
            let tuned: Vec<TaskDescriptor> = tasks
                .iter()
                .map(|u| {
                    let mut u = u.clone();
                    if mode == MaskMode::PromptDeep && u.task_id == t.task_id {
                        u.deep_prompt_tokens = cfg.prompt.deep_prompt_tokens;
                    }
                    u
                })
                .collect();
            let specs = declare_model(&model_cfg, &tuned, sharing)?;
            let targets = [t.task_id.clone()];
            let mask = TrainableMask::resolve(mode, &specs, &tuned, sharing, &targets)?;
            let mr = trainable_mask_report(&specs, &mask);
            masks.entry(mode.as_str()).or_default().push(MaskRow {
                task: t.task_id.clone(),
                learnable: mr.learnable,
                total: mr.total,
                ratio: mr.ratio,
            });
        }
    }
    for (mode, rows) in &masks {
        println!("\nlearnable share under {mode}");
        for row in rows {
            println!("{:<16} {:>10} / {:>12} = {:.4}%", row.task, row.learnable, row.total, 100.0 * row.ratio);
        }
    }
    outs.write_json(
        "params.json",
        &json!({
            "sharing_mode": sharing.as_str(),
            "tasks": tasks,
            "components": rep,
            "sharing_modes": modes,
            "prompt_masks": masks,
            "config": config_json(cfg),
        }),
    )
}

/// Bit-level fingerprint of every parameter outside the mask.
fn frozen_fingerprint(model: &Model, mask: &TrainableMask) -> Result<u64> {
    let mut h = DefaultHasher::new();
    for (name, var) in model.store().iter() {
        if mask.contains(name) {
            continue;
        }
        name.hash(&mut h);
        let t = var.as_tensor().flatten_all()?;
        match t.dtype() {
            DType::F64 => t.to_vec1::<f64>()?.iter().for_each(|v| v.to_bits().hash(&mut h)),
            _ => t
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| v.to_bits().hash(&mut h)),
        }
    }
    Ok(h.finish())
}

/// Prompt tuning of the configured target datasets on top of a checkpoint.
/// Target tasks absent from the checkpoint start from fresh queries.
pub fn cmd_prompt_tune(r: &Resolved, args: &CommonArgs, outs: &mut Outputs) -> Result<()> {
    let mut cfg = r.cfg.clone();
    let ck = require_checkpoint(args, "prompt-tune")?;
    let mode = match cfg.train.mask_mode.unwrap_or(MaskMode::PromptQueries) {
        MaskMode::Full => return Err(Error::config("prompt-tune needs a prompt mask mode")),
        m => m,
    };
    cfg.train.mask_mode = Some(mode);
    cfg.train.sharing_mode = Some(ck.meta.sharing_mode);
    cfg.train.drop_path = Some(ck.meta.model.encoder.drop_path_rate);
    if cfg.datasets.is_empty() {
        return Err(Error::config("no datasets configured"));
    }
    let targets = cfg.prompt_targets();
    let data = prepare_data(&cfg, &r.data_root)?;
    let mut tasks = ck.meta.tasks.clone();
    for t in &data.tasks {
        let pos = tasks.iter().position(|u| u.task_id == t.task_id);
        match (pos, targets.contains(&t.task_id)) {
            (Some(i), true) => tasks[i] = t.clone(),
            (None, true) => tasks.push(t.clone()),
            (Some(_), false) => {}
            (None, false) => {
                return Err(Error::config(format!(
                    "dataset `{}` is neither a prompt target nor a checkpoint task",
                    t.task_id
                )))
            }
        }
    }
    let mut model = Model::build(&ck.meta.model, &tasks, ck.meta.sharing_mode, cfg.seed, DType::F32)?;
    for (task, n) in &ck.meta.id_classifiers {
        model.add_id_classifier(task, *n, cfg.seed)?;
    }
    for (task, n) in data.identity_counts() {
        if targets.contains(&task) && !ck.meta.id_classifiers.contains_key(&task) {
            model.add_id_classifier(&task, n, cfg.seed)?;
        }
    }
    let fresh: Vec<String> = targets
        .iter()
        .flat_map(|t| [format!("queries.{t}."), format!("aux.{t}.")])
        .collect();
    ck.apply_to(&model, |n| fresh.iter().any(|p| n.starts_with(p)))?;

    let mut plan = cfg.plan();
    plan.datasets.retain(|d| targets.contains(&d.id));
    let datasets: Vec<_> = data.datasets.into_iter().filter(|d| targets.contains(&d.id)).collect();
    let before = datasets
        .iter()
        .map(|d| evaluate_dataset(&model, d, cfg.eval_batch))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(model, plan, &targets)?;
    let fingerprint = frozen_fingerprint(trainer.model(), trainer.mask())?;
    let total = trainer.plan().total_steps;
    let log_path = outs.path("prompt_metrics.jsonl");
    if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut log = MetricLog::open(&log_path)?;
    trainer.run(&datasets, total, Some(&mut log), |m| print_step(m, total))?;
    let frozen_identical = frozen_fingerprint(trainer.model(), trainer.mask())? == fingerprint;
    let share = trainable_mask_report(&store_specs(trainer.model().store()), trainer.mask());
    let after = datasets
        .iter()
        .map(|d| evaluate_dataset(trainer.model(), d, cfg.eval_batch))
        .collect::<Result<Vec<_>>>()?;
    println!(
        "mask {} | learnable {} / {} = {:.4}% | frozen parameters bit-identical: {}",
        mode.as_str(),
        share.learnable,
        share.total,
        100.0 * share.ratio,
        if frozen_identical { "yes" } else { "NO" }
    );
    for (b, a) in before.iter().zip(&after) {
        print!("before ");
        print_report(b);
        print!("after  ");
        print_report(a);
    }
    trainer.save(&outs.path("prompt_tuned.safetensors"))?;
    outs.write_json(
        "prompt_tune.json",
        &json!({
            "mask_mode": mode.as_str(),
            "targets": targets,
            "steps": total,
            "learnable": share.learnable,
            "total": share.total,
            "ratio": share.ratio,
            "frozen_identical": frozen_identical,
            "before": before,
            "after": after,
            "global_params": param_share_report(trainer.model()),
            "config": config_json(&cfg),
        }),
    )?;
    if !frozen_identical {
        return Err(Error::Domain("parameters outside the prompt mask changed".into()));
    }
    Ok(())
}

fn read_json(path: &Path) -> Result<Option<Value>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Gathers evaluation, training, accounting and prompt-tuning artifacts
/// already under the output directory.
pub fn cmd_export_report(r: &Resolved, outs: &mut Outputs) -> Result<()> {
    let root = outs.root().to_path_buf();
    let mut evals: Vec<EvalReport> = Vec::new();
    let eval_dir = root.join("eval");
    if eval_dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&eval_dir)
            .map_err(|e| Error::io(&eval_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let rep: EvalReport = serde_json::from_str(&text)
                .map_err(|e| Error::Malformed { file: p.clone(), record: 0, message: e.to_string() })?;
            evals.push(rep);
        }
    }
    let train = read_json(&root.join("train_summary.json"))?;
    let params = read_json(&root.join("params.json"))?;
    let prompt = read_json(&root.join("prompt_tune.json"))?;
    if evals.is_empty() && train.is_none() && params.is_none() && prompt.is_none() {
        return Err(Error::config(format!("no artifacts to report under {}", root.display())));
    }
    let mut md = String::from("# Run report\n\n");
    if let Some(t) = &train {
        md += &format!("## Training\n\nfinal step: {}\n\n", t["final_step"]);
        if let Some(ds) = t["last_step"]["datasets"].as_object() {
            md += "| dataset | weight | last loss |\n|---|---|---|\n";
            for (k, v) in ds {
                md += &format!("| {k} | {:.3e} | {:.5} |\n", v["weight"].as_f64().unwrap_or(f64::NAN), v["loss"].as_f64().unwrap_or(f64::NAN));
            }
            md += "\n";
        }
    }
    if !evals.is_empty() {
        md += "## Direct evaluation\n\n| dataset | task | samples | metrics |\n|---|---|---|---|\n";
        for e in &evals {
            let m: Vec<String> = e.metrics.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
            md += &format!("| {} | {} | {} | {} |\n", e.dataset, e.task_type.as_str(), e.samples, m.join(", "));
        }
        md += "\n";
    }
    if let Some(p) = &params {
        let c = &p["components"];
        md += "## Parameters\n\n| component | params |\n|---|---|\n";
        for k in ["encoder", "decoder", "interpreter", "queries", "total"] {
            md += &format!("| {k} | {} |\n", c[k]);
        }
        md += &format!("\ntask-agnostic ratio: {:.5}%\n\n", 100.0 * c["ratio"].as_f64().unwrap_or(f64::NAN));
    }
    if let Some(p) = &prompt {
        md += &format!(
            "## Prompt tuning\n\nmask {} over {} steps, learnable share {:.4}%, frozen parameters bit-identical: {}\n\n",
            p["mask_mode"].as_str().unwrap_or("?"),
            p["steps"],
            100.0 * p["ratio"].as_f64().unwrap_or(f64::NAN),
            p["frozen_identical"]
        );
    }
    outs.write("report.md", &md)?;
    outs.write_json(
        "report.json",
        &json!({
            "eval": evals,
            "train": train,
            "params": params,
            "prompt_tune": prompt,
            "config": config_json(&r.cfg),
        }),
    )?;
    print!("{md}");
    Ok(())
}
