//! Joint multi-dataset training: loss weighting, schedule, sharing-mode
//! model construction, trainable masks, the optimizer step and
//! checkpoints.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod optim;
pub mod plan;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

pub use checkpoint::{atomic_write, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use data::{batch_indices, PreparedDataset};
pub use model::{
    declare_model, param_share_report, store_specs, trainable_mask_report, MaskMode, MaskReport,
    Model, ModelConfig, ModelOutput, ParamShareReport, SharingMode, TrainableMask,
};
pub use optim::Adafactor;
pub use plan::{
    compute_loss_weights, layer_decay_scale, loss_weight_products, lr_at, OptimizerConfig,
    PlanDataset, SampleWeights, TrainPlan,
};

use crate::encoder::{ForwardMode, ImageBatch};
use crate::error::{Error, Result};
use crate::objectives::TaskTargets;
use crate::task::TaskType;

/// Anchors stay inside this range so their inverse sigmoid is defined.
pub const ANCHOR_CLAMP: (f64, f64) = (1e-4, 1.0 - 1e-4);

/// One dataset's batch for one step.
#[derive(Debug, Clone)]
pub struct DatasetBatch {
    pub dataset: String,
    pub images: ImageBatch,
    pub targets: TaskTargets,
}

impl DatasetBatch {
    /// Rows `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<DatasetBatch> {
        let rows = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(0, start, len)?) };
        let opt_rows = |t: &Option<Tensor>| -> Result<Option<Tensor>> { t.as_ref().map(rows).transpose() };
        let targets = match &self.targets {
            TaskTargets::Reid { identities } => TaskTargets::Reid {
                identities: identities[start..start + len].to_vec(),
            },
            TaskTargets::Par { labels, ratios } => TaskTargets::Par {
                labels: rows(labels)?,
                ratios: ratios.clone(),
            },
            TaskTargets::Seg {
                masks,
                presence,
                presence_ratios,
                valid,
            } => TaskTargets::Seg {
                masks: rows(masks)?,
                presence: rows(presence)?,
                presence_ratios: presence_ratios.clone(),
                valid: opt_rows(valid)?,
            },
            TaskTargets::Pose {
                heatmaps,
                visible,
                visibility_ratios,
                valid,
            } => TaskTargets::Pose {
                heatmaps: rows(heatmaps)?,
                visible: rows(visible)?,
                visibility_ratios: visibility_ratios.clone(),
                valid: opt_rows(valid)?,
            },
            TaskTargets::Det { boxes } => TaskTargets::Det {
                boxes: boxes[start..start + len].to_vec(),
            },
        };
        Ok(DatasetBatch {
            dataset: self.dataset.clone(),
            images: self.images.slice(start, len)?,
            targets,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStepLog {
    pub weight: f64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    /// `Σ_D w_D L_D`.
    pub total: f64,
    pub datasets: BTreeMap<String, DatasetStepLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Line-delimited JSON metric records.
pub struct MetricLog {
    out: BufWriter<File>,
}

impl MetricLog {
    /// Appends to `path`, creating it if needed.
    pub fn open(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricLog {
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("metric log", e))
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Whether decoupled weight decay applies: weight matrices only, never
/// queries, anchors, prompts, positional tables, biases or norms.
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && name.ends_with(".weight")
}

/// Model, plan, optimizer state and step counter of one run.
pub struct Trainer {
    model: Model,
    plan: TrainPlan,
    mask: TrainableMask,
    optimizer: Adafactor,
    loss_weights: BTreeMap<String, f64>,
    /// `(name, var, layer-decay multiplier, weight decay)` of trainable parameters.
    trainable: Vec<(String, Var, f64, f64)>,
    step: u64,
}

impl Trainer {
    /// `targets` are the tasks prompt-tuning masks open up; ignored in full mode.
    pub fn new(model: Model, plan: TrainPlan, targets: &[String]) -> Result<Self> {
        plan.validate()?;
        let enc = &model.config().encoder;
        if (enc.drop_path_rate - plan.drop_path).abs() > 0.0 {
            return Err(Error::config(format!(
                "plan drop-path {} differs from the encoder's {}",
                plan.drop_path, enc.drop_path_rate
            )));
        }
        if plan.sharing_mode != model.mode() {
            return Err(Error::config(format!(
                "plan sharing mode {} differs from the model's {}",
                plan.sharing_mode,
                model.mode()
            )));
        }
        for d in &plan.datasets {
            let t = model.task(&d.task_id)?;
            if t.task_type != d.task_type {
                return Err(Error::config(format!(
                    "dataset `{}` is {}, its task `{}` is {}",
                    d.id, d.task_type, d.task_id, t.task_type
                )));
            }
            if t.task_type == TaskType::Reid && model.id_classifier(&d.task_id).is_none() {
                return Err(Error::config(format!(
                    "re-identification task `{}` has no ID classifier",
                    d.task_id
                )));
            }
        }
        let loss_weights = compute_loss_weights(&plan)?;
        let mask = TrainableMask::for_model(&model, plan.mask_mode, targets)?;
        let depth = enc.depth;
        let mut trainable = Vec::new();
        for (name, var) in model.store().iter() {
            if mask.contains(name) {
                let scale = layer_decay_scale(name, depth, plan.layer_decay)?;
                let wd = if decays(name, var.rank()) { plan.weight_decay } else { 0.0 };
                trainable.push((name.to_string(), var.clone(), scale, wd));
            }
        }
        Ok(Trainer {
            optimizer: Adafactor::new(plan.optimizer),
            model,
            plan,
            mask,
            loss_weights,
            trainable,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn mask(&self) -> &TrainableMask {
        &self.mask
    }

    pub fn loss_weights(&self) -> &BTreeMap<String, f64> {
        &self.loss_weights
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &Adafactor {
        &self.optimizer
    }

    /// Restores the step counter and optimizer state of a checkpoint.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.optimizer.load_state(ckpt.meta.step, &ckpt.optimizer)?;
        self.step = ckpt.meta.step;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.model,
            Some(&self.plan),
            self.step,
            self.plan.seed,
            Some(&self.optimizer),
        )
    }

    /// Per-sample drop-path seeds for step `step`, dataset `d`, rows
    /// `start..start + len`: independent of how the batch is split.
    fn drop_seeds(&self, step: u64, d: usize, start: usize, len: usize) -> Vec<u64> {
        (start..start + len)
            .map(|i| mix(mix(mix(self.plan.seed, step), d as u64), i as u64))
            .collect()
    }

    /// The batch for dataset `d` at the next step, drawn from `data`.
    pub fn next_batch(&self, d: usize, data: &PreparedDataset) -> Result<DatasetBatch> {
        let pd = &self.plan.datasets[d];
        let idx = batch_indices(data, pd.batch_size, self.plan.seed, d, self.step + 1);
        let patch = self.model.config().encoder.patch_size;
        let (images, targets) = data.batch(&idx, patch, self.model.store().dtype())?;
        Ok(DatasetBatch {
            dataset: pd.id.clone(),
            images,
            targets,
        })
    }

    /// One optimizer update from one batch per plan dataset.
    pub fn train_step(&mut self, batches: &[DatasetBatch]) -> Result<StepMetrics> {
        let t = self.step + 1;
        if batches.len() != self.plan.datasets.len() {
            return Err(Error::config(format!(
                "{} batches for {} plan datasets",
                batches.len(),
                self.plan.datasets.len()
            )));
        }
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut logs = BTreeMap::new();
        let mut warnings = Vec::new();
        let mut total = 0.0;
        for (d, pd) in self.plan.datasets.iter().enumerate() {
            let batch = batches
                .iter()
                .find(|b| b.dataset == pd.id)
                .ok_or_else(|| Error::config(format!("no batch for dataset `{}`", pd.id)))?;
            let w = self.loss_weights[&pd.id];
            let b = batch.images.len();
            let chunks = if pd.task_type == TaskType::PedDet {
                self.plan.det_micro_batches.min(b)
            } else {
                1
            };
            let mut value = 0.0;
            let mut terms: BTreeMap<String, f64> = BTreeMap::new();
            let mut start = 0;
            for c in 0..chunks {
                let len = b / chunks + usize::from(c < b % chunks);
                let part = if chunks == 1 { batch.clone() } else { batch.slice(start, len)? };
                let mode = ForwardMode::train(self.drop_seeds(t, d, start, len));
                let loss = self
                    .model
                    .loss(&pd.task_id, &part.images, &part.targets, &mode, &self.plan.loss)
                    .map_err(|e| match e {
                        Error::NonFinite { .. } => Error::Diverged {
                            step: t,
                            detail: format!("{}: {e}", pd.id),
                        },
                        other => other,
                    })?;
                let frac = len as f64 / b as f64;
                let v = loss.value()?;
                value += frac * v;
                for (k, x) in &loss.terms {
                    *terms.entry(k.clone()).or_insert(0.0) += frac * x;
                }
                warnings.extend(loss.warnings.iter().map(|m| format!("{}: {m}", pd.id)));
                if v.is_finite() {
                    let g = (loss.total * (w * frac))?.backward()?;
                    for (name, var, _, _) in &self.trainable {
                        if let Some(gi) = g.get(var.as_tensor()) {
                            let gi = gi.detach();
                            let acc = match grads.remove(name) {
                                Some(a) => (a + gi)?,
                                None => gi,
                            };
                            grads.insert(name.clone(), acc);
                        }
                    }
                }
                start += len;
            }
            total += w * value;
            logs.insert(pd.id.clone(), DatasetStepLog { weight: w, loss: value, terms });
        }
        if !total.is_finite() {
            let dump = logs
                .iter()
                .map(|(k, l)| format!("{k}={} (w={})", l.loss, l.weight))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::Diverged {
                step: t,
                detail: format!("non-finite total loss; per-dataset losses: {dump}"),
            });
        }
        let mut sq = 0.0;
        for g in grads.values() {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: t,
                detail: "non-finite gradient norm".into(),
            });
        }
        let lr = lr_at(t, &self.plan);
        self.optimizer.begin_step();
        for (name, var, scale, wd) in &self.trainable {
            let Some(g) = grads.get(name) else { continue };
            self.optimizer.update(name, var, g, lr * scale, *wd)?;
            if name.ends_with(".anchors") {
                var.set(&var.as_tensor().clamp(ANCHOR_CLAMP.0, ANCHOR_CLAMP.1)?)?;
            }
        }
        self.step = t;
        Ok(StepMetrics {
            step: t,
            lr,
            grad_norm,
            total,
            datasets: logs,
            warnings,
        })
    }

    /// Runs `steps` updates drawing batches from `data` (one entry per plan
    /// dataset, same order).
    pub fn run(
        &mut self,
        data: &[PreparedDataset],
        steps: u64,
        mut log: Option<&mut MetricLog>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<()> {
        if data.len() != self.plan.datasets.len() {
            return Err(Error::config("one prepared dataset per plan dataset is required"));
        }
        for _ in 0..steps {
            let batches = data
                .iter()
                .enumerate()
                .map(|(d, ds)| self.next_batch(d, ds))
                .collect::<Result<Vec<_>>>()?;
            let m = self.train_step(&batches)?;
            if let Some(l) = log.as_deref_mut() {
                l.write(&m)?;
            }
            on_step(&m);
        }
        Ok(())
    }
}
