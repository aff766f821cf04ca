use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig, SharingMode};
use super::optim::Adafactor;
use super::plan::TrainPlan;
use crate::error::{Error, Result};
use crate::task::TaskDescriptor;

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "unihcp";
const OPTIM_PREFIX: &str = "optim/";

/// Everything needed to rebuild a model and resume its run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    /// Base seed of the run; per-step streams derive from `(seed, step)`.
    pub rng_seed: u64,
    pub model: ModelConfig,
    pub sharing_mode: SharingMode,
    pub tasks: Vec<TaskDescriptor>,
    pub id_classifiers: BTreeMap<String, usize>,
    pub plan: Option<TrainPlan>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn from_view(name: &str, v: &TensorView<'_>) -> Result<Tensor> {
    let dtype = match v.dtype() {
        Dtype::F32 => DType::F32,
        Dtype::F64 => DType::F64,
        other => {
            return Err(Error::Checkpoint(format!("tensor `{name}` has unsupported dtype {other:?}")))
        }
    };
    Ok(Tensor::from_raw_buffer(v.data(), dtype, v.shape(), &Device::Cpu)?)
}

/// Writes through a temporary file in the target directory and renames it
/// into place; on any failure the previous file is left untouched.
pub fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    write(tmp.as_file_mut()).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    plan: Option<&TrainPlan>,
    step: u64,
    rng_seed: u64,
    optimizer: Option<&Adafactor>,
) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        step,
        rng_seed,
        model: model.config().clone(),
        sharing_mode: model.mode(),
        tasks: model.tasks().to_vec(),
        id_classifiers: model.id_classifier_sizes(),
        plan: plan.cloned(),
    };
    let mut named: Vec<(String, Tensor)> = model
        .store()
        .iter()
        .map(|(n, v)| (n.to_string(), v.as_tensor().clone()))
        .collect();
    if let Some(opt) = optimizer {
        named.extend(
            opt.state_tensors()
                .into_iter()
                .map(|(n, t)| (format!("{OPTIM_PREFIX}{n}"), t)),
        );
    }
    let encoded: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = named
        .iter()
        .map(|(n, t)| {
            let (dt, bytes) = to_bytes(t)?;
            Ok((n.clone(), dt, t.dims().to_vec(), bytes))
        })
        .collect::<Result<_>>()?;
    let views = encoded
        .iter()
        .map(|(n, dt, shape, bytes)| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut header = HashMap::new();
    header.insert(META_KEY.to_string(), serde_json::to_string(&meta)?);
    let bytes = safetensors::tensor::serialize(views, Some(header))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    atomic_write(path, |w| w.write_all(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |e: safetensors::SafeTensorError| {
        Error::Checkpoint(format!("{}: corrupt checkpoint: {e}", path.display()))
    };
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(corrupt)?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata header", path.display())))?;
    let version: serde_json::Value = serde_json::from_str(raw)?;
    let found = version.get("format_version").and_then(|v| v.as_u64());
    if found != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{}: format version {found:?}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let meta: CheckpointMeta = serde_json::from_str(raw)
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    let st = SafeTensors::deserialize(&bytes).map_err(corrupt)?;
    let mut params = BTreeMap::new();
    let mut optimizer = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = from_view(&name, &view)?;
        match name.strip_prefix(OPTIM_PREFIX) {
            Some(rest) => optimizer.insert(rest.to_string(), t),
            None => params.insert(name, t),
        };
    }
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}

impl Checkpoint {
    /// Rebuilds the stored model.
    pub fn to_model(&self) -> Result<Model> {
        let m = &self.meta;
        let dtype = self
            .params
            .values()
            .next()
            .map(Tensor::dtype)
            .unwrap_or(DType::F32);
        let mut model = Model::build(&m.model, &m.tasks, m.sharing_mode, 0, dtype)?;
        for (task, n) in &m.id_classifiers {
            model.add_id_classifier(task, *n, 0)?;
        }
        self.apply_to(&model, |_| false)?;
        Ok(model)
    }

    /// Copies stored values into `model`. Every model parameter must be
    /// present unless `may_be_missing` admits it; stored names the model
    /// lacks are errors.
    pub fn apply_to(&self, model: &Model, may_be_missing: impl Fn(&str) -> bool) -> Result<()> {
        let store = model.store();
        for name in self.params.keys() {
            if !store.contains(name) {
                return Err(Error::Checkpoint(format!("checkpoint parameter `{name}` not in model")));
            }
        }
        for name in store.names() {
            match self.params.get(name) {
                Some(t) => store
                    .set(name, t)
                    .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?,
                None if may_be_missing(name) => {}
                None => return Err(Error::Checkpoint(format!("checkpoint lacks parameter `{name}`"))),
            }
        }
        Ok(())
    }
}
