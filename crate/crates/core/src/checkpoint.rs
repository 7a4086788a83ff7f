//! Self-contained checkpoints in a safetensors container.
//!
//! Learnable parameters are stored as `F64` under their store names, the
//! frozen backbone as `F32` under `backbone.<layer>`. The metadata block
//! carries the format version, mode, configs, epoch/step, a metric snapshot
//! and the optional NR score-to-MOS map.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::autodiff::ParamStore;
use crate::backbone::{read_f32_tensors, Backbone, BackboneSpec};
use crate::config::{Mode, TrainConfig};
use crate::error::{IqaError, Result};
use crate::evaluator::AffineMap;
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;
const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub mode: Mode,
    pub config: TrainConfig,
    pub model: Model,
    pub epoch: usize,
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Maps a `[1, 5]` NR score onto the training data's MOS scale.
    pub nr_affine: Option<AffineMap>,
}

impl Checkpoint {
    /// Fails with a mode-mismatch error unless this checkpoint was trained
    /// in one of `allowed`.
    pub fn require_mode(&self, allowed: &[Mode]) -> Result<()> {
        if allowed.contains(&self.mode) {
            Ok(())
        } else {
            Err(IqaError::ModeMismatch {
                expected: allowed
                    .iter()
                    .map(Mode::to_string)
                    .collect::<Vec<_>>()
                    .join(" or "),
                found: self.mode.to_string(),
            })
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_checkpoint(path)
    }
}

fn f64_bytes(a: &Array2<f64>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("metadata is serializable")
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let store = &ckpt.model.store;
    let mut buffers: Vec<(String, Vec<usize>, Dtype, Vec<u8>)> = Vec::new();
    let mut order = Vec::new();
    for (_, name, value) in store.iter() {
        order.push(name.to_string());
        buffers.push((
            name.to_string(),
            value.shape().to_vec(),
            Dtype::F64,
            f64_bytes(value),
        ));
    }
    let backbone = ckpt.model.backbone();
    for (name, t) in backbone.raw_tensors() {
        buffers.push((
            format!("{BACKBONE_PREFIX}{name}"),
            t.shape.clone(),
            Dtype::F32,
            f32_bytes(&t.data),
        ));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, dtype, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| IqaError::validation(format!("tensor {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("mode".to_string(), ckpt.mode.to_string());
    meta.insert("train_config".to_string(), json(&ckpt.config));
    meta.insert("model_config".to_string(), json(ckpt.model.config()));
    meta.insert("backbone_spec".to_string(), json(backbone.spec()));
    meta.insert("param_order".to_string(), json(&order));
    meta.insert("epoch".to_string(), ckpt.epoch.to_string());
    meta.insert("step".to_string(), ckpt.step.to_string());
    meta.insert("metrics".to_string(), json(&ckpt.metrics));
    if let Some(a) = &ckpt.nr_affine {
        meta.insert("nr_affine".to_string(), json(a));
    }
    let bytes = safetensors::serialize(views, Some(meta))
        .map_err(|e| IqaError::validation(format!("serializing checkpoint: {e}")))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IqaError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| IqaError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| IqaError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let corrupt = |message: String| IqaError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| IqaError::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| corrupt("missing metadata block".into()))?;
    let get = |key: &str| {
        meta.get(key)
            .ok_or_else(|| corrupt(format!("missing metadata key {key}")))
    };
    let parse_json = |key: &str| -> Result<serde_json::Value> {
        serde_json::from_str(get(key)?).map_err(|e| corrupt(format!("{key}: {e}")))
    };
    fn from_value<T: serde::de::DeserializeOwned>(
        v: serde_json::Value,
        key: &str,
        path: &Path,
    ) -> Result<T> {
        serde_json::from_value(v).map_err(|e| IqaError::Corrupt {
            path: path.to_path_buf(),
            message: format!("{key}: {e}"),
        })
    }

    let version = get("format_version")?.clone();
    if version != FORMAT_VERSION.to_string() {
        return Err(IqaError::Version {
            expected: FORMAT_VERSION.to_string(),
            found: version,
        });
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let mode: Mode = get("mode")?.parse()?;
    let config: TrainConfig = from_value(parse_json("train_config")?, "train_config", path)?;
    let model_config = from_value(parse_json("model_config")?, "model_config", path)?;
    let spec: BackboneSpec = from_value(parse_json("backbone_spec")?, "backbone_spec", path)?;
    let order: Vec<String> = from_value(parse_json("param_order")?, "param_order", path)?;
    let metrics = from_value(parse_json("metrics")?, "metrics", path)?;
    let nr_affine = match meta.get("nr_affine") {
        Some(_) => Some(from_value(parse_json("nr_affine")?, "nr_affine", path)?),
        None => None,
    };
    let epoch = get("epoch")?
        .parse()
        .map_err(|_| corrupt("bad epoch".into()))?;
    let step = get("step")?
        .parse()
        .map_err(|_| corrupt("bad step".into()))?;

    let mut store = ParamStore::new();
    for name in &order {
        let view = st
            .tensor(name)
            .map_err(|e| corrupt(format!("{name}: {e}")))?;
        if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
            return Err(corrupt(format!("parameter {name} is not a 2-D F64 tensor")));
        }
        let values = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = Array2::from_shape_vec((view.shape()[0], view.shape()[1]), values)
            .map_err(|e| corrupt(format!("{name}: {e}")))?;
        store.insert(name.clone(), arr);
    }
    let backbone = Backbone::from_tensors(spec, read_f32_tensors(&st, BACKBONE_PREFIX, path)?)?;
    let model = Model::from_store(Arc::new(backbone), model_config, store)?;
    Ok(Checkpoint {
        mode,
        config,
        model,
        epoch,
        step,
        metrics,
        nr_affine,
    })
}
