//! Single-file model archives in the safetensors container.
//!
//! Tensor names are the parameter-store names (timm layout, `backbone.`
//! prefix for the dual-eye extractor, buffers included). Checkpoints carry
//! a JSON `meta` entry in the header; plain weight exports carry only
//! `format`.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};

use super::{build_model, build_siamese, ModelHandle, ModelSpec, Pretrained, SiameseSpec};
use crate::error::{Error, Result};
use crate::preprocess::NormalizationStats;
use crate::tensor::Tensor;

const CHECKPOINT_FORMAT: &str = "fundus-checkpoint-v1";
const WEIGHTS_FORMAT: &str = "fundus-weights-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub siamese: Option<SiameseSpec>,
    pub normalization: NormalizationStats,
    /// Hex SHA-256 of the resolved training configuration.
    pub config_hash: String,
    pub epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
}

struct F32View<'a>(&'a Tensor);

impl View for F32View<'_> {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Owned(self.0.data().iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn data_len(&self) -> usize {
        self.0.numel() * 4
    }
}

fn write(model: &ModelHandle, header: HashMap<String, String>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let items = model
        .store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), F32View(&e.tensor)));
    let bytes = safetensors::serialize(items, Some(header)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(model: &ModelHandle, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let json = serde_json::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("meta".to_string(), json),
    ]);
    write(model, header, path)
}

/// Writes only the named tensors, for use by other runtimes.
pub fn export_weights(model: &ModelHandle, path: &Path) -> Result<()> {
    write(model, HashMap::from([("format".to_string(), WEIGHTS_FORMAT.to_string())]), path)
}

fn parse(bytes: &[u8]) -> Result<(HashMap<String, Tensor>, Option<HashMap<String, String>>)> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor `{name}` is {:?}, expected F32", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, Tensor::new(view.shape().to_vec(), data));
    }
    Ok((out, header.metadata().clone()))
}

/// All tensors of a safetensors file, by name.
pub(crate) fn read_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&bytes)?.0)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelHandle, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tensors, header) = parse(&bytes)?;
    let header = header.unwrap_or_default();
    if header.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
    }
    let meta: CheckpointMeta = serde_json::from_str(
        header
            .get("meta")
            .ok_or_else(|| Error::Checkpoint("checkpoint header lacks `meta`".into()))?,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = match &meta.siamese {
        Some(s) => build_siamese(s, &Pretrained::Random, 0)?,
        None => build_model(&meta.spec, &Pretrained::Random, 0)?,
    };
    let names: Vec<String> = model.store.entries().iter().map(|e| e.name.clone()).collect();
    if names.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            names.len()
        )));
    }
    for name in names {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor `{name}`")))?;
        model.store.assign(&name, t.clone())?;
    }
    model.set_regime(meta.spec.regime);
    Ok((model, meta))
}
