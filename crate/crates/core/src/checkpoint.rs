//! Versioned checkpoint archives.
//!
//! One safetensors file per checkpoint. Tensor names:
//! * `param/<key>`: generator (`level{l}.…`) and discriminator (`disc.…`) parameters;
//! * `adam_g/m.<key>`, `adam_g/v.<key>`, `adam_d/…`: optimizer moments.
//!
//! Everything else (config, counters, alternation state) is JSON under the `meta` metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::trainer::AlternationState;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub fingerprint: String,
    /// Epochs fully completed.
    pub epoch: usize,
    /// Batches consumed so far.
    pub global_step: u64,
    pub alternation: AlternationState,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
    /// Set on checkpoints written when training aborted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam_g: BTreeMap<String, Tensor>,
    pub adam_d: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn write(
        path: &Path,
        meta: &CheckpointMeta,
        stores: &[&ParamStore],
        adam_g: &Adam,
        adam_d: Option<&Adam>,
    ) -> Result<()> {
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for store in stores {
            for (k, v) in store.iter() {
                named.push((format!("param/{k}"), v.as_tensor().clone()));
            }
        }
        for (k, t) in adam_g.export().1 {
            named.push((format!("adam_g/{k}"), t));
        }
        if let Some(d) = adam_d {
            for (k, t) in d.export().1 {
                named.push((format!("adam_d/{k}"), t));
            }
        }
        let mut md = HashMap::new();
        md.insert("meta".to_string(), serde_json::to_string(meta)?);
        let tmp = path.with_extension("partial");
        safetensors::serialize_to_file(named.iter().map(|(k, t)| (k.as_str(), t)), Some(md), &tmp).map_err(
            |e| match e {
                safetensors::SafeTensorError::IoError(io) => Error::io(&tmp, io),
                other => Error::Format(other.to_string()),
            },
        )?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get("meta"))
            .ok_or_else(|| Error::Format(format!("{}: not a checkpoint (no meta)", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                path.display(),
                meta.format_version
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut params = None::<ParamStore>;
        let mut adam_g = BTreeMap::new();
        let mut adam_d = BTreeMap::new();
        let mut sorted: Vec<_> = tensors.into_iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, t) in sorted {
            if let Some(k) = name.strip_prefix("param/") {
                params.get_or_insert_with(|| ParamStore::new(t.dtype())).insert(k, &t)?;
            } else if let Some(k) = name.strip_prefix("adam_g/") {
                adam_g.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("adam_d/") {
                adam_d.insert(k.to_string(), t);
            } else {
                return Err(Error::Format(format!("{}: unexpected tensor {name}", path.display())));
            }
        }
        let params = params.ok_or_else(|| Error::Format(format!("{}: checkpoint has no parameters", path.display())))?;
        Ok(Self {
            meta,
            params,
            adam_g,
            adam_d,
        })
    }

    /// Parameters whose keys start with `prefix` (or do not, with `exclude`), as a separate store.
    pub fn split_params(&self, prefix: &str, exclude: bool) -> Result<ParamStore> {
        let mut out = ParamStore::new(self.params.dtype());
        for (k, v) in self.params.iter() {
            if k.starts_with(prefix) != exclude {
                out.insert(k.clone(), v.as_tensor())?;
            }
        }
        Ok(out)
    }
}
