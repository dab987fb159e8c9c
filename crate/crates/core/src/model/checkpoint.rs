use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DataDims, GmrlModel, ModelConfig};
use crate::data::NormStats;
use crate::error::{GmrlError, Result};
use crate::tensor::snapshot;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON manifest stored at `<checkpoint>.json` next to the parameter
/// snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    pub dims: DataDims,
    pub seed: u64,
    pub norm: NormStats,
    pub location_ids: Vec<String>,
    pub source_ids: Vec<String>,
    pub params: Vec<ParamEntry>,
    /// Free-form run metadata (training settings, best epoch, ...).
    #[serde(default)]
    pub extra: Value,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, model: &GmrlModel, manifest: &Manifest) -> Result<()> {
    let entries: Vec<(&str, &crate::tensor::Tensor)> =
        model.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    snapshot::write(path, &entries)?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    std::fs::write(&mpath, text).map_err(|e| GmrlError::io(&mpath, e))
}

impl Manifest {
    pub fn for_model(
        model: &GmrlModel,
        seed: u64,
        norm: NormStats,
        location_ids: Vec<String>,
        source_ids: Vec<String>,
        extra: Value,
    ) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            model: model.cfg.clone(),
            dims: model.dims,
            seed,
            norm,
            location_ids,
            source_ids,
            params: model
                .params
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.dims().to_vec(),
                })
                .collect(),
            extra,
        }
    }
}

/// Rebuilds the model described by the manifest and fills in every
/// parameter from the snapshot.
pub fn load_checkpoint(path: &Path) -> Result<(GmrlModel, Manifest)> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| GmrlError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(GmrlError::Data(format!(
            "{}: manifest version {} is not supported",
            mpath.display(),
            manifest.version
        )));
    }
    let mut model = GmrlModel::new(manifest.model.clone(), manifest.dims, manifest.seed)?;
    let entries = snapshot::read(path)?;
    let expected: BTreeSet<&str> = model.params.iter().map(|(_, p)| p.name.as_str()).collect();
    let found: BTreeSet<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    if expected != found {
        let missing: Vec<_> = expected.difference(&found).collect();
        let unknown: Vec<_> = found.difference(&expected).collect();
        return Err(GmrlError::Data(format!(
            "{}: parameter set does not match the model (missing {missing:?}, unexpected {unknown:?})",
            path.display()
        )));
    }
    for (name, value) in entries {
        let id = model.params.id(&name).expect("checked above");
        model.params.set_value(id, value)?;
    }
    Ok((model, manifest))
}

/// Dotted paths of all leaves that differ between two JSON documents.
pub fn diff_keys(a: &Value, b: &Value) -> Vec<String> {
    fn walk(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let path = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(&path, u, v, out),
                        _ => out.push(path),
                    }
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", a, b, &mut out);
    out
}
