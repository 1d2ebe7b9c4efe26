//! Checkpoint directory: `manifest.json` plus one BCTN file per parameter
//! (`params/`) and per Adam moment (`adam/`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, DataSpec, Model, ModelKind};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, AdamConfig, AdamState, Role};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub spec: DataSpec,
    pub params: Vec<ParamEntry>,
    pub adam: Option<AdamMeta>,
    /// Trainer-defined progress record.
    pub state: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub config: AdamConfig,
    pub step: u64,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model,
    pub adam: Option<AdamState>,
}

fn file_name(name: &str) -> String {
    format!("{name}.bctn")
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    arch: &ArchConfig,
    adam: Option<&AdamState>,
    state: serde_json::Value,
) -> Result<()> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut entries = Vec::new();
    for p in model.params().iter() {
        write_tensor_file(&pdir.join(file_name(&p.name)), &p.value)?;
        entries.push(ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), role: p.role });
    }
    if let Some(adam) = adam {
        let adir = dir.join("adam");
        fs::create_dir_all(&adir).map_err(|e| Error::io(&adir, e))?;
        for (name, m, v) in adam.moments() {
            write_tensor_file(&adir.join(file_name(&format!("{name}.m"))), m)?;
            write_tensor_file(&adir.join(file_name(&format!("{name}.v"))), v)?;
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT,
        kind: model.kind(),
        arch: arch.clone(),
        spec: model.spec().clone(),
        params: entries,
        adam: adam.map(|a| AdamMeta { config: a.config, step: a.step }),
        state,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    if m.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Integrity(format!("checkpoint format {} is not supported", m.format_version)));
    }
    Ok(m)
}

/// Rebuilds the architecture from the manifest and fills it from disk; every
/// stored tensor must match the architecture's names, shapes and roles.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_checkpoint_manifest(dir)?;
    let mut model = Model::new(manifest.kind, &manifest.arch, &manifest.spec, 0)?;
    let expected: Vec<ParamEntry> = model
        .params()
        .iter()
        .map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), role: p.role })
        .collect();
    if expected != manifest.params {
        return Err(Error::Integrity(
            "checkpoint parameter inventory does not match its architecture".into(),
        ));
    }
    let pdir = dir.join("params");
    for e in &expected {
        let t = read_tensor_file(&pdir.join(file_name(&e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Integrity(format!("`{}` has shape {:?}, expected {:?}", e.name, t.shape(), e.shape)));
        }
        model.params_mut().set_value(&e.name, t)?;
    }
    let adam = match manifest.adam {
        None => None,
        Some(meta) => {
            let mut state = AdamState::new(meta.config);
            state.step = meta.step;
            let adir = dir.join("adam");
            for e in &expected {
                let m_path = adir.join(file_name(&format!("{}.m", e.name)));
                if !m_path.exists() {
                    continue;
                }
                let m = read_tensor_file(&m_path)?;
                let v = read_tensor_file(&adir.join(file_name(&format!("{}.v", e.name))))?;
                if m.shape() != e.shape.as_slice() || v.shape() != e.shape.as_slice() {
                    return Err(Error::Integrity(format!("Adam moments for `{}` have the wrong shape", e.name)));
                }
                state.insert_moments(&e.name, m, v);
            }
            Some(state)
        }
    };
    Ok(Checkpoint { manifest, model, adam })
}
