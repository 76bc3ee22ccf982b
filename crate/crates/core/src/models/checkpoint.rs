use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::nn::{LayerState, ParamKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// `None` for buffers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ParamKind>,
}

/// JSON manifest of a checkpoint. The tensors themselves live next to it in
/// a `.bin` file holding one blob per entry, in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub entries: Vec<CheckpointEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

impl Checkpoint {
    pub fn read_manifest(stem: impl AsRef<Path>) -> Result<Self> {
        let (json, _) = paths(stem.as_ref());
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl Model {
    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save_checkpoint(&self, stem: impl AsRef<Path>) -> Result<()> {
        let (json, bin) = paths(stem.as_ref());
        if let Some(parent) = json.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut entries = Vec::new();
        let file = File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut w = BufWriter::new(file);
        for (name, p) in self.state.params() {
            entries.push(CheckpointEntry {
                name: name.to_string(),
                shape: p.tensor.shape().to_vec(),
                kind: Some(p.kind),
            });
            p.tensor.write_blob(&mut w).map_err(|e| Error::io(&bin, e))?;
        }
        for (name, t) in self.state.buffers() {
            entries.push(CheckpointEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                kind: None,
            });
            t.write_blob(&mut w).map_err(|e| Error::io(&bin, e))?;
        }
        w.flush().map_err(|e| Error::io(&bin, e))?;
        let manifest = Checkpoint {
            spec: self.spec.clone(),
            entries,
        };
        fs::write(&json, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&json, e))
    }

    pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let manifest = Checkpoint::read_manifest(stem)?;
        let (_, bin) = paths(stem);
        let file = File::open(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut r = BufReader::new(file);
        let mut state = LayerState::new();
        for entry in &manifest.entries {
            let t = Tensor::read_blob(&mut r)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Data(format!(
                    "{}: `{}` has shape {:?}, manifest says {:?}",
                    bin.display(),
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            match entry.kind {
                Some(kind) => state.add_param(&entry.name, t, kind)?,
                None => state.add_buffer(&entry.name, t)?,
            }
        }
        Model::from_state(&manifest.spec, state)
    }
}
