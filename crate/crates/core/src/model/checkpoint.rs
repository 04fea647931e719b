//! Checkpoint files: one JSON manifest line followed by one tensor blob per
//! parameter, in layout order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamStore;
use super::transformer::Model;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::Real;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocabulary>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, step: u64, vocab: Option<&Vocabulary>) -> Self {
        let params = model.params().cast::<f32>();
        let config = model.config().clone();
        Self {
            manifest: Manifest {
                format: FORMAT_VERSION,
                config_hash: config.hash(),
                seed: config.seed,
                config,
                step,
                params: params
                    .iter()
                    .map(|(name, t)| ParamEntry {
                        name: name.to_string(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
                vocab: vocab.cloned(),
            },
            params,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.manifest.config.clone(), self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let line = serde_json::to_string(&self.manifest).map_err(|e| Error::json("checkpoint manifest", e))?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
        for (name, tensor) in self.params.iter() {
            write_tensor(&mut w, name, tensor)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::json(path.display().to_string(), e))?;
        if manifest.format != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint format {}",
                path.display(),
                manifest.format
            )));
        }
        if manifest.config.hash() != manifest.config_hash {
            return Err(Error::Data(format!(
                "{}: config hash does not match config",
                path.display()
            )));
        }
        let mut entries = Vec::with_capacity(manifest.params.len());
        for entry in &manifest.params {
            let (name, tensor) = read_tensor(&mut r)?
                .ok_or_else(|| Error::Data(format!("{}: missing tensor {}", path.display(), entry.name)))?;
            if name != entry.name || tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Data(format!(
                    "{}: blob {name} {:?} does not match index entry {} {:?}",
                    path.display(),
                    tensor.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            entries.push((name, tensor));
        }
        Ok(Self {
            manifest,
            params: ParamStore::new(entries)?,
        })
    }
}

/// Elementwise mean of the parameters of `paths`, accumulated in 64-bit.
/// All checkpoints must share one configuration hash; the result carries the
/// manifest of the last one.
pub fn average_checkpoints(paths: &[impl AsRef<Path>]) -> Result<Checkpoint> {
    let (last, rest) = paths
        .split_last()
        .ok_or_else(|| Error::InvalidArgument("no checkpoints to average".into()))?;
    let base = Checkpoint::load(last.as_ref())?;
    let mut sums: Vec<Vec<f64>> = base.params.tensors().iter().map(|t| t.to_f64_vec()).collect();
    for path in rest {
        let other = Checkpoint::load(path.as_ref())?;
        if other.manifest.config_hash != base.manifest.config_hash {
            return Err(Error::Data(format!(
                "{} has config hash {} but {} has {}",
                path.as_ref().display(),
                other.manifest.config_hash,
                last.as_ref().display(),
                base.manifest.config_hash
            )));
        }
        for (sum, t) in sums.iter_mut().zip(other.params.tensors()) {
            for (s, v) in sum.iter_mut().zip(t.data()) {
                *s += *v as f64;
            }
        }
    }
    let k = paths.len() as f64;
    let mut merged = base;
    for (t, sum) in merged.params.tensors_mut().iter_mut().zip(sums) {
        for (v, s) in t.data_mut().iter_mut().zip(sum) {
            *v = (s / k) as f32;
        }
    }
    Ok(merged)
}
