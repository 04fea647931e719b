use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &[f32] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f32] {
        &self.v[index]
    }

    /// Applies one update; rejects non-finite gradients before touching anything.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>], rate: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (name, g) in params.names().iter().zip(grads) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("gradient of {name}"),
                });
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i][j] as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * g;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = rate * (mj / c1) / ((vj / c2).sqrt() + epsilon);
                *p = (*p as f64 - update) as f32;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, params: &ParamStore<f32>) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header =
            serde_json::to_string(&StateHeader { t: self.t }).map_err(|e| Error::json("optimizer state", e))?;
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
        for (i, (name, t)) in params.iter().enumerate() {
            write_tensor(
                &mut w,
                &format!("m.{name}"),
                &Tensor::new(t.shape().to_vec(), self.m[i].clone())?,
            )?;
            write_tensor(
                &mut w,
                &format!("v.{name}"),
                &Tensor::new(t.shape().to_vec(), self.v[i].clone())?,
            )?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, params: &ParamStore<f32>, config: AdamConfig) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: StateHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::json("optimizer state", e))?;
        let mut state = Self::new(params, config);
        state.t = header.t;
        for (i, (name, t)) in params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let (got, tensor) = read_tensor::<f32, _>(&mut r)?
                    .ok_or_else(|| Error::Data(format!("{}: missing {prefix}.{name}", path.display())))?;
                if got != format!("{prefix}.{name}") || tensor.shape() != t.shape() {
                    return Err(Error::Data(format!(
                        "{}: unexpected optimizer entry {got}",
                        path.display()
                    )));
                }
                *slot = tensor.into_vec();
            }
        }
        Ok(state)
    }
}
