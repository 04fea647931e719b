//! Feed-forward probing classifiers that recover the token at each position
//! from a frozen layer's hidden state.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dump::{Network, StateDump};
use crate::error::{Error, Result};
use crate::model::{Init, ParamSpec, ParamStore};
use crate::rng::SeedStream;
use crate::tensor::{Tape, Tensor};
use crate::train::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Share of sentences held out for testing.
    pub test_fraction: f64,
    /// Epochs without a 0.1% drop in training loss before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            dropout: 0.5,
            epochs: 20,
            lr: 1e-3,
            batch: 128,
            test_fraction: 0.2,
            patience: 2,
            seed: 1,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("probe hidden, epochs and batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("probe dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("probe lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub network: Network,
    pub layer: usize,
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs_run: usize,
    /// `(entry index, predicted token)` for every held-out entry.
    pub predictions: Vec<(usize, usize)>,
}

/// Splits a network's entries by sentence into (train, test).
pub fn split_by_sentence(dump: &StateDump, network: Network, cfg: &ProbeConfig) -> (Vec<usize>, Vec<usize>) {
    let mut sentences: Vec<usize> = dump
        .indices(network)
        .iter()
        .map(|&i| dump.entries[i].sentence)
        .collect();
    sentences.sort_unstable();
    sentences.dedup();
    sentences.shuffle(&mut SeedStream::new(cfg.seed).split("probe-split").rng());
    let n_test = ((sentences.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, sentences.len().max(2) - 1);
    let test: std::collections::HashSet<usize> = sentences[..n_test].iter().copied().collect();
    dump.indices(network)
        .into_iter()
        .partition(|&i| !test.contains(&dump.entries[i].sentence))
}

struct Mlp {
    params: ParamStore<f32>,
}

impl Mlp {
    fn new(d: usize, hidden: usize, classes: usize, seeds: &SeedStream) -> Self {
        let spec = |name: &str, shape: Vec<usize>, init| ParamSpec {
            name: name.into(),
            shape,
            init,
        };
        let specs = [
            spec("w1", vec![d, hidden], Init::Xavier),
            spec("b1", vec![hidden], Init::Zeros),
            spec("w2", vec![hidden, classes], Init::Xavier),
            spec("b2", vec![classes], Init::Zeros),
        ];
        Self {
            params: ParamStore::from_specs(&specs, seeds),
        }
    }

    fn inputs(dump: &StateDump, layer: usize, rows: &[usize]) -> Result<Tensor<f32>> {
        let mut x = Vec::with_capacity(rows.len() * dump.d_model);
        for &i in rows {
            x.extend_from_slice(dump.state(layer, i));
        }
        Tensor::new(vec![rows.len(), dump.d_model], x)
    }

    /// Logits on a fresh tape; returns the tape, parameter vars and output.
    fn forward(
        &self,
        x: Tensor<f32>,
        dropout: Option<(f64, &mut crate::rng::StreamRng)>,
    ) -> Result<(Tape<f32>, Vec<crate::tensor::Var>, crate::tensor::Var)> {
        let mut tape = Tape::new();
        let train = dropout.is_some();
        let p: Vec<_> = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), train))
            .collect();
        let x = tape.constant(x);
        let h = tape.matmul(x, p[0])?;
        let h = tape.add_row(h, p[1])?;
        let mut h = tape.relu(h)?;
        if let Some((rate, rng)) = dropout {
            h = tape.dropout(h, rate, rng)?;
        }
        let o = tape.matmul(h, p[2])?;
        let o = tape.add_row(o, p[3])?;
        Ok((tape, p, o))
    }

    fn predict(&self, dump: &StateDump, layer: usize, rows: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(1024) {
            let (tape, _, o) = self.forward(Self::inputs(dump, layer, chunk)?, None)?;
            let logits = tape.value(o);
            for r in 0..chunk.len() {
                let row = logits.row(r);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Trains a probe on one layer of one network and reports held-out accuracy.
pub fn train_probe(dump: &StateDump, network: Network, layer: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    if layer > dump.n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} beyond {} layers",
            dump.n_layers
        )));
    }
    let (train, test) = split_by_sentence(dump, network, cfg);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "{} dump needs at least two sentences to split",
            network.as_str()
        )));
    }
    let first = dump.entries[train[0]].token;
    if train.iter().all(|&i| dump.entries[i].token == first) {
        return Err(Error::Data(format!(
            "probe training data has a single class (token {first})"
        )));
    }
    let seeds = SeedStream::new(cfg.seed)
        .split("probe")
        .split_index("layer", layer as u64);
    let mut mlp = Mlp::new(dump.d_model, cfg.hidden, dump.vocab_size, &seeds.split("init"));
    let mut adam = Adam::new(&mlp.params, AdamConfig::default());
    let mut order = train.clone();
    let mut shuffle_rng = seeds.split("shuffle").rng();
    let mut dropout_rng = seeds.split("dropout").rng();
    let (mut best_loss, mut stale, mut epochs_run) = (f64::INFINITY, 0, 0);
    for _ in 0..cfg.epochs {
        epochs_run += 1;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for rows in order.chunks(cfg.batch) {
            let x = Mlp::inputs(dump, layer, rows)?;
            let (mut tape, vars, o) = mlp.forward(x, Some((cfg.dropout, &mut dropout_rng)))?;
            let targets: Vec<usize> = rows.iter().map(|&i| dump.entries[i].token).collect();
            let weights = vec![1.0 / rows.len() as f64; rows.len()];
            let loss = tape.cross_entropy(o, &targets, &weights, 0.0)?;
            epoch_loss += tape.value(loss).data()[0] as f64 * rows.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(mlp.params.tensors())
                .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], Tensor::into_vec))
                .collect();
            adam.step(&mut mlp.params, &grads, cfg.lr)?;
        }
        epoch_loss /= order.len() as f64;
        if epoch_loss < best_loss * (1.0 - 1e-3) {
            best_loss = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let predicted = mlp.predict(dump, layer, &test)?;
    let correct = test
        .iter()
        .zip(&predicted)
        .filter(|(&i, &p)| dump.entries[i].token == p)
        .count();
    Ok(ProbeResult {
        network,
        layer,
        accuracy: correct as f64 / test.len() as f64,
        train_size: train.len(),
        test_size: test.len(),
        epochs_run,
        predictions: test.into_iter().zip(predicted).collect(),
    })
}
