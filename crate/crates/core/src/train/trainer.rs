use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::schedule::noam_lr;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Batch, Checkpoint, GateRecord, Mode, Model};
use crate::rng::SeedStream;
use crate::shortcuts::ShortcutKind;
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub accumulation_factor: usize,
    /// Multiplier on the schedule's rate.
    pub lr_scale: f64,
    pub adam: AdamConfig,
    /// 0 disables periodic checkpoints; the final step is always saved.
    pub checkpoint_every: u64,
    pub average_last_k: usize,
    pub validate_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 4000,
            total_steps: 100_000,
            accumulation_factor: 1,
            lr_scale: 1.0,
            adam: AdamConfig::default(),
            checkpoint_every: 4000,
            average_last_k: 5,
            validate_every: 4000,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Warm-up lengths 4000 (baseline), 8000 (feature fusion), 6000 (other shortcut variants).
    pub fn for_variant(kind: ShortcutKind) -> Self {
        Self {
            warmup_steps: Self::variant_warmup(kind, 4000),
            ..Self::default()
        }
    }

    /// Desk-scale variant of [`for_variant`](Self::for_variant): warm-ups
    /// scaled by 1/10 and checkpoints/validation every 250 steps.
    pub fn toy(kind: ShortcutKind) -> Self {
        Self {
            warmup_steps: Self::variant_warmup(kind, 400),
            total_steps: 3000,
            checkpoint_every: 250,
            validate_every: 250,
            ..Self::default()
        }
    }

    fn variant_warmup(kind: ShortcutKind, base: u64) -> u64 {
        match kind {
            ShortcutKind::None => base,
            ShortcutKind::LexicalFusion => base * 2,
            _ => base * 3 / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.accumulation_factor == 0 {
            return Err(Error::Config("accumulation_factor must be at least 1".into()));
        }
        if self.lr_scale.is_nan() || self.lr_scale <= 0.0 {
            return Err(Error::Config(format!("lr_scale {} must be positive", self.lr_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
    /// Mean gate activation per shortcut block, keyed like `enc.self.1.k`.
    pub gates: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last_step: u64,
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub stopped_early: bool,
}

/// Pointer to the newest checkpoint in an output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latest {
    pub step: u64,
    pub checkpoint: String,
    pub optimizer: String,
}

pub const LATEST: &str = "latest.json";
pub const METRICS: &str = "metrics.csv";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

fn optimizer_name(step: u64) -> String {
    format!("step-{step:06}.adam")
}

/// Checkpoint files of `dir`, ordered by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(step) = name
            .strip_prefix("step-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse().ok())
        {
            found.push((step, path));
        }
    }
    found.sort();
    Ok(found)
}

pub fn gate_key(record: &GateRecord) -> String {
    let side = match record.side {
        crate::shortcuts::Side::Encoder => "enc",
        crate::shortcuts::Side::Decoder => "dec",
    };
    format!("{side}.{}.{}", record.site.as_str(), record.layer)
}

type Validator<'a> = Box<dyn FnMut(&Model<f32>, u64) -> Result<Control> + 'a>;

pub struct Trainer<'a> {
    config: TrainConfig,
    out_dir: Option<PathBuf>,
    vocab: Option<&'a Vocabulary>,
    validator: Option<Validator<'a>>,
    resume: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            out_dir: None,
            vocab: None,
            validator: None,
            resume: false,
        }
    }

    /// Writes checkpoints, optimizer state and `metrics.csv` under `dir`.
    pub fn output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn vocab(mut self, vocab: &'a Vocabulary) -> Self {
        self.vocab = Some(vocab);
        self
    }

    /// Called every `validate_every` steps with the current model.
    pub fn validation(mut self, f: impl FnMut(&Model<f32>, u64) -> Result<Control> + 'a) -> Self {
        self.validator = Some(Box::new(f));
        self
    }

    /// Continue from the output directory's `latest.json` when present. The
    /// already-consumed micro-batches are skipped from the stream.
    pub fn resume(mut self, yes: bool) -> Self {
        self.resume = yes;
        self
    }

    fn save(&self, model: &Model<f32>, adam: &Adam, step: u64) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.out_dir else {
            return Ok(None);
        };
        let path = dir.join(checkpoint_name(step));
        Checkpoint::from_model(model, step, self.vocab).save(&path)?;
        adam.save(&dir.join(optimizer_name(step)), model.params())?;
        let latest = Latest {
            step,
            checkpoint: checkpoint_name(step),
            optimizer: optimizer_name(step),
        };
        let text = serde_json::to_string_pretty(&latest).map_err(|e| Error::json("latest manifest", e))?;
        let latest_path = dir.join(LATEST);
        fs::write(&latest_path, text).map_err(|e| Error::io(latest_path, e))?;
        Ok(Some(path))
    }

    fn restore(&self, model: &mut Model<f32>) -> Result<Option<(u64, Adam)>> {
        let Some(dir) = self.out_dir.as_ref().filter(|_| self.resume) else {
            return Ok(None);
        };
        let latest_path = dir.join(LATEST);
        if !latest_path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&latest_path).map_err(|e| Error::io(&latest_path, e))?;
        let latest: Latest = serde_json::from_str(&text).map_err(|e| Error::json("latest manifest", e))?;
        let ckpt = Checkpoint::load(&dir.join(&latest.checkpoint))?;
        if ckpt.manifest.config_hash != model.config().hash() {
            return Err(Error::Data(format!(
                "{} was written for a different model configuration",
                latest.checkpoint
            )));
        }
        *model = ckpt.model()?;
        let adam = Adam::load(&dir.join(&latest.optimizer), model.params(), self.config.adam)?;
        Ok(Some((latest.step, adam)))
    }

    pub fn run<I>(mut self, model: &mut Model<f32>, batches: I) -> Result<TrainOutcome>
    where
        I: IntoIterator<Item = Result<Batch>>,
    {
        self.config.validate()?;
        let cfg = self.config.clone();
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (start, mut adam) = match self.restore(model)? {
            Some(state) => state,
            None => (0, Adam::new(model.params(), cfg.adam)),
        };
        let mut outcome = TrainOutcome {
            last_step: start,
            metrics: Vec::new(),
            checkpoints: Vec::new(),
            stopped_early: false,
        };
        if start == 0 {
            outcome.checkpoints.extend(self.save(model, &adam, 0)?);
        }
        let mut csv = match &self.out_dir {
            Some(dir) => {
                let path = dir.join(METRICS);
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(start > 0)
                    .write(true)
                    .truncate(start == 0)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((csv::Writer::from_writer(file), path, start > 0))
            }
            None => None,
        };

        let accum = cfg.accumulation_factor;
        let mut stream = batches.into_iter().skip(start as usize * accum);
        let seeds = SeedStream::new(cfg.seed).split("dropout");
        let d_model = model.config().d_model;

        for step in start + 1..=cfg.total_steps {
            let clock = Instant::now();
            let group = (0..accum)
                .map(|_| {
                    stream
                        .next()
                        .unwrap_or_else(|| Err(Error::Data("training data stream ended early".into())))
                })
                .collect::<Result<Vec<Batch>>>()?;
            let tokens: usize = group.iter().map(Batch::target_tokens).sum();
            let scale = 1.0 / tokens.max(1) as f64;
            let mut grads: Vec<Vec<f32>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            let mut loss = 0.0;
            let mut gate_sums: Vec<(String, f64)> = Vec::new();

            for (i, micro) in group.iter().enumerate() {
                let rng = seeds.split_index("micro", (step - 1) * accum as u64 + i as u64).rng();
                let mut tape = Tape::new();
                let mut f = model.forward(&mut tape, Mode::Train(rng));
                let out = f.scaled_loss(micro, scale)?;
                let vars = f.params().to_vec();
                let gates = f.gates().to_vec();
                let weight = micro.target_tokens() as f64 * scale;
                for g in &gates {
                    let mean = |v| {
                        let t = tape.value(v);
                        t.data().iter().map(|&x| x as f64).sum::<f64>() / t.numel() as f64
                    };
                    for (suffix, v) in [("k", g.key), ("v", g.value)] {
                        let key = format!("{}.{suffix}", gate_key(g));
                        let value = mean(v) * weight;
                        match gate_sums.iter_mut().find(|(k, _)| *k == key) {
                            Some(slot) => slot.1 += value,
                            None => gate_sums.push((key, value)),
                        }
                    }
                }
                loss += tape.value(out.loss).data()[0] as f64;
                tape.backward(out.loss)?;
                for (acc, v) in grads.iter_mut().zip(vars) {
                    let g = tape.grad(v).expect("training params require grad");
                    for (a, x) in acc.iter_mut().zip(g.data()) {
                        *a += *x;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("training loss at step {step}"),
                });
            }
            let lr = noam_lr(step, d_model, cfg.warmup_steps)? * cfg.lr_scale;
            adam.step(model.params_mut(), &grads, lr)?;

            let elapsed = clock.elapsed().as_secs_f64().max(1e-9);
            let metrics = StepMetrics {
                step,
                loss,
                lr,
                tokens_per_sec: tokens as f64 / elapsed,
                gates: gate_sums,
            };
            if let Some((writer, path, header_written)) = csv.as_mut() {
                write_metrics_row(writer, &metrics, header_written).map_err(|e| metrics_error(path, e))?;
            }
            outcome.metrics.push(metrics);
            outcome.last_step = step;

            let mut saved = false;
            if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.total_steps {
                outcome.checkpoints.extend(self.save(model, &adam, step)?);
                saved = true;
            }
            if cfg.validate_every > 0 && step % cfg.validate_every == 0 {
                if let Some(validate) = self.validator.as_mut() {
                    if validate(model, step)? == Control::Stop {
                        if !saved {
                            outcome.checkpoints.extend(self.save(model, &adam, step)?);
                        }
                        outcome.stopped_early = true;
                        break;
                    }
                }
            }
        }
        if let Some((mut writer, path, _)) = csv {
            writer.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(outcome)
    }
}

fn metrics_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_metrics_row<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    m: &StepMetrics,
    header_written: &mut bool,
) -> std::result::Result<(), csv::Error> {
    if !*header_written {
        let mut header = vec!["step".to_string(), "loss".into(), "lr".into(), "tokens_per_sec".into()];
        header.extend(m.gates.iter().map(|(k, _)| format!("gate.{k}")));
        w.write_record(&header)?;
        *header_written = true;
    }
    let mut row = vec![
        m.step.to_string(),
        format!("{:.6}", m.loss),
        format!("{:.6e}", m.lr),
        format!("{:.1}", m.tokens_per_sec),
    ];
    row.extend(m.gates.iter().map(|(_, v)| format!("{v:.6}")));
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

/// Mean of the newest `k` checkpoints in `dir`.
pub fn average_last(dir: &Path, k: usize) -> Result<Checkpoint> {
    let all = list_checkpoints(dir)?;
    if all.is_empty() || k == 0 {
        return Err(Error::Data(format!("no checkpoints to average in {}", dir.display())));
    }
    let chosen: Vec<PathBuf> = all.into_iter().rev().take(k).rev().map(|(_, p)| p).collect();
    crate::model::average_checkpoints(&chosen)
}
