//! Run configuration: JSON file plus dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lexshort_core::data::CorpusConfig;
use lexshort_core::eval::ScoreNorm;
use lexshort_core::probe::{Network, ProbeConfig};
use lexshort_core::train::TrainConfig;
use lexshort_core::{ModelConfig, ShortcutKind};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::exit::Usage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ValidationConfig {
    /// Validation sentences decoded per check; 0 uses the whole split.
    pub sentences: usize,
    /// Stop training once greedy exact-match accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Sentences per greedy batch.
    pub batch: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 16,
            max_len: 64,
            batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub normalization: ScoreNorm,
    /// Sequences per teacher-forced scoring pass.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            normalization: ScoreNorm::Raw,
            batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Corpus split whose sentences are dumped and probed.
    pub split: String,
    /// 0 keeps every sentence of the split.
    pub max_sentences: usize,
    pub frequency_bins: usize,
    pub networks: Vec<Network>,
    /// Sentences per forward pass while dumping states.
    pub batch: usize,
    /// Token budget of the batches used for gate statistics.
    pub gate_batch_tokens: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            max_sentences: 0,
            frequency_bins: 10,
            networks: Network::BOTH.to_vec(),
            batch: 64,
            gate_batch_tokens: 2000,
        }
    }
}

/// Everything a command needs. `model.vocab_size = 0` takes the size from the
/// vocabulary file and `train.warmup_steps = 0` selects the variant preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: CorpusConfig,
    /// Token budget per training micro-batch (rows × longest side).
    pub batch_tokens: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub validation: ValidationConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            data: CorpusConfig::default(),
            batch_tokens: 500,
            model: ModelConfig::toy(0),
            train: TrainConfig {
                warmup_steps: 0,
                ..TrainConfig::toy(ShortcutKind::None)
            },
            validation: ValidationConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional file, then each override in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| Usage(format!("config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(&base).context("serializing config")?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Usage(format!("override {item:?} is not of the form key=value")))?;
            apply_override(&mut value, key.trim(), raw.trim())?;
        }
        serde_json::from_value(value).map_err(|e| Usage(format!("invalid configuration: {e}")).into())
    }

    /// Applies one `--seed` to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.probe.seed = seed;
    }

    /// Training settings with the variant's warm-up filled in.
    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if t.warmup_steps == 0 {
            t.warmup_steps = TrainConfig::toy(self.model.variant.kind).warmup_steps;
        }
        t
    }

    /// Writes the configuration as `config.json` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// Sets `key` (dot-separated path) to `raw`, read as JSON when it parses and as
/// a plain string otherwise. Keys must already exist in the configuration.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    if key.is_empty() {
        return Err(Usage("empty override key".into()).into());
    }
    let mut node = root;
    let mut walked = Vec::new();
    for part in key.split('.') {
        walked.push(part);
        let Value::Object(map) = node else {
            return Err(Usage(format!(
                "config key {:?} is not a section",
                walked[..walked.len() - 1].join(".")
            ))
            .into());
        };
        node = map
            .get_mut(part)
            .ok_or_else(|| Usage(format!("unknown config key {:?}", walked.join("."))))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
