use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::shortcuts::{ShortcutKind, ShortcutVariant};

/// What the lexical shortcut reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutInput {
    /// The embedding layer output, positions included (`H_0`).
    #[default]
    Embedding,
    /// Scaled table rows before positional encodings are added.
    Lookup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub head_count: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub variant: ShortcutVariant,
    pub tie_embeddings: bool,
    pub max_len: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub positional_encoding: bool,
    pub shortcut_input: ShortcutInput,
    /// `false` replaces the gate by a plain sum `K_sc + K` (ablation).
    pub gated: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(64)
    }
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 3,
            d_model: 64,
            head_count: 4,
            d_ff: 256,
            vocab_size,
            dropout_rate: 0.1,
            variant: ShortcutVariant::default(),
            tie_embeddings: true,
            max_len: 128,
            seed: 1,
            label_smoothing: 0.0,
            positional_encoding: true,
            shortcut_input: ShortcutInput::Embedding,
            gated: true,
        }
    }

    /// Six-layer base shape with a 40k joint subword vocabulary.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            n_layers: 6,
            d_model: 512,
            head_count: 8,
            d_ff: 2048,
            max_len: 256,
            ..Self::toy(vocab_size)
        }
    }

    pub fn with_variant(mut self, kind: ShortcutKind) -> Self {
        self.variant = ShortcutVariant::new(kind);
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.head_count
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.head_count == 0 || !self.d_model.is_multiple_of(self.head_count) {
            return fail(format!(
                "d_model {} is not divisible by head_count {}",
                self.d_model, self.head_count
            ));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.vocab_size <= crate::data::vocab::RESERVED.len() {
            return fail(format!(
                "vocab_size {} leaves no room past the reserved ids",
                self.vocab_size
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !self.gated && self.variant.kind == ShortcutKind::LexicalFusion {
            return fail("the gate-less ablation is not defined for feature fusion".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
