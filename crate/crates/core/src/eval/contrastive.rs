//! Contrastive word-sense scoring: a record is correct when the reference
//! outscores every sense-perturbed alternative under teacher forcing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{ContrastiveRecord, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreNorm {
    /// Sum of target-token log-probabilities.
    #[default]
    Raw,
    /// Sum divided by the number of target tokens, EOS included.
    Length,
}

impl FromStr for ScoreNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "length" => Ok(Self::Length),
            other => Err(Error::Config(format!(
                "unknown score normalization {other:?} (raw|length)"
            ))),
        }
    }
}

impl fmt::Display for ScoreNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Length => "length",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Records without alternatives, left out of `total`.
    pub excluded: usize,
    /// Records lost to an exact score tie.
    pub ties: usize,
    /// Expected accuracy of a uniform random ranker.
    pub chance: f64,
    pub normalization: ScoreNorm,
}

fn encode(vocab: &Vocabulary, line: &str) -> Vec<usize> {
    let mut ids = vocab.encode(line);
    ids.push(EOS);
    ids
}

/// Scores every record; `batch` bounds the number of sequences per forward pass.
pub fn contrastive_score<T: Real>(
    model: &Model<T>,
    vocab: &Vocabulary,
    records: &[ContrastiveRecord],
    norm: ScoreNorm,
    batch: usize,
) -> Result<ContrastiveReport> {
    let kept: Vec<&ContrastiveRecord> = records.iter().filter(|r| !r.incorrect.is_empty()).collect();
    let excluded = records.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no contrastive record has an incorrect alternative ({excluded} excluded)"
        )));
    }
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for r in &kept {
        let s = encode(vocab, &r.source);
        for t in std::iter::once(&r.correct).chain(&r.incorrect) {
            src.push(s.clone());
            tgt.push(encode(vocab, t));
        }
    }
    let mut scores = Vec::with_capacity(tgt.len());
    for (s, t) in src.chunks(batch.max(1)).zip(tgt.chunks(batch.max(1))) {
        let lp = model.sequence_log_probs(&Batch::new(s.to_vec(), t.to_vec())?)?;
        scores.extend(lp.into_iter().zip(t).map(|(lp, t)| match norm {
            ScoreNorm::Raw => lp,
            ScoreNorm::Length => lp / t.len() as f64,
        }));
    }
    let (mut correct, mut ties, mut at, mut chance) = (0, 0, 0, 0.0);
    for r in &kept {
        let good = scores[at];
        let best_bad = scores[at + 1..at + 1 + r.incorrect.len()]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if good > best_bad {
            correct += 1;
        } else if good == best_bad {
            ties += 1;
            log::debug!("score tie on {:?}", r.source);
        }
        chance += 1.0 / (1 + r.incorrect.len()) as f64;
        at += 1 + r.incorrect.len();
    }
    if ties > 0 {
        log::warn!("{ties} contrastive records tied and count as incorrect");
    }
    let total = kept.len();
    Ok(ContrastiveReport {
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        excluded,
        ties,
        chance: chance / total as f64,
        normalization: norm,
    })
}
