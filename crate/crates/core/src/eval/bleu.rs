//! Corpus BLEU over whitespace tokens: clipped 1..4-gram precisions combined
//! by geometric mean, times the brevity penalty.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics; corpus BLEU is a function of their sums.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn sentence(hyp: &str, reference: &str) -> Self {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let mut s = Self {
            hyp_len: h.len() as u64,
            ref_len: r.len() as u64,
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let mut ref_counts: HashMap<&[&str], u64> = HashMap::new();
            for w in r.windows(n) {
                *ref_counts.entry(w).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[&str], u64> = HashMap::new();
            for w in h.windows(n) {
                *hyp_counts.entry(w).or_default() += 1;
            }
            s.totals[n - 1] = h.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, other: &Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Unsmoothed score; any order without a match gives 0.
    pub fn score(&self) -> Bleu {
        let precisions: [f64; MAX_ORDER] = std::array::from_fn(|n| {
            if self.totals[n] == 0 {
                0.0
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            }
        });
        let brevity_penalty = self.brevity_penalty();
        let score = if precisions.contains(&0.0) {
            0.0
        } else {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            100.0 * brevity_penalty * log_mean.exp()
        };
        Bleu {
            score,
            precisions,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }

    /// Add-one smoothing on orders 2..4; for per-sentence diagnostics only.
    pub fn add_one_score(&self) -> f64 {
        let log_mean = (0..MAX_ORDER)
            .map(|n| {
                let (m, t) = (self.matches[n] as f64, self.totals[n] as f64);
                let p = if n == 0 { m / t.max(1.0) } else { (m + 1.0) / (t + 1.0) };
                p.ln()
            })
            .sum::<f64>()
            / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

/// Corpus-level BLEU of aligned hypothesis and reference lines.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<Bleu> {
    if hyps.is_empty() {
        return Err(Error::Data("cannot score an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::sentence(h.as_ref(), r.as_ref()));
    }
    Ok(total.score())
}

/// Sentence BLEU with add-one smoothing.
pub fn sentence_bleu(hyp: &str, reference: &str) -> f64 {
    BleuStats::sentence(hyp, reference).add_one_score()
}
