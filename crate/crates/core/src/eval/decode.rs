//! Greedy and beam-search decoding over the incremental decoder cache.

use std::cmp::Ordering;

use crate::data::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Model, Padded};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// Token ids that are never generated.
    pub banned: Vec<usize>,
    /// Sentences per batch for greedy decoding.
    pub batch: usize,
}

impl DecodeOptions {
    pub fn new(beam: usize, max_len: usize) -> Self {
        Self {
            beam,
            max_len,
            banned: vec![PAD, BOS],
            batch: 64,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::InvalidArgument("beam size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids; ends with EOS when `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Length-normalized log-probability.
    pub score: f64,
    /// False when no hypothesis reached EOS within `max_len`.
    pub finished: bool,
}

impl Hypothesis {
    fn new(tokens: Vec<usize>, log_prob: f64) -> Self {
        let finished = tokens.last() == Some(&EOS);
        let score = if tokens.is_empty() {
            0.0
        } else {
            log_prob / tokens.len() as f64
        };
        Self {
            tokens,
            log_prob,
            score,
            finished,
        }
    }

    /// Ids with a trailing EOS removed.
    pub fn output(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Finished before unfinished, then higher score, then smaller ids.
pub fn compare_hypotheses(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.finished
        .cmp(&a.finished)
        .then_with(|| b.score.total_cmp(&a.score))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn log_probs<T: Real>(row: &[T], banned: &[usize]) -> Vec<f64> {
    let max = row.iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.widen() - max).exp()).sum::<f64>().ln();
    let mut out: Vec<f64> = row.iter().map(|v| v.widen() - max - z).collect();
    for &b in banned {
        if let Some(slot) = out.get_mut(b) {
            *slot = f64::NEG_INFINITY;
        }
    }
    out
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

fn effective_max_len<T: Real>(model: &Model<T>, opts: &DecodeOptions) -> usize {
    opts.max_len.min(model.config().max_len)
}

/// Argmax decoding; ties go to the smaller token id.
pub fn greedy<T: Real>(model: &Model<T>, srcs: &[Vec<usize>], opts: &DecodeOptions) -> Result<Vec<Hypothesis>> {
    opts.validate()?;
    let max_len = effective_max_len(model, opts);
    let mut out = Vec::with_capacity(srcs.len());
    for chunk in srcs.chunks(opts.batch.max(1)) {
        let mut cache = model.start_decoding(&Padded::new(chunk)?)?;
        let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); chunk.len()];
        let mut scores = vec![0.0; chunk.len()];
        let mut active: Vec<usize> = (0..chunk.len()).collect();
        for _ in 0..max_len {
            let last: Vec<usize> = active.iter().map(|&r| *tokens[r].last().unwrap_or(&BOS)).collect();
            let logits = model.decode_step(&mut cache, &last)?;
            let mut keep = Vec::with_capacity(active.len());
            let mut still = Vec::with_capacity(active.len());
            for (i, &r) in active.iter().enumerate() {
                let lp = log_probs(logits.row(i), &opts.banned);
                let y = argmax(&lp);
                tokens[r].push(y);
                scores[r] += lp[y];
                if y != EOS {
                    keep.push(i);
                    still.push(r);
                }
            }
            if still.is_empty() {
                break;
            }
            if still.len() != active.len() {
                cache.select(&keep)?;
            }
            active = still;
        }
        out.extend(tokens.into_iter().zip(scores).map(|(t, s)| Hypothesis::new(t, s)));
    }
    Ok(out)
}

/// Length-normalized beam search for one source sentence. Returns every
/// completed hypothesis plus the surviving beam, best first.
pub fn beam_search<T: Real>(model: &Model<T>, src: &[usize], opts: &DecodeOptions) -> Result<Vec<Hypothesis>> {
    opts.validate()?;
    let max_len = effective_max_len(model, opts);
    let mut cache = model.start_decoding(&Padded::new(&[src.to_vec()])?)?;
    let mut live = vec![(Vec::<usize>::new(), 0.0f64)];
    let mut finished = Vec::new();
    for _ in 0..max_len {
        let last: Vec<usize> = live.iter().map(|(t, _)| *t.last().unwrap_or(&BOS)).collect();
        let logits = model.decode_step(&mut cache, &last)?;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (i, (_, lp0)) in live.iter().enumerate() {
            let lp = log_probs(logits.row(i), &opts.banned);
            let mut ids: Vec<usize> = (0..lp.len()).filter(|&y| lp[y].is_finite()).collect();
            ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            ids.truncate(opts.beam);
            candidates.extend(ids.into_iter().map(|y| (lp0 + lp[y], i, y)));
        }
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("every token is banned".into()));
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].0.cmp(&live[b.1].0))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(opts.beam);
        let mut rows = Vec::new();
        let mut next = Vec::new();
        for (lp, i, y) in candidates {
            let mut tokens = live[i].0.clone();
            tokens.push(y);
            if y == EOS {
                finished.push(Hypothesis::new(tokens, lp));
            } else {
                rows.push(i);
                next.push((tokens, lp));
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= opts.beam {
            break;
        }
        cache.select(&rows)?;
    }
    let mut all: Vec<Hypothesis> = finished;
    all.extend(live.into_iter().map(|(t, lp)| Hypothesis::new(t, lp)));
    all.sort_by(compare_hypotheses);
    if all.first().is_some_and(|h| !h.finished) {
        log::warn!("no hypothesis reached EOS within {max_len} tokens");
    }
    Ok(all)
}

/// Best hypothesis per sentence; beam 1 uses batched greedy decoding.
pub fn translate<T: Real>(model: &Model<T>, srcs: &[Vec<usize>], opts: &DecodeOptions) -> Result<Vec<Hypothesis>> {
    if opts.beam == 1 {
        return greedy(model, srcs, opts);
    }
    srcs.iter()
        .map(|s| Ok(beam_search(model, s, opts)?.swap_remove(0)))
        .collect()
}
