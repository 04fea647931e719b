//! Byte-pair encoding in the classic word-internal form: words are split into
//! characters with an end-of-word marker on the last one, and the most frequent
//! adjacent pair is merged repeatedly. Segmented text marks every non-final
//! subword with a trailing `@@`.

use std::collections::HashMap;

use crate::error::{Error, Result};

const END: &str = "</w>";
const JOINER: &str = "@@";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bpe {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    /// Merged symbol -> the pair that produced it.
    parts: HashMap<String, (String, String)>,
    /// Symbol frequencies in the segmented training corpus.
    counts: HashMap<String, usize>,
}

fn symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(seq: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(seq[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `n_merges` merges from whitespace-tokenized lines. Ties in pair
/// frequency go to the lexicographically smallest pair. Symbol counts of the
/// segmented corpus are kept for the segmentation threshold.
pub fn learn_bpe<S: AsRef<str>>(lines: impl IntoIterator<Item = S>, n_merges: usize) -> Result<Bpe> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            *freq.entry(w.to_string()).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::Data("cannot learn subword merges from an empty corpus".into()));
    }
    let mut words: Vec<(Vec<String>, usize)> = freq.into_iter().map(|(w, c)| (symbols(&w), c)).collect();
    words.sort();
    let mut merges = Vec::new();
    for _ in 0..n_merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (seq, c) in &words {
            for w in seq.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((left, right)) = best else {
            break;
        };
        for (seq, _) in &mut words {
            if seq.windows(2).any(|w| w[0] == left && w[1] == right) {
                *seq = merge_pair(seq, &left, &right);
            }
        }
        merges.push((left, right));
    }
    let mut counts = HashMap::new();
    for (seq, c) in &words {
        for s in seq {
            *counts.entry(s.clone()).or_default() += c;
        }
    }
    Ok(Bpe::with_counts(merges, counts))
}

impl Bpe {
    fn with_counts(merges: Vec<(String, String)>, counts: HashMap<String, usize>) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        let parts = merges
            .iter()
            .map(|(l, r)| (format!("{l}{r}"), (l.clone(), r.clone())))
            .collect();
        Self {
            merges,
            ranks,
            parts,
            counts,
        }
    }

    /// Rebuilds from a stored merge list; no frequency information, so no threshold.
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        Self::with_counts(merges, HashMap::new())
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    fn frequent(&self, symbol: &str, threshold: usize) -> bool {
        threshold == 0 || self.counts.get(symbol).copied().unwrap_or(0) >= threshold
    }

    fn split_rare(&self, symbol: &str, threshold: usize, out: &mut Vec<String>) {
        match self.parts.get(symbol) {
            Some((l, r)) if !self.frequent(symbol, threshold) => {
                self.split_rare(l, threshold, out);
                self.split_rare(r, threshold, out);
            }
            _ => out.push(symbol.to_string()),
        }
    }

    /// Subwords of one word; the last one keeps the end marker.
    pub fn segment_word(&self, word: &str, vocab_threshold: usize) -> Vec<String> {
        let mut seq = symbols(word);
        loop {
            let best = seq
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, w[0].clone(), w[1].clone()))
                })
                .min();
            match best {
                Some((_, l, r)) => seq = merge_pair(&seq, &l, &r),
                None => break,
            }
        }
        let mut out = Vec::with_capacity(seq.len());
        for s in &seq {
            self.split_rare(s, vocab_threshold, &mut out);
        }
        out
    }

    /// Segments a line, marking non-final subwords with `@@`.
    pub fn apply(&self, line: &str, vocab_threshold: usize) -> String {
        let mut pieces = Vec::new();
        for word in line.split_whitespace() {
            let subwords = self.segment_word(word, vocab_threshold);
            let last = subwords.len() - 1;
            for (i, s) in subwords.into_iter().enumerate() {
                if i == last {
                    pieces.push(s.trim_end_matches(END).to_string());
                } else {
                    pieces.push(format!("{s}{JOINER}"));
                }
            }
        }
        pieces.join(" ")
    }
}

/// Reverses [`Bpe::apply`].
pub fn undo_bpe(line: &str) -> String {
    line.replace("@@ ", "").trim_end_matches(JOINER).to_string()
}
