//! Id-encoding of corpora and token-budgeted batching.

use rand::seq::SliceRandom;

use super::corpus::Pair;
use super::vocab::{Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{SeedStream, StreamRng};

/// Source and target ids, each terminated by `EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub fn encode_sentence(vocab: &Vocabulary, words: &[String]) -> Vec<usize> {
    let mut ids: Vec<usize> = words.iter().map(|w| vocab.id(w).unwrap_or(super::UNK)).collect();
    ids.push(EOS);
    ids
}

pub fn encode_pairs(vocab: &Vocabulary, pairs: &[Pair]) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| EncodedPair {
            src: encode_sentence(vocab, &p.src),
            tgt: encode_sentence(vocab, &p.tgt),
        })
        .collect()
}

/// Groups consecutive pairs so that `rows × longest side` stays within
/// `max_tokens`; a single over-long pair still forms its own batch.
pub fn pack(pairs: &[EncodedPair], max_tokens: usize) -> Vec<Batch> {
    let mut batches = Vec::new();
    let mut current = Batch::default();
    let mut longest = 0;
    for p in pairs {
        let len = p.src.len().max(p.tgt.len());
        let wider = longest.max(len);
        if !current.is_empty() && wider * (current.len() + 1) > max_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.src.push(p.src.clone());
        current.tgt.push(p.tgt.clone());
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Endless batches: every epoch reshuffles the pairs, sorts them by length
/// inside shuffled windows and packs them.
pub struct BatchStream {
    pairs: Vec<EncodedPair>,
    max_tokens: usize,
    rng: StreamRng,
    pending: std::vec::IntoIter<Batch>,
    pub epoch: usize,
}

impl BatchStream {
    pub fn new(pairs: Vec<EncodedPair>, max_tokens: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        if max_tokens == 0 {
            return Err(Error::Config("batch token budget must be positive".into()));
        }
        Ok(Self {
            pairs,
            max_tokens,
            rng: SeedStream::new(seed).split("batches").rng(),
            pending: Vec::new().into_iter(),
            epoch: 0,
        })
    }

    fn refill(&mut self) {
        self.pairs.shuffle(&mut self.rng);
        let window = 64;
        let mut ordered = self.pairs.clone();
        for chunk in ordered.chunks_mut(window) {
            chunk.sort_by_key(|p| p.src.len().max(p.tgt.len()));
        }
        let mut batches = pack(&ordered, self.max_tokens);
        batches.shuffle(&mut self.rng);
        self.pending = batches.into_iter();
        self.epoch += 1;
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(b) = self.pending.next() {
            return Some(Ok(b));
        }
        self.refill();
        self.pending.next().map(Ok)
    }
}
