//! Decoding, BLEU and contrastive word-sense evaluation.

pub mod bleu;
pub mod contrastive;
pub mod decode;

pub use bleu::{corpus_bleu, sentence_bleu, Bleu, BleuStats};
pub use contrastive::{contrastive_score, ContrastiveReport, ScoreNorm};
pub use decode::{beam_search, compare_hypotheses, greedy, translate, DecodeOptions, Hypothesis};
