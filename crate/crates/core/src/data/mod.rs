//! Vocabularies, subword segmentation and synthetic parallel corpora.

pub mod batching;
pub mod bpe;
pub mod corpus;
pub mod vocab;

pub use batching::{encode_pairs, encode_sentence, pack, BatchStream, EncodedPair};
pub use bpe::{learn_bpe, undo_bpe, Bpe};
pub use corpus::{gen_corpus, ContrastiveRecord, CorpusConfig, Pair, ParallelCorpus, SplitWeights, Task};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};
