//! Token ↔ id mapping with four reserved ids.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    #[serde(default)]
    merges: Vec<(String, String)>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        let index = f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens: f.tokens,
            index,
            merges: f.merges,
        }
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            merges: v.merges,
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Reserved tokens first, then `tokens` in order with duplicates dropped.
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            merges: Vec::new(),
        };
        for t in RESERVED {
            vocab.insert(t);
        }
        for t in tokens {
            vocab.insert(t.as_ref());
        }
        vocab
    }

    /// Word vocabulary from whitespace-tokenized lines, ordered by descending
    /// frequency and then lexicographically.
    pub fn build<S: AsRef<str>>(lines: impl IntoIterator<Item = S>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for w in line.as_ref().split_whitespace() {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(words.into_iter().map(|(w, _)| w))
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn with_merges(mut self, merges: Vec<(String, String)>) -> Self {
        self.merges = merges;
        self
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace-split ids; unknown words map to `UNK`. No BOS/EOS added.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Like [`encode`](Self::encode) but also reports whether any word was unknown.
    pub fn encode_checked(&self, line: &str) -> (Vec<usize>, bool) {
        let ids = self.encode(line);
        let unknown = ids.contains(&UNK) && !line.split_whitespace().any(|w| w == RESERVED[UNK]);
        (ids, unknown)
    }

    /// Joins tokens with spaces, stopping at `EOS` and skipping `PAD`/`BOS`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("vocabulary", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Vocabulary = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        for (id, name) in RESERVED.iter().enumerate() {
            if vocab.token(id) != Some(name) {
                return Err(Error::Data(format!(
                    "{}: reserved id {id} is not {name}",
                    path.display()
                )));
            }
        }
        Ok(vocab)
    }
}
