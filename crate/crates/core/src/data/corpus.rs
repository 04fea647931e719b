//! Synthetic parallel corpora.
//!
//! * `copy`: the target repeats the source.
//! * `reverse`: the target is the source reversed.
//! * `lexicon`: word-by-word translation through a fixed lexicon. Some source
//!   words are ambiguous: `a3` becomes `a3_1` when its trigger `g3` occurs in
//!   the sentence and `a3_2` otherwise. Triggers sit at a random distance from
//!   the ambiguous word, on either side.
//!
//! Word frequencies follow a Zipf law over the content vocabulary. Every
//! source token carries a tag (`function`, `content`, `ambiguous`, `trigger`).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    Lexicon,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "lexicon" => Ok(Task::Lexicon),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected copy|reverse|lexicon"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Lexicon => "lexicon",
        })
    }
}

/// Relative sizes of train/valid/test, written `10/1/1` in configs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitWeights(pub [f64; 3]);

impl Default for SplitWeights {
    fn default() -> Self {
        SplitWeights([10.0, 1.0, 1.0])
    }
}

impl FromStr for SplitWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split('/')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split weights {s:?} are not numbers")))?;
        match parts.as_slice() {
            &[a, b, c] if a > 0.0 && b > 0.0 && c > 0.0 => Ok(SplitWeights([a, b, c])),
            _ => Err(Error::Config(format!(
                "split weights {s:?} must be three positive numbers"
            ))),
        }
    }
}

impl fmt::Display for SplitWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{a}/{b}/{c}")
    }
}

impl Serialize for SplitWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SplitWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub task: Task,
    /// Total number of sentence pairs over all splits.
    pub size: usize,
    pub splits: SplitWeights,
    pub seed: u64,
    pub content_words: usize,
    /// The most frequent content words are tagged `function`.
    pub function_words: usize,
    pub ambiguous_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
    /// Share of lexicon sentences that contain an ambiguous word.
    pub ambiguous_rate: f64,
    /// Largest gap between an ambiguous word and its trigger.
    pub max_trigger_distance: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            size: 12_000,
            splits: SplitWeights::default(),
            seed: 1,
            content_words: 40,
            function_words: 6,
            ambiguous_words: 6,
            min_len: 3,
            max_len: 10,
            zipf_exponent: 1.0,
            ambiguous_rate: 0.6,
            max_trigger_distance: 4,
        }
    }
}

/// Smallest number of pairs any split may receive.
pub const MIN_SPLIT: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub tags: Vec<String>,
}

impl Pair {
    pub fn src_line(&self) -> String {
        self.src.join(" ")
    }

    pub fn tgt_line(&self) -> String {
        self.tgt.join(" ")
    }

    /// Tags of the target words; every task aligns words one to one.
    pub fn target_tags(&self, task: Task) -> Vec<String> {
        let mut tags = self.tags.clone();
        if task == Task::Reverse {
            tags.reverse();
        }
        tags
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveRecord {
    pub source: String,
    pub correct: String,
    pub incorrect: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParallelCorpus {
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

fn content(i: usize) -> String {
    format!("w{i}")
}

fn translated(i: usize) -> String {
    format!("v{i}")
}

pub fn ambiguous_word(j: usize) -> String {
    format!("a{j}")
}

pub fn trigger_word(j: usize) -> String {
    format!("g{j}")
}

pub fn sense(j: usize, s: usize) -> String {
    format!("a{j}_{s}")
}

fn translate_trigger(j: usize) -> String {
    format!("g{j}'")
}

struct Generator<'a, R: Rng> {
    cfg: &'a CorpusConfig,
    zipf: Zipf<f64>,
    rng: R,
}

impl<R: Rng> Generator<'_, R> {
    fn word(&mut self) -> usize {
        self.zipf.sample(&mut self.rng) as usize - 1
    }

    fn tag(&self, i: usize) -> &'static str {
        if i < self.cfg.function_words {
            "function"
        } else {
            "content"
        }
    }

    fn plain(&mut self, len: usize) -> (Vec<usize>, Vec<String>) {
        let ids: Vec<usize> = (0..len).map(|_| self.word()).collect();
        let tags = ids.iter().map(|&i| self.tag(i).to_string()).collect();
        (ids, tags)
    }

    fn pair(&mut self) -> Pair {
        let len = self.rng.gen_range(self.cfg.min_len..=self.cfg.max_len);
        match self.cfg.task {
            Task::Copy | Task::Reverse => {
                let (ids, tags) = self.plain(len);
                let src: Vec<String> = ids.into_iter().map(content).collect();
                let mut tgt = src.clone();
                if self.cfg.task == Task::Reverse {
                    tgt.reverse();
                }
                Pair { src, tgt, tags }
            }
            Task::Lexicon => self.lexicon_pair(len),
        }
    }

    fn lexicon_pair(&mut self, len: usize) -> Pair {
        let (ids, tags) = self.plain(len);
        let mut src: Vec<String> = ids.iter().map(|&i| content(i)).collect();
        let mut tgt: Vec<String> = ids.iter().map(|&i| translated(i)).collect();
        let mut tags = tags;
        if self.cfg.ambiguous_words > 0 && self.rng.gen_bool(self.cfg.ambiguous_rate) {
            let j = self.rng.gen_range(0..self.cfg.ambiguous_words);
            let at = self.rng.gen_range(0..=src.len());
            let with_trigger = self.rng.gen_bool(0.5);
            src.insert(at, ambiguous_word(j));
            tgt.insert(at, sense(j, if with_trigger { 1 } else { 2 }));
            tags.insert(at, "ambiguous".into());
            if with_trigger {
                let gap = self.rng.gen_range(1..=self.cfg.max_trigger_distance.max(1));
                let pos = if self.rng.gen_bool(0.5) {
                    at.saturating_sub(gap - 1)
                } else {
                    (at + gap).min(src.len())
                };
                src.insert(pos, trigger_word(j));
                tgt.insert(pos, translate_trigger(j));
                tags.insert(pos, "trigger".into());
            }
        }
        Pair { src, tgt, tags }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sentence lengths {}..={} are invalid",
                self.min_len, self.max_len
            )));
        }
        if self.content_words == 0 || self.function_words > self.content_words {
            return Err(Error::Config(
                "need at least one content word and no more function than content words".into(),
            ));
        }
        if self.zipf_exponent.is_nan() || self.zipf_exponent <= 0.0 {
            return Err(Error::Config("zipf_exponent must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_rate) {
            return Err(Error::Config("ambiguous_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn split_sizes(&self) -> Result<[usize; 3]> {
        let total: f64 = self.splits.0.iter().sum();
        let valid = (self.size as f64 * self.splits.0[1] / total).round() as usize;
        let test = (self.size as f64 * self.splits.0[2] / total).round() as usize;
        let train = self.size.saturating_sub(valid + test);
        let sizes = [train, valid, test];
        if sizes.iter().any(|&s| s < MIN_SPLIT) {
            return Err(Error::InvalidArgument(format!(
                "corpus size {} yields splits {sizes:?}; every split needs at least {MIN_SPLIT} pair",
                self.size
            )));
        }
        Ok(sizes)
    }
}

/// Deterministic corpus whose splits share no source sentence.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<ParallelCorpus> {
    cfg.validate()?;
    let sizes = cfg.split_sizes()?;
    let mut gen = Generator {
        cfg,
        zipf: Zipf::new(cfg.content_words as u64, cfg.zipf_exponent)
            .map_err(|e| Error::Config(format!("zipf distribution: {e}")))?,
        rng: SeedStream::new(cfg.seed).split("corpus").rng(),
    };
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(cfg.size);
    let mut attempts = 0usize;
    while pairs.len() < cfg.size {
        attempts += 1;
        if attempts > cfg.size * 50 + 1000 {
            return Err(Error::InvalidArgument(format!(
                "could only draw {} distinct sentences; enlarge the vocabulary or lengths",
                pairs.len()
            )));
        }
        let pair = gen.pair();
        if seen.insert(pair.src.clone()) {
            pairs.push(pair);
        }
    }
    let test = pairs.split_off(sizes[0] + sizes[1]);
    let valid = pairs.split_off(sizes[0]);
    Ok(ParallelCorpus {
        train: pairs,
        valid,
        test,
    })
}

/// One record per pair containing an ambiguous word: the gold target plus the
/// target with the other sense substituted.
pub fn contrastive_set(pairs: &[Pair]) -> Vec<ContrastiveRecord> {
    pairs
        .iter()
        .filter_map(|p| {
            let at = p.tags.iter().position(|t| t == "ambiguous")?;
            let word = &p.tgt[at];
            let (stem, s) = word.rsplit_once('_')?;
            let other = if s == "1" { "2" } else { "1" };
            let mut wrong = p.tgt.clone();
            wrong[at] = format!("{stem}_{other}");
            Some(ContrastiveRecord {
                source: p.src_line(),
                correct: p.tgt_line(),
                incorrect: vec![wrong.join(" ")],
            })
        })
        .collect()
}

impl ParallelCorpus {
    pub fn split(&self, name: &str) -> Result<&[Pair]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }

    pub fn all_lines(&self) -> impl Iterator<Item = String> + '_ {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .flat_map(|p| [p.src_line(), p.tgt_line()])
    }

    /// Writes `{split}.src`, `{split}.tgt`, `{split}.tags` and
    /// `contrastive.jsonl` (from the test split) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in SPLIT_NAMES {
            let pairs = self.split(name)?;
            let write = |ext: &str, f: &dyn Fn(&Pair) -> String| -> Result<()> {
                let path = dir.join(format!("{name}.{ext}"));
                let mut text = String::new();
                for p in pairs {
                    text.push_str(&f(p));
                    text.push('\n');
                }
                fs::write(&path, text).map_err(|e| Error::io(path, e))
            };
            write("src", &|p| p.src_line())?;
            write("tgt", &|p| p.tgt_line())?;
            write("tags", &|p| p.tags.join(" "))?;
        }
        write_contrastive(&dir.join("contrastive.jsonl"), &contrastive_set(&self.test))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut corpus = ParallelCorpus::default();
        for name in SPLIT_NAMES {
            let read = |ext: &str| -> Result<Vec<Vec<String>>> {
                let path = dir.join(format!("{name}.{ext}"));
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                Ok(text
                    .lines()
                    .map(|l| l.split_whitespace().map(String::from).collect())
                    .collect())
            };
            let (src, tgt) = (read("src")?, read("tgt")?);
            if src.len() != tgt.len() {
                return Err(Error::Data(format!(
                    "{name}: {} source lines but {} target lines",
                    src.len(),
                    tgt.len()
                )));
            }
            let tags = if dir.join(format!("{name}.tags")).exists() {
                read("tags")?
            } else {
                src.iter().map(|s| vec!["content".to_string(); s.len()]).collect()
            };
            let pairs = src
                .into_iter()
                .zip(tgt)
                .zip(tags)
                .enumerate()
                .map(|(i, ((src, tgt), tags))| {
                    if tags.len() != src.len() {
                        return Err(Error::Data(format!(
                            "{name}.tags line {} does not align with its source",
                            i + 1
                        )));
                    }
                    Ok(Pair { src, tgt, tags })
                })
                .collect::<Result<Vec<_>>>()?;
            match name {
                "train" => corpus.train = pairs,
                "valid" => corpus.valid = pairs,
                _ => corpus.test = pairs,
            }
        }
        Ok(corpus)
    }
}

pub fn write_contrastive(path: &Path, records: &[ContrastiveRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json("contrastive record", e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_contrastive(path: &Path) -> Result<Vec<ContrastiveRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r =
            serde_json::from_str(&line).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?;
        records.push(r);
    }
    Ok(records)
}

/// Shuffles pairs in place with a seeded generator.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    items.shuffle(&mut SeedStream::new(seed).split("shuffle").rng());
}
