//! Per-position hidden states of every layer, with token metadata.
//!
//! Encoder entries align with source tokens. Decoder entries align with the
//! decoder input under teacher forcing (`BOS`, then the target shifted right),
//! so position `i` is labeled with the token the decoder reads there.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Pair, Task, Vocabulary, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, Padded};
use crate::tensor::io::{read_all, write_tensor};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Encoder,
    Decoder,
}

impl Network {
    pub const BOTH: [Network; 2] = [Network::Encoder, Network::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Network::Encoder => "encoder",
            Network::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub network: Network,
    pub sentence: usize,
    pub position: usize,
    pub token: usize,
    pub tag: String,
    /// Occurrences of `token` in the reference corpus.
    pub frequency: u64,
    /// The word was outside the vocabulary and mapped to UNK.
    pub unknown: bool,
}

/// One sentence pair prepared for dumping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpSentence {
    /// Source ids including the final EOS.
    pub src: Vec<usize>,
    /// Target ids including the final EOS.
    pub tgt: Vec<usize>,
    pub src_tags: Vec<String>,
    pub tgt_tags: Vec<String>,
}

impl DumpSentence {
    pub fn from_pair(vocab: &Vocabulary, pair: &Pair, task: Task) -> Self {
        let ids = |words: &[String]| -> Vec<usize> {
            let mut v: Vec<usize> = words.iter().map(|w| vocab.id(w).unwrap_or(UNK)).collect();
            v.push(EOS);
            v
        };
        let mut src_tags = pair.tags.clone();
        src_tags.push("eos".into());
        let mut tgt_tags = pair.target_tags(task);
        tgt_tags.push("eos".into());
        Self {
            src: ids(&pair.src),
            tgt: ids(&pair.tgt),
            src_tags,
            tgt_tags,
        }
    }

    /// Decoder input ids and their tags.
    fn decoder_input(&self) -> (Vec<usize>, Vec<String>) {
        let n = self.tgt.len();
        let mut ids = vec![BOS];
        ids.extend_from_slice(&self.tgt[..n - 1]);
        let mut tags = vec!["bos".to_string()];
        tags.extend_from_slice(&self.tgt_tags[..n - 1]);
        (ids, tags)
    }
}

/// Token counts over source and target sides of `pairs`, EOS included.
pub fn token_frequencies(vocab: &Vocabulary, pairs: &[Pair]) -> Vec<u64> {
    let mut counts = vec![0u64; vocab.len()];
    for p in pairs {
        for w in p.src.iter().chain(&p.tgt) {
            counts[vocab.id(w).unwrap_or(UNK)] += 1;
        }
        counts[EOS] += 2;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DumpMeta {
    d_model: usize,
    n_layers: usize,
    vocab_size: usize,
    entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDump {
    pub d_model: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub entries: Vec<DumpEntry>,
    /// Per layer `0..=n_layers`, row-major `[entries, d_model]`.
    pub states: Vec<Vec<f32>>,
    /// Scaled embedding-table rows `[entries, d_model]`, without positions.
    pub embeddings: Vec<f32>,
}

const INDEX: &str = "index.jsonl";
const META: &str = "meta.json";
const BLOB: &str = "states.bin";

impl StateDump {
    pub fn state(&self, layer: usize, entry: usize) -> &[f32] {
        &self.states[layer][entry * self.d_model..(entry + 1) * self.d_model]
    }

    pub fn embedding(&self, entry: usize) -> &[f32] {
        &self.embeddings[entry * self.d_model..(entry + 1) * self.d_model]
    }

    /// Entry indices belonging to `network`, in dump order.
    pub fn indices(&self, network: Network) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].network == network)
            .collect()
    }

    pub fn sentence_count(&self) -> usize {
        self.entries.iter().map(|e| e.sentence + 1).max().unwrap_or(0)
    }

    /// Writes `meta.json`, a JSON-lines index and one tensor blob file.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = DumpMeta {
            d_model: self.d_model,
            n_layers: self.n_layers,
            vocab_size: self.vocab_size,
            entries: self.entries.len(),
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("dump meta", e))?;
        fs::write(dir.join(META), text).map_err(|e| Error::io(dir.join(META), e))?;

        let path = dir.join(INDEX);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|e| Error::json("dump index", e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join(BLOB);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        let shape = vec![self.entries.len(), self.d_model];
        write_tensor(
            &mut w,
            "embedding",
            &Tensor::new(shape.clone(), self.embeddings.clone())?,
        )?;
        for (l, s) in self.states.iter().enumerate() {
            write_tensor(&mut w, &format!("layer.{l}"), &Tensor::new(shape.clone(), s.clone())?)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DumpMeta = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;

        let path = dir.join(INDEX);
        let reader = BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
        let mut entries = Vec::with_capacity(meta.entries);
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            let entry =
                serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
            entries.push(entry);
        }
        if entries.len() != meta.entries {
            return Err(Error::Data(format!(
                "{}: {} entries, expected {}",
                path.display(),
                entries.len(),
                meta.entries
            )));
        }

        let path = dir.join(BLOB);
        let mut reader = BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
        let blobs = read_all::<f32, _>(&mut reader)?;
        let expected: Vec<String> = std::iter::once("embedding".to_string())
            .chain((0..=meta.n_layers).map(|l| format!("layer.{l}")))
            .collect();
        let names: Vec<&String> = blobs.iter().map(|(n, _)| n).collect();
        if names.len() != expected.len() || names.iter().zip(&expected).any(|(a, b)| *a != b) {
            return Err(Error::Data(format!("{}: unexpected tensors {names:?}", path.display())));
        }
        let shape = [meta.entries, meta.d_model];
        if let Some((n, t)) = blobs.iter().find(|(_, t)| t.shape() != shape) {
            return Err(Error::Data(format!(
                "{}: tensor {n} has shape {:?}",
                path.display(),
                t.shape()
            )));
        }
        let mut tensors = blobs.into_iter().map(|(_, t)| t.into_vec());
        let embeddings = tensors.next().expect("checked above");
        Ok(Self {
            d_model: meta.d_model,
            n_layers: meta.n_layers,
            vocab_size: meta.vocab_size,
            entries,
            states: tensors.collect(),
            embeddings,
        })
    }
}

/// Runs the frozen model in evaluation mode and records `H_0 ..= H_N` of both
/// stacks at every non-padding position.
pub fn dump_states(
    model: &Model<f32>,
    sentences: &[DumpSentence],
    frequencies: &[u64],
    batch: usize,
) -> Result<StateDump> {
    let c = model.config();
    let (d, n_layers) = (c.d_model, c.n_layers);
    if frequencies.len() != c.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "{} frequencies for a vocabulary of {}",
            frequencies.len(),
            c.vocab_size
        )));
    }
    for (i, s) in sentences.iter().enumerate() {
        if s.src.is_empty() || s.tgt.is_empty() || s.src.len() != s.src_tags.len() || s.tgt.len() != s.tgt_tags.len() {
            return Err(Error::Data(format!("sentence {i} has empty tokens or misaligned tags")));
        }
    }
    // one buffer per network so the order is independent of batching
    let empty = || StateDump {
        d_model: d,
        n_layers,
        vocab_size: c.vocab_size,
        entries: Vec::new(),
        states: vec![Vec::new(); n_layers + 1],
        embeddings: Vec::new(),
    };
    let mut parts = [empty(), empty()];
    let embed = model.layout().embed;
    let scale = (d as f64).sqrt();
    for (chunk_no, chunk) in sentences.chunks(batch.max(1)).enumerate() {
        let first = chunk_no * batch.max(1);
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|s| s.src.clone()).collect();
        let tgts: Vec<Vec<usize>> = chunk.iter().map(|s| s.tgt.clone()).collect();
        let dec_inputs: Vec<(Vec<usize>, Vec<String>)> = chunk.iter().map(DumpSentence::decoder_input).collect();
        let src = Padded::new(&srcs)?;
        let len = tgts.iter().map(Vec::len).max().unwrap_or(0);
        let input = Padded::shifted(&tgts, len)?;

        let mut tape = Tape::new();
        let mut f = model.forward(&mut tape, Mode::Eval);
        let enc = f.encode(&src)?;
        let dec = f.decode(&input, &enc)?;
        let table = f.params()[embed];
        let lookups = [&src, &input]
            .into_iter()
            .map(|p| {
                let rows = f.tape.gather(table, &p.ids, &[p.batch, p.len])?;
                f.tape.scale(rows, scale)
            })
            .collect::<Result<Vec<_>>>()?;

        for (dump, network, padded, states, lookup) in [
            (0, Network::Encoder, &src, &enc.states, lookups[0]),
            (1, Network::Decoder, &input, &dec.states, lookups[1]),
        ] {
            let dump = &mut parts[dump];
            for (b, sentence) in chunk.iter().enumerate() {
                let (ids, tags) = match network {
                    Network::Encoder => (&sentence.src, &sentence.src_tags),
                    Network::Decoder => (&dec_inputs[b].0, &dec_inputs[b].1),
                };
                for (t, (&token, tag)) in ids.iter().zip(tags).enumerate() {
                    let row = (b * padded.len + t) * d;
                    dump.entries.push(DumpEntry {
                        network,
                        sentence: first + b,
                        position: t,
                        token,
                        tag: tag.clone(),
                        frequency: frequencies[token],
                        unknown: token == UNK,
                    });
                    for (l, &s) in states.iter().enumerate() {
                        dump.states[l].extend_from_slice(&tape.value(s).data()[row..row + d]);
                    }
                    dump.embeddings
                        .extend_from_slice(&tape.value(lookup).data()[row..row + d]);
                }
            }
        }
    }
    let [mut dump, decoder] = parts;
    dump.entries.extend(decoder.entries);
    dump.embeddings.extend(decoder.embeddings);
    for (a, b) in dump.states.iter_mut().zip(decoder.states) {
        a.extend(b);
    }
    Ok(dump)
}
