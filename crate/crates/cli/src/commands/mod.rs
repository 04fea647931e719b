//! One module per subcommand plus the loaders they share.

pub mod evaluate;
pub mod gen_data;
pub mod probe;
pub mod train;
pub mod translate;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lexshort_core::data::{Vocabulary, EOS, UNK};
use lexshort_core::model::Checkpoint;
use lexshort_core::train::average_last;
use lexshort_core::Error;

use crate::config::RunConfig;

/// A checkpoint file, or a run directory whose newest `k` checkpoints are averaged.
pub fn load_checkpoint(path: &Path, k: usize) -> Result<Checkpoint> {
    if path.is_dir() {
        let ckpt =
            average_last(path, k.max(1)).with_context(|| format!("averaging checkpoints in {}", path.display()))?;
        log::info!("averaged the newest {} checkpoints of {}", k.max(1), path.display());
        Ok(ckpt)
    } else {
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
    }
}

/// The vocabulary stored in the checkpoint, else `data_dir/vocab.json`.
pub fn checkpoint_vocab(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Vocabulary> {
    if let Some(v) = &ckpt.manifest.vocab {
        return Ok(v.clone());
    }
    let path = cfg.paths.data_dir.join("vocab.json");
    Vocabulary::load(&path).with_context(|| "checkpoint has no embedded vocabulary".to_string())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Ids plus `EOS` per line; fails on lines longer than the model accepts.
pub fn encode_lines(vocab: &Vocabulary, lines: &[String], max_len: usize, what: &str) -> Result<Vec<Vec<usize>>> {
    let mut unknown = 0;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let mut ids = vocab.encode(line);
        unknown += ids.iter().filter(|&&t| t == UNK).count();
        ids.push(EOS);
        if ids.len() > max_len {
            return Err(Error::Data(format!(
                "{what} line {} has {} tokens with EOS; the model accepts at most {max_len}",
                i + 1,
                ids.len()
            ))
            .into());
        }
        out.push(ids);
    }
    if unknown > 0 {
        log::warn!("{unknown} {what} tokens are not in the vocabulary and map to UNK");
    }
    Ok(out)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
