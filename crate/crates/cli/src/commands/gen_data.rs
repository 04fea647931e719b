//! `gen-data`: synthetic corpus splits, tags, vocabulary and contrastive set.

use std::path::PathBuf;

use anyhow::{Context, Result};
use lexshort_core::data::{gen_corpus, Vocabulary};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSummary {
    pub dir: PathBuf,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub vocab: usize,
}

/// Writes `{train,valid,test}.{src,tgt,tags}`, `contrastive.jsonl`,
/// `vocab.json` and `config.json` into `paths.data_dir`.
pub fn run(cfg: &RunConfig) -> Result<GenSummary> {
    let dir = &cfg.paths.data_dir;
    let corpus = gen_corpus(&cfg.data)?;
    corpus.save(dir)?;
    let vocab = Vocabulary::build(corpus.all_lines());
    vocab.save(&dir.join("vocab.json"))?;
    cfg.echo(dir).context("echoing the configuration")?;
    log::info!(
        "{} corpus in {}: {}/{}/{} pairs, {} vocabulary entries",
        cfg.data.task,
        dir.display(),
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        vocab.len()
    );
    Ok(GenSummary {
        dir: dir.clone(),
        train: corpus.train.len(),
        valid: corpus.valid.len(),
        test: corpus.test.len(),
        vocab: vocab.len(),
    })
}
