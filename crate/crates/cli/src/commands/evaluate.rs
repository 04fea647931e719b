//! `evaluate`: corpus BLEU of decoded (or supplied) translations and
//! contrastive sense accuracy, reported as JSON.

use std::path::{Path, PathBuf};

use anyhow::Result;
use lexshort_core::data::corpus::read_contrastive;
use lexshort_core::eval::{contrastive_score, corpus_bleu, Bleu, ContrastiveReport};
use lexshort_core::Error;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    /// Defaults to `data_dir/test.src`.
    pub source: Option<PathBuf>,
    /// Defaults to `data_dir/test.tgt`.
    pub reference: Option<PathBuf>,
    /// Pre-computed translations; skips decoding.
    pub hypotheses: Option<PathBuf>,
    /// Defaults to `data_dir/contrastive.jsonl` when that file exists.
    pub contrastive: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub variant: String,
    pub reference: PathBuf,
    pub sentences: usize,
    /// Beam width used for decoding; absent when hypotheses were supplied.
    pub beam: Option<usize>,
    pub bleu: Bleu,
    /// Share of hypotheses identical to their reference.
    pub exact_match: f64,
    pub contrastive: Option<ContrastiveReport>,
}

pub fn run(cfg: &RunConfig, checkpoint: &Path, inputs: &EvalInputs) -> Result<EvalReport> {
    let data = &cfg.paths.data_dir;
    let reference = inputs.reference.clone().unwrap_or_else(|| data.join("test.tgt"));
    let refs = super::read_lines(&reference)?;
    let ckpt = super::load_checkpoint(checkpoint, cfg.train.average_last_k)?;
    let vocab = super::checkpoint_vocab(&ckpt, cfg)?;
    let model = ckpt.model()?;

    let (hyps, beam) = match &inputs.hypotheses {
        Some(path) => (super::read_lines(path)?, None),
        None => {
            let source = inputs.source.clone().unwrap_or_else(|| data.join("test.src"));
            let srcs = super::read_lines(&source)?;
            if srcs.len() != refs.len() {
                return Err(Error::Data(format!(
                    "{} has {} lines but {} has {}",
                    source.display(),
                    srcs.len(),
                    reference.display(),
                    refs.len()
                ))
                .into());
            }
            let opts = super::translate::decode_options(cfg);
            (
                super::translate::translate_lines(&model, &vocab, &srcs, &opts)?,
                Some(opts.beam),
            )
        }
    };
    let bleu = corpus_bleu(&hyps, &refs)?;
    let exact = hyps
        .iter()
        .zip(&refs)
        .filter(|(h, r)| h.split_whitespace().eq(r.split_whitespace()))
        .count();

    let contrastive_path = match &inputs.contrastive {
        Some(p) => Some(p.clone()),
        None => Some(data.join("contrastive.jsonl")).filter(|p| p.exists()),
    };
    let contrastive = match contrastive_path {
        Some(path) => {
            let records = read_contrastive(&path)?;
            if records.is_empty() && inputs.contrastive.is_none() {
                None
            } else {
                Some(contrastive_score(
                    &model,
                    &vocab,
                    &records,
                    cfg.eval.normalization,
                    cfg.eval.batch,
                )?)
            }
        }
        None => None,
    };
    Ok(EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        config_hash: ckpt.manifest.config_hash.clone(),
        seed: ckpt.manifest.seed,
        step: ckpt.manifest.step,
        variant: ckpt.manifest.config.variant.kind.to_string(),
        reference,
        sentences: refs.len(),
        beam,
        bleu,
        exact_match: exact as f64 / refs.len().max(1) as f64,
        contrastive,
    })
}
