//! `translate`: beam-search decoding of a source file.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use lexshort_core::data::Vocabulary;
use lexshort_core::eval::{translate, DecodeOptions, Hypothesis};
use lexshort_core::Model;

use crate::config::RunConfig;

pub fn decode_options(cfg: &RunConfig) -> DecodeOptions {
    let mut opts = DecodeOptions::new(cfg.decode.beam, cfg.decode.max_len);
    opts.batch = cfg.decode.batch.max(1);
    opts
}

/// Translations of `lines`, one output line per input line.
pub fn translate_lines(
    model: &Model<f32>,
    vocab: &Vocabulary,
    lines: &[String],
    opts: &DecodeOptions,
) -> Result<Vec<String>> {
    if lines.is_empty() {
        return Ok(Vec::new());
    }
    let srcs = super::encode_lines(vocab, lines, model.config().max_len, "source")?;
    let hyps = translate(model, &srcs, opts)?;
    let unfinished = hyps.iter().filter(|h| !h.finished).count();
    if unfinished > 0 {
        log::warn!(
            "{unfinished} of {} translations stopped at the length limit without EOS",
            hyps.len()
        );
    }
    Ok(hyps.iter().map(|h: &Hypothesis| vocab.decode(h.output())).collect())
}

/// Reads `input`, writes translations to `output` or standard output.
pub fn run(cfg: &RunConfig, checkpoint: &Path, input: &Path, output: Option<&Path>) -> Result<usize> {
    let lines = super::read_lines(input)?;
    let ckpt = super::load_checkpoint(checkpoint, cfg.train.average_last_k)?;
    let vocab = super::checkpoint_vocab(&ckpt, cfg)?;
    let model = ckpt.model()?;
    let out = translate_lines(&model, &vocab, &lines, &decode_options(cfg))?;
    let mut text = String::new();
    for line in &out {
        text.push_str(line);
        text.push('\n');
    }
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(out.len())
}
