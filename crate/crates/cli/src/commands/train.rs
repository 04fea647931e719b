//! `train`: fits a model on a generated corpus, with periodic greedy
//! validation, checkpoints, metrics and resumption.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lexshort_core::data::{encode_pairs, encode_sentence, BatchStream, Pair, ParallelCorpus, Vocabulary};
use lexshort_core::eval::{corpus_bleu, greedy, DecodeOptions};
use lexshort_core::model::ModelConfig;
use lexshort_core::train::{prefetch, Control, TrainConfig, TrainOutcome, Trainer};
use lexshort_core::Model;
use serde::Serialize;

use crate::config::RunConfig;
use crate::exit::Usage;
use crate::plot::{line_chart, Series};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationScore {
    pub step: u64,
    /// Share of sentences decoded exactly.
    pub accuracy: f64,
    pub bleu: f64,
}

/// Greedy decoding of a fixed sentence set scored against its references.
pub struct Validator {
    srcs: Vec<Vec<usize>>,
    refs: Vec<Vec<usize>>,
    ref_text: Vec<String>,
    opts: DecodeOptions,
}

impl Validator {
    pub fn new(vocab: &Vocabulary, pairs: &[Pair], max_len: usize, batch: usize) -> Self {
        let mut opts = DecodeOptions::new(1, max_len);
        opts.batch = batch.max(1);
        Self {
            srcs: pairs.iter().map(|p| encode_sentence(vocab, &p.src)).collect(),
            refs: pairs.iter().map(|p| encode_sentence(vocab, &p.tgt)).collect(),
            ref_text: pairs.iter().map(Pair::tgt_line).collect(),
            opts,
        }
    }

    pub fn score(&self, model: &Model<f32>, vocab: &Vocabulary, step: u64) -> lexshort_core::Result<ValidationScore> {
        let hyps = greedy(model, &self.srcs, &self.opts)?;
        let exact = hyps.iter().zip(&self.refs).filter(|(h, r)| &h.tokens == *r).count();
        let text: Vec<String> = hyps.iter().map(|h| vocab.decode(h.output())).collect();
        Ok(ValidationScore {
            step,
            accuracy: exact as f64 / self.refs.len().max(1) as f64,
            bleu: corpus_bleu(&text, &self.ref_text)?.score,
        })
    }
}

pub struct FitOptions {
    pub train: TrainConfig,
    pub batch_tokens: usize,
    /// 0 validates on the whole validation split.
    pub validation_sentences: usize,
    pub stop_at_accuracy: Option<f64>,
    pub decode_max_len: usize,
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
}

pub struct FitResult {
    pub outcome: TrainOutcome,
    pub validation: Vec<ValidationScore>,
}

/// Trains `model` on the corpus' training split; with an output directory,
/// validation scores are appended to `validation.csv` as they arrive.
pub fn fit(
    model: &mut Model<f32>,
    vocab: &Vocabulary,
    corpus: &ParallelCorpus,
    opts: &FitOptions,
) -> Result<FitResult> {
    let valid = match opts.validation_sentences {
        0 => &corpus.valid[..],
        n => &corpus.valid[..n.min(corpus.valid.len())],
    };
    let validator = Validator::new(vocab, valid, opts.decode_max_len, 64);
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("validation.csv");
            let fresh = !opts.resume || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .with_context(|| format!("opening {}", path.display()))?;
            if fresh {
                writeln!(f, "step,accuracy,bleu")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut scores = Vec::new();
    let stream = BatchStream::new(encode_pairs(vocab, &corpus.train), opts.batch_tokens, opts.train.seed)?;
    let mut trainer = Trainer::new(opts.train.clone()).vocab(vocab).resume(opts.resume);
    if let Some(dir) = &opts.out_dir {
        trainer = trainer.output(dir);
    }
    let outcome = trainer
        .validation(|m, step| {
            let s = validator.score(m, vocab, step)?;
            log::info!("step {step}: validation accuracy {:.4}, BLEU {:.2}", s.accuracy, s.bleu);
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{},{:.6},{:.4}", s.step, s.accuracy, s.bleu).map_err(|e| lexshort_core::Error::Io {
                    path: "validation.csv".into(),
                    source: e,
                })?;
            }
            scores.push(s);
            Ok(match opts.stop_at_accuracy {
                Some(target) if s.accuracy >= target => Control::Stop,
                _ => Control::Continue,
            })
        })
        .run(model, prefetch(stream, 16))?;
    Ok(FitResult {
        outcome,
        validation: scores,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub variant: String,
    pub config_hash: String,
    pub last_step: u64,
    pub stopped_early: bool,
    pub final_loss: Option<f64>,
    pub validation: Vec<ValidationScore>,
}

/// Model settings with the vocabulary size filled in.
pub fn resolved_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    match m.vocab_size {
        0 => m.vocab_size = vocab.len(),
        n if n != vocab.len() => {
            return Err(Usage(format!(
                "model.vocab_size is {n} but the vocabulary has {} entries",
                vocab.len()
            ))
            .into())
        }
        _ => {}
    }
    m.validate()?;
    Ok(m)
}

pub fn run(cfg: &RunConfig, resume: bool, plot: bool) -> Result<TrainSummary> {
    let data = &cfg.paths.data_dir;
    let corpus = ParallelCorpus::load(data).with_context(|| format!("loading corpus from {}", data.display()))?;
    let vocab = Vocabulary::load(&data.join("vocab.json"))?;
    let mut resolved = cfg.clone();
    resolved.model = resolved_model(cfg, &vocab)?;
    resolved.train = cfg.resolved_train();
    resolved.train.validate()?;
    let run_dir = cfg.paths.run_dir.clone();
    resolved.echo(&run_dir)?;

    let mut model = Model::<f32>::new(resolved.model.clone())?;
    log::info!(
        "training {} ({} parameters) for {} steps, warm-up {}",
        resolved.model.variant.kind,
        model.params().scalar_count(),
        resolved.train.total_steps,
        resolved.train.warmup_steps
    );
    let opts = FitOptions {
        train: resolved.train.clone(),
        batch_tokens: cfg.batch_tokens,
        validation_sentences: cfg.validation.sentences,
        stop_at_accuracy: cfg.validation.stop_at_accuracy,
        decode_max_len: cfg.decode.max_len,
        out_dir: Some(run_dir.clone()),
        resume,
    };
    let result = fit(&mut model, &vocab, &corpus, &opts)?;
    let summary = TrainSummary {
        run_dir: run_dir.clone(),
        variant: resolved.model.variant.kind.to_string(),
        config_hash: resolved.model.hash(),
        last_step: result.outcome.last_step,
        stopped_early: result.outcome.stopped_early,
        final_loss: result.outcome.metrics.last().map(|m| m.loss),
        validation: result.validation.clone(),
    };
    super::write_json(&run_dir.join("train_summary.json"), &summary)?;
    if plot {
        plot_run(&run_dir, &result)?;
    }
    Ok(summary)
}

fn plot_run(dir: &Path, result: &FitResult) -> Result<()> {
    let m = &result.outcome.metrics;
    let loss: Vec<(f64, f64)> = m.iter().map(|s| (s.step as f64, s.loss)).collect();
    line_chart(
        &dir.join("loss.svg"),
        "training loss",
        "step",
        "loss per token",
        &[Series::new("loss", loss)],
    )?;
    let lr: Vec<(f64, f64)> = m.iter().map(|s| (s.step as f64, s.lr)).collect();
    line_chart(
        &dir.join("lr.svg"),
        "learning rate",
        "step",
        "rate",
        &[Series::new("lr", lr)],
    )?;
    if !result.validation.is_empty() {
        let v = &result.validation;
        line_chart(
            &dir.join("validation.svg"),
            "validation",
            "step",
            "score",
            &[
                Series::new(
                    "accuracy x 100",
                    v.iter().map(|s| (s.step as f64, 100.0 * s.accuracy)).collect(),
                ),
                Series::new("BLEU", v.iter().map(|s| (s.step as f64, s.bleu)).collect()),
            ],
        )?;
    }
    Ok(())
}
