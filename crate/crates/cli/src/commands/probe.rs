//! `probe` and `analyze`: hidden-state dumps, per-layer probing classifiers,
//! cosine and conditioned-accuracy tables, and gate statistics.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lexshort_core::data::{encode_pairs, pack, ParallelCorpus, Task};
use lexshort_core::probe::{
    dump_states, gate_stats, run_probes, token_frequencies, write_csv, DumpSentence, GateRow, Network, ProbeReport,
    StateDump,
};
use lexshort_core::{Error, Model};

use crate::config::RunConfig;
use crate::plot::{line_chart, Series};

#[derive(Debug, Clone, Default)]
pub struct ProbeInputs {
    /// Reuse a saved dump instead of running the model again.
    pub dump: Option<PathBuf>,
    /// Also write gate statistics.
    pub gates: bool,
    pub plot: bool,
}

#[derive(Debug, Clone)]
pub struct ProbeOutput {
    pub report: ProbeReport,
    /// `None` when gates were not requested or the model has none.
    pub gates: Option<Vec<GateRow>>,
}

/// Task recorded by `gen-data` next to the corpus, else the configured one.
fn corpus_task(cfg: &RunConfig) -> Task {
    let path = cfg.paths.data_dir.join("config.json");
    fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<RunConfig>(&t).ok())
        .map_or(cfg.data.task, |c| c.data.task)
}

pub fn has_gates(model: &Model<f32>) -> bool {
    let c = model.config();
    let kind = c.variant.kind;
    c.gated && (kind.has_self_shortcuts() || kind.has_cross_shortcuts()) && (c.variant.encoder || c.variant.decoder)
}

pub fn run(cfg: &RunConfig, checkpoint: &Path, out: &Path, inputs: &ProbeInputs) -> Result<ProbeOutput> {
    cfg.probe.validate()?;
    let ckpt = super::load_checkpoint(checkpoint, cfg.train.average_last_k)?;
    let vocab = super::checkpoint_vocab(&ckpt, cfg)?;
    let model = ckpt.model()?;
    let data = &cfg.paths.data_dir;
    let corpus = ParallelCorpus::load(data).with_context(|| format!("loading corpus from {}", data.display()))?;
    let mut pairs = corpus.split(&cfg.analysis.split)?;
    if cfg.analysis.max_sentences > 0 {
        pairs = &pairs[..cfg.analysis.max_sentences.min(pairs.len())];
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("split {:?} has no sentences to probe", cfg.analysis.split)).into());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.echo(out)?;

    let dump = match &inputs.dump {
        Some(dir) => {
            let d = StateDump::load(dir)?;
            let mc = model.config();
            if d.d_model != mc.d_model || d.n_layers != mc.n_layers || d.vocab_size != mc.vocab_size {
                return Err(Error::Data(format!(
                    "dump in {} does not match the checkpoint's shape",
                    dir.display()
                ))
                .into());
            }
            d
        }
        None => {
            let task = corpus_task(cfg);
            let sentences: Vec<DumpSentence> = pairs.iter().map(|p| DumpSentence::from_pair(&vocab, p, task)).collect();
            let freq = token_frequencies(&vocab, &corpus.train);
            let d = dump_states(&model, &sentences, &freq, cfg.analysis.batch)?;
            d.save(&out.join("dump"))?;
            d
        }
    };
    log::info!(
        "probing {} entries from {} sentences",
        dump.entries.len(),
        dump.sentence_count()
    );
    let probes = run_probes(&dump, &cfg.probe, &cfg.analysis.networks)?;
    let report = ProbeReport::new(
        &dump,
        &probes,
        &cfg.probe,
        ckpt.manifest.config_hash.clone(),
        cfg.analysis.frequency_bins,
    );
    report.save(out)?;

    let gates = if !inputs.gates {
        None
    } else if !has_gates(&model) {
        log::info!(
            "variant {} has no shortcut gates; skipping gate statistics",
            model.config().variant.kind
        );
        None
    } else {
        let batches = pack(&encode_pairs(&vocab, pairs), cfg.analysis.gate_batch_tokens);
        let rows = gate_stats(&model, &batches)?;
        write_csv(&out.join("gates.csv"), &rows)?;
        Some(rows)
    };
    if inputs.plot {
        plot(out, &report, gates.as_deref())?;
    }
    Ok(ProbeOutput { report, gates })
}

fn plot(out: &Path, report: &ProbeReport, gates: Option<&[GateRow]>) -> Result<()> {
    let per_network = |f: &dyn Fn(Network) -> Vec<(f64, f64)>| -> Vec<Series> {
        Network::BOTH
            .iter()
            .map(|&n| Series::new(n.as_str(), f(n)))
            .filter(|s| !s.points.is_empty())
            .collect()
    };
    let acc = per_network(&|n| {
        report
            .accuracy
            .iter()
            .filter(|r| r.network == n)
            .map(|r| (r.layer as f64, 100.0 * r.accuracy))
            .collect()
    });
    line_chart(
        &out.join("probe_accuracy.svg"),
        "probe accuracy",
        "layer",
        "accuracy (%)",
        &acc,
    )?;
    let cos = per_network(&|n| {
        report
            .cosine
            .iter()
            .filter(|r| r.network == n)
            .map(|r| (r.layer as f64, r.mean_cosine))
            .collect()
    });
    line_chart(&out.join("cosine.svg"), "cosine(E, H_l)", "layer", "mean cosine", &cos)?;
    if let Some(rows) = gates {
        let mut series: Vec<Series> = Vec::new();
        for r in rows {
            let name = format!("{}.{}.{}", r.side, r.site, r.gate);
            match series.iter_mut().find(|s| s.name == name) {
                Some(s) => s.points.push((r.layer as f64, r.mean)),
                None => series.push(Series::new(name, vec![(r.layer as f64, r.mean)])),
            }
        }
        line_chart(
            &out.join("gates.svg"),
            "mean gate activation",
            "layer",
            "mean r",
            &series,
        )?;
    }
    Ok(())
}
