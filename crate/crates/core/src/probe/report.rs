//! Probe reports as JSON plus CSV tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::analysis::{conditioned_accuracy, cosine_profile, Condition, ConditionedTable, CosineRow};
use super::classifier::{train_probe, ProbeConfig, ProbeResult};
use super::dump::{Network, StateDump};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub network: Network,
    pub layer: usize,
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config_hash: String,
    pub seed: u64,
    pub probe: ProbeConfig,
    pub accuracy: Vec<AccuracyRow>,
    pub cosine: Vec<CosineRow>,
    pub frequency: ConditionedTable,
    pub tags: ConditionedTable,
}

/// One probe per layer `0..=n_layers` of each network present in the dump.
pub fn run_probes(dump: &StateDump, cfg: &ProbeConfig, networks: &[Network]) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::new();
    for &network in networks {
        for layer in 0..=dump.n_layers {
            let r = train_probe(dump, network, layer, cfg)?;
            log::info!("probe {} layer {layer}: accuracy {:.4}", network.as_str(), r.accuracy);
            out.push(r);
        }
    }
    Ok(out)
}

impl ProbeReport {
    pub fn new(dump: &StateDump, probes: &[ProbeResult], cfg: &ProbeConfig, config_hash: String, bins: usize) -> Self {
        Self {
            config_hash,
            seed: cfg.seed,
            probe: cfg.clone(),
            accuracy: probes
                .iter()
                .map(|p| AccuracyRow {
                    network: p.network,
                    layer: p.layer,
                    accuracy: p.accuracy,
                    train_size: p.train_size,
                    test_size: p.test_size,
                    epochs_run: p.epochs_run,
                })
                .collect(),
            cosine: cosine_profile(dump),
            frequency: conditioned_accuracy(dump, probes, Condition::Frequency, bins),
            tags: conditioned_accuracy(dump, probes, Condition::Tag, bins),
        }
    }

    pub fn layer_accuracy(&self, network: Network, layer: usize) -> Option<f64> {
        self.accuracy
            .iter()
            .find(|r| r.network == network && r.layer == layer)
            .map(|r| r.accuracy)
    }

    /// Writes `probe_report.json` and the accuracy, cosine, frequency and tag CSVs.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("probe_report.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("probe report", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        write_csv(&dir.join("probe_accuracy.csv"), &self.accuracy)?;
        write_csv(&dir.join("cosine.csv"), &self.cosine)?;
        write_csv(&dir.join("frequency_accuracy.csv"), &self.frequency.rows)?;
        write_csv(&dir.join("tag_accuracy.csv"), &self.tags.rows)
    }
}

/// Serializes rows with a header line.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let data = || -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    };
    data().map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
