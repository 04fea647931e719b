//! Cosine similarity profiles, conditioned probe accuracy and gate statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::classifier::ProbeResult;
use super::dump::{Network, StateDump};
use crate::error::{Error, Result};
use crate::model::{Batch, Mode, Model, Padded};
use crate::shortcuts::{Side, Site};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub network: Network,
    pub layer: usize,
    pub mean_cosine: f64,
    pub positions: usize,
    /// Positions dropped because one of the vectors had zero norm.
    pub skipped: usize,
}

/// `a·b / sqrt(|a|²|b|²)` in 64-bit; `None` when either norm is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some(ab / (aa * bb).sqrt())
}

/// Mean cosine between each position's embedding and its state at every layer.
pub fn cosine_profile(dump: &StateDump) -> Vec<CosineRow> {
    let mut rows = Vec::new();
    for network in Network::BOTH {
        let idx = dump.indices(network);
        if idx.is_empty() {
            continue;
        }
        for layer in 0..=dump.n_layers {
            let (mut sum, mut n, mut skipped) = (0.0, 0, 0);
            for &i in &idx {
                match cosine(dump.embedding(i), dump.state(layer, i)) {
                    Some(c) => {
                        sum += c;
                        n += 1;
                    }
                    None => skipped += 1,
                }
            }
            rows.push(CosineRow {
                network,
                layer,
                mean_cosine: if n == 0 { f64::NAN } else { sum / n as f64 },
                positions: n,
                skipped,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Frequency,
    Tag,
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frequency" => Ok(Self::Frequency),
            "tag" => Ok(Self::Tag),
            other => Err(Error::Config(format!("unknown condition {other:?} (frequency|tag)"))),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Frequency => "frequency",
            Self::Tag => "tag",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedRow {
    pub network: Network,
    pub layer: usize,
    /// Frequency bin (`1` = least frequent) or tag name.
    pub group: String,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedTable {
    pub condition: Condition,
    pub rows: Vec<ConditionedRow>,
    /// Set when fewer distinct tokens than requested bins forced fewer bins.
    pub bins_reduced: bool,
}

/// Assigns each entry to one of `bins` equal-sized groups ordered by token
/// frequency; bin 1 holds the least frequent tokens. Returns the bin per
/// entry (1-based) and whether the bin count had to shrink.
pub fn frequency_bins(dump: &StateDump, entries: &[usize], bins: usize) -> (Vec<(usize, usize)>, bool) {
    let mut distinct: Vec<usize> = entries.iter().map(|&i| dump.entries[i].token).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let k = bins.min(distinct.len()).min(entries.len()).max(1);
    let mut order = entries.to_vec();
    order.sort_by_key(|&i| (dump.entries[i].frequency, dump.entries[i].token, i));
    let n = order.len();
    let assigned = order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| (i, rank * k / n.max(1) + 1))
        .collect();
    (assigned, k < bins)
}

/// Probe accuracy split by frequency bin or tag, per probed layer.
pub fn conditioned_accuracy(
    dump: &StateDump,
    probes: &[ProbeResult],
    condition: Condition,
    bins: usize,
) -> ConditionedTable {
    let mut rows = Vec::new();
    let mut reduced = false;
    for probe in probes {
        let entries: Vec<usize> = probe.predictions.iter().map(|&(i, _)| i).collect();
        let group_of: BTreeMap<usize, String> = match condition {
            Condition::Frequency => {
                let (assigned, r) = frequency_bins(dump, &entries, bins);
                reduced |= r;
                assigned.into_iter().map(|(i, b)| (i, format!("{b:02}"))).collect()
            }
            Condition::Tag => entries.iter().map(|&i| (i, dump.entries[i].tag.clone())).collect(),
        };
        let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for &(i, predicted) in &probe.predictions {
            let t = tally.entry(group_of[&i].as_str()).or_default();
            t.0 += 1;
            t.1 += usize::from(predicted == dump.entries[i].token);
        }
        rows.extend(tally.into_iter().map(|(group, (count, hits))| ConditionedRow {
            network: probe.network,
            layer: probe.layer,
            group: group.trim_start_matches('0').to_string(),
            count,
            accuracy: hits as f64 / count as f64,
        }));
    }
    ConditionedTable {
        condition,
        rows,
        bins_reduced: reduced,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub side: String,
    pub site: String,
    pub layer: usize,
    /// `k` or `v`.
    pub gate: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
    min: f64,
    max: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        if self.n == 0 {
            self.min = x;
            self.max = x;
        }
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
        self.min = self.min.min(x);
        self.max = self.max.max(x);
    }
}

/// Mean, std and range of gate activations per block over non-padding positions.
pub fn gate_stats(model: &Model<f32>, batches: &[Batch]) -> Result<Vec<GateRow>> {
    let variant = model.config().variant;
    if !variant.kind.has_self_shortcuts() && !variant.kind.has_cross_shortcuts() {
        return Err(Error::InvalidArgument(format!(
            "variant {} has no gates",
            variant.kind.as_str()
        )));
    }
    if !model.config().gated {
        return Err(Error::InvalidArgument("model was built without gates".into()));
    }
    let mut acc: BTreeMap<(u8, u8, usize, u8), Moments> = BTreeMap::new();
    for batch in batches {
        let mut tape = Tape::new();
        let mut f = model.forward(&mut tape, Mode::Eval);
        let src = Padded::new(&batch.src)?;
        let len = batch.tgt.iter().map(Vec::len).max().unwrap_or(0);
        let input = Padded::shifted(&batch.tgt, len)?;
        let enc = f.encode(&src)?;
        f.decode(&input, &enc)?;
        let records = f.gates().to_vec();
        for rec in records {
            // gates act on the stream that supplies keys and values
            let kv_lengths = match (rec.side, rec.site) {
                (Side::Decoder, Site::SelfAttention) => &input.lengths,
                _ => &src.lengths,
            };
            for (g, var) in [(0u8, rec.key), (1u8, rec.value)] {
                let t = tape.value(var);
                let (b, l, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let m = acc.entry((rec.side as u8, rec.site as u8, rec.layer, g)).or_default();
                for (row, &len) in kv_lengths.iter().enumerate().take(b) {
                    let valid = len.min(l);
                    for &x in &t.data()[row * l * d..(row * l + valid) * d] {
                        m.push(x as f64);
                    }
                }
            }
        }
    }
    let side = |s: u8| if s == Side::Encoder as u8 { "enc" } else { "dec" };
    let site = |s: u8| {
        if s == Site::SelfAttention as u8 {
            Site::SelfAttention.as_str()
        } else {
            Site::CrossAttention.as_str()
        }
    };
    Ok(acc
        .into_iter()
        .map(|((sd, st, layer, g), m)| {
            let mean = m.sum / m.n as f64;
            GateRow {
                side: side(sd).into(),
                site: site(st).into(),
                layer,
                gate: if g == 0 { "k" } else { "v" }.into(),
                mean,
                std: (m.sum_sq / m.n as f64 - mean * mean).max(0.0).sqrt(),
                min: m.min,
                max: m.max,
                count: m.n,
            }
        })
        .collect())
}
