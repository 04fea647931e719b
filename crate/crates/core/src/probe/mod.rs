//! Probing classifiers and representation analyses over frozen models.

pub mod analysis;
pub mod classifier;
pub mod dump;
pub mod report;

pub use analysis::{
    conditioned_accuracy, cosine, cosine_profile, frequency_bins, gate_stats, Condition, ConditionedRow,
    ConditionedTable, CosineRow, GateRow,
};
pub use classifier::{split_by_sentence, train_probe, ProbeConfig, ProbeResult};
pub use dump::{dump_states, token_frequencies, DumpEntry, DumpSentence, Network, StateDump};
pub use report::{run_probes, write_csv, ProbeReport};
