//! Encoder-decoder transformer with optional shortcut connections.

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod transformer;

pub use checkpoint::{average_checkpoints, Checkpoint, Manifest};
pub use config::{ModelConfig, ShortcutInput};
pub use params::{Init, Layout, ParamSpec, ParamStore};
pub use transformer::{
    log_softmax_at, positional_encoding, Batch, DecoderCache, DecoderOutput, EncoderOutput, Forward, GateRecord,
    LossOutput, Mode, Model, Padded,
};
