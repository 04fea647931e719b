//! Optimization: learning-rate schedule, Adam, the training loop and
//! checkpoint management.

pub mod adam;
pub mod prefetch;
pub mod schedule;
pub mod trainer;

pub use adam::{Adam, AdamConfig};
pub use prefetch::prefetch;
pub use schedule::noam_lr;
pub use trainer::{average_last, list_checkpoints, Control, StepMetrics, TrainConfig, TrainOutcome, Trainer};
