pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod probe;
pub mod rng;
pub mod shortcuts;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Batch, Model, ModelConfig};
pub use shortcuts::{ShortcutKind, ShortcutVariant};
pub use tensor::{Real, Tape, Tensor, Var};
