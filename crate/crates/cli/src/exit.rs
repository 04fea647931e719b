//! Process exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::fmt;

use lexshort_core::Error;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERICAL: u8 = 3;

/// A problem with the command line or configuration.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Exit code of the first classifiable error in the chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument(_) => USAGE,
                Error::Data(_) | Error::Io { .. } | Error::Json { .. } => DATA,
                Error::NonFinite { .. } | Error::Shape { .. } | Error::Autodiff(_) => NUMERICAL,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return DATA;
        }
    }
    USAGE
}
