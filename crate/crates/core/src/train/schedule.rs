use crate::error::{Error, Result};

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidArgument("learning-rate steps start at 1".into()));
    }
    if warmup == 0 {
        return Err(Error::InvalidArgument("warmup must be at least 1 step".into()));
    }
    let s = step as f64;
    let rise = s * (warmup as f64).powf(-1.5);
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(rise))
}
