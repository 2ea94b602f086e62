//! Thread-count configuration shared by the front ends.

use crate::error::{Error, Result};

pub const THREADS_VAR: &str = "SHIFTDIAG_THREADS";

/// Cap the global rayon pool at `SHIFTDIAG_THREADS` when set. Call before
/// any parallel work; later calls leave the existing pool alone.
pub fn init_from_env() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_VAR}=`{raw}` is not a positive integer")))?;
    // Fails only if the pool already exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}
