use rand::Rng;

use super::interleave::InterleavePolicy;
use crate::ar_core::Layout;
use crate::error::{Error, Result};

/// Per-example layout choice: interleaved with probability `fraction`,
/// offline otherwise.
pub fn mixed_batch<R: Rng + ?Sized>(
    count: usize,
    fraction: f64,
    policy: InterleavePolicy,
    rng: &mut R,
) -> Result<Vec<Layout>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("interleave fraction {fraction} outside [0, 1]")));
    }
    policy.validate()?;
    Ok((0..count)
        .map(|_| {
            if rng.random_bool(fraction) {
                Layout::Interleaved(policy)
            } else {
                Layout::Offline
            }
        })
        .collect())
}
