//! Worker-count control for batch-parallel kernels.
//!
//! The count defaults to 1. `PCNN_THREADS` caps it at startup and
//! [`set_threads`] overrides it at runtime. Results are bitwise
//! reproducible for a fixed thread count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

static OVERRIDE: AtomicUsize = AtomicUsize::new(0);
static FROM_ENV: OnceLock<usize> = OnceLock::new();

pub fn threads() -> usize {
    match OVERRIDE.load(Ordering::Relaxed) {
        0 => *FROM_ENV.get_or_init(|| {
            std::env::var("PCNN_THREADS")
                .ok()
                .and_then(|v| v.trim().parse::<usize>().ok())
                .filter(|&n| n > 0)
                .unwrap_or(1)
        }),
        n => n,
    }
}

/// Force a worker count; 0 restores the environment default.
pub fn set_threads(n: usize) {
    OVERRIDE.store(n, Ordering::Relaxed);
}

/// Split `0..len` into at most `threads()` contiguous ranges.
pub(crate) fn chunks(len: usize) -> Vec<std::ops::Range<usize>> {
    let t = threads().clamp(1, len.max(1));
    let per = len.div_ceil(t);
    (0..t)
        .map(|i| (i * per).min(len)..((i + 1) * per).min(len))
        .filter(|r| !r.is_empty())
        .collect()
}
