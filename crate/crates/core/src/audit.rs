//! Cheap call counters used to audit phase separation.
//!
//! Inference must be text-only: it may never rasterize or encode an image.
//! [`render::render`](crate::render::render) and
//! [`vision::encode`](crate::vision::encode) bump these counters, so a test
//! (or an operator) can snapshot them around a code path and assert that the
//! counts did not move.

use std::sync::atomic::{AtomicU64, Ordering};

static RENDER_CALLS: AtomicU64 = AtomicU64::new(0);
static ENCODE_CALLS: AtomicU64 = AtomicU64::new(0);

pub(crate) fn count_render() {
    RENDER_CALLS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn count_encode() {
    ENCODE_CALLS.fetch_add(1, Ordering::Relaxed);
}

/// Total `render` invocations since process start.
pub fn render_calls() -> u64 {
    RENDER_CALLS.load(Ordering::Relaxed)
}

/// Total `encode` invocations since process start.
pub fn encode_calls() -> u64 {
    ENCODE_CALLS.load(Ordering::Relaxed)
}

/// Snapshot of both counters, for before/after comparisons.
pub fn snapshot() -> (u64, u64) {
    (render_calls(), encode_calls())
}
