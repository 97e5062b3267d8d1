//! Deliberate-defect switches, compiled in only with the `fault-inject`
//! feature.  They exist so the verification suite can be shown to catch a
//! planted bug; in a normal build the functions here are inert stubs.
//!
//! Both builds expose the same API: [`set_reuse_renormalize`] returns whether
//! injection is actually available, so callers can refuse cleanly on release
//! builds instead of silently "injecting" nothing.

#[cfg(feature = "fault-inject")]
mod inner {
    use std::sync::atomic::{AtomicBool, Ordering};

    static REUSE_RENORMALIZE: AtomicBool = AtomicBool::new(false);

    /// When set, reusing layers re-apply softmax to the cached distribution,
    /// which both wastes work and breaks the softmax-call accounting law.
    /// Returns `true`: injection is available in this build.
    pub fn set_reuse_renormalize(on: bool) -> bool {
        REUSE_RENORMALIZE.store(on, Ordering::Relaxed);
        true
    }

    pub fn reuse_renormalize() -> bool {
        REUSE_RENORMALIZE.load(Ordering::Relaxed)
    }
}

#[cfg(feature = "fault-inject")]
pub use inner::{reuse_renormalize, set_reuse_renormalize};

/// Inert stub: reports that injection is unavailable.
#[cfg(not(feature = "fault-inject"))]
pub fn set_reuse_renormalize(_on: bool) -> bool {
    false
}

#[cfg(not(feature = "fault-inject"))]
#[inline(always)]
pub fn reuse_renormalize() -> bool {
    false
}
