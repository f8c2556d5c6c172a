use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Counts tensors currently held by tapes, and the high-water mark.
///
/// A tape registered with a meter adds one per recorded node and releases its
/// whole count when dropped, so the peak reflects how many intermediate values
/// were alive at once across every tape sharing the meter.
#[derive(Debug, Clone, Default)]
pub struct MemoryMeter {
    inner: Arc<Counters>,
}

#[derive(Debug, Default)]
struct Counters {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live(&self) -> usize {
        self.inner.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.inner.peak.store(self.live(), Ordering::SeqCst);
    }

    pub(crate) fn acquire(&self, n: usize) {
        let now = self.inner.live.fetch_add(n, Ordering::SeqCst) + n;
        self.inner.peak.fetch_max(now, Ordering::SeqCst);
    }

    pub(crate) fn release(&self, n: usize) {
        self.inner.live.fetch_sub(n, Ordering::SeqCst);
    }
}
