//! Instrumented operation counters.
//!
//! Kernels add to these as they execute so that analytic MAC formulas can be
//! checked against what actually ran.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Default)]
pub struct OpCounters {
    /// Weight columns read by masked products.
    pub column_reads: AtomicU64,
    /// MACs spent on low-dimensional virtual activations.
    pub macs_search: AtomicU64,
    /// MACs spent on selected high-dimensional columns (forward).
    pub macs_selected: AtomicU64,
    /// MACs of dense forward products (output layer, oracle/dense modes).
    pub macs_dense_forward: AtomicU64,
    /// MACs of backward error propagation.
    pub macs_backward_error: AtomicU64,
    /// MACs of weight-gradient products.
    pub macs_backward_weightgrad: AtomicU64,
    /// Ternary additions performed by projections.
    pub sparse_adds: AtomicU64,
}

/// Plain-value copy of [`OpCounters`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub column_reads: u64,
    pub macs_search: u64,
    pub macs_selected: u64,
    pub macs_dense_forward: u64,
    pub macs_backward_error: u64,
    pub macs_backward_weightgrad: u64,
    pub sparse_adds: u64,
}

impl OpCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let g = |c: &AtomicU64| c.load(Ordering::Relaxed);
        CounterSnapshot {
            column_reads: g(&self.column_reads),
            macs_search: g(&self.macs_search),
            macs_selected: g(&self.macs_selected),
            macs_dense_forward: g(&self.macs_dense_forward),
            macs_backward_error: g(&self.macs_backward_error),
            macs_backward_weightgrad: g(&self.macs_backward_weightgrad),
            sparse_adds: g(&self.sparse_adds),
        }
    }

    pub fn reset(&self) {
        for c in [
            &self.column_reads,
            &self.macs_search,
            &self.macs_selected,
            &self.macs_dense_forward,
            &self.macs_backward_error,
            &self.macs_backward_weightgrad,
            &self.sparse_adds,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }
}
