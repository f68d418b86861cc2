//! Arithmetic trace used to audit integer-only datapaths.
//!
//! Every runtime routine that touches floating-point tensor data reports the
//! number of real-valued operations it performed. Inside [`audit`] those
//! reports are counted; outside they cost one thread-local read.

use std::cell::Cell;

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static FLOAT_OPS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraceReport {
    pub float_ops: u64,
}

pub(crate) fn record_float(n: usize) {
    ACTIVE.with(|a| {
        if a.get() {
            FLOAT_OPS.with(|c| c.set(c.get() + n as u64));
        }
    });
}

/// Run `f` with tracing enabled and report what it did.
pub fn audit<R>(f: impl FnOnce() -> R) -> (R, TraceReport) {
    let prev_active = ACTIVE.with(|a| a.replace(true));
    let prev_count = FLOAT_OPS.with(|c| c.replace(0));
    let out = f();
    let float_ops = FLOAT_OPS.with(|c| c.replace(prev_count));
    ACTIVE.with(|a| a.set(prev_active));
    if prev_active {
        FLOAT_OPS.with(|c| c.set(c.get() + float_ops));
    }
    (out, TraceReport { float_ops })
}
