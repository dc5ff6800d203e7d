//! Instrumented multiply-accumulate counting.
//!
//! Convolution, linear and matmul kernels report their MACs to a
//! thread-local counter while a [`count`] scope is active. Normalizations,
//! activations and softmax are not counted.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn record(macs: u64) {
    COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + macs));
        }
    });
}

/// Runs `f` and returns its result with the number of MACs it executed.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let total = COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
    if let Some(p) = prev {
        COUNTER.with(|c| c.set(Some(p + total)));
    }
    (out, total)
}
