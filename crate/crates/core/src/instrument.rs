//! Per-thread call counters, used to verify that serving never re-encodes.

use std::cell::Cell;

thread_local! {
    static SAE_FORWARDS: Cell<u64> = const { Cell::new(0) };
    static TOKENIZATIONS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn count_sae_forward() {
    SAE_FORWARDS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_tokenization() {
    TOKENIZATIONS.with(|c| c.set(c.get() + 1));
}

/// `(sae_forwards, tokenizations)` on this thread since the last reset.
pub fn counters() -> (u64, u64) {
    (SAE_FORWARDS.with(Cell::get), TOKENIZATIONS.with(Cell::get))
}

pub fn reset_counters() {
    SAE_FORWARDS.with(|c| c.set(0));
    TOKENIZATIONS.with(|c| c.set(0));
}
