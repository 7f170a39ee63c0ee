//! Live parameter-buffer accounting.
//!
//! Every [`ParamVector`](crate::ParamVector) registers itself here on
//! construction and clone and deregisters on drop. Counters are
//! thread-local, so a measurement only sees buffers created on the calling
//! thread.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn acquire() {
    LIVE.with(|live| {
        let n = live.get() + 1;
        live.set(n);
        PEAK.with(|peak| peak.set(peak.get().max(n)));
    });
}

pub(crate) fn release() {
    LIVE.with(|live| live.set(live.get().saturating_sub(1)));
}

/// Parameter buffers currently alive on this thread.
pub fn live_buffers() -> usize {
    LIVE.with(Cell::get)
}

/// Highest value of [`live_buffers`] since the last [`reset_peak`].
pub fn peak_buffers() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the peak to the current live count.
pub fn reset_peak() {
    let live = live_buffers();
    PEAK.with(|peak| peak.set(live));
}
