//! Test-only backward corruption, used to show the gradient checker detects
//! broken rules. Scoped to the current thread.

use std::cell::Cell;

use super::OpKind;

thread_local! {
    static FAULT: Cell<Option<(OpKind, f64)>> = const { Cell::new(None) };
}

pub(crate) fn active() -> Option<(OpKind, f64)> {
    FAULT.with(|f| f.get())
}

/// While the guard lives, every backward rule of `kind` on this thread scales
/// its input gradients by `factor`.
#[must_use = "the fault is cleared when the guard drops"]
pub fn inject(kind: OpKind, factor: f64) -> FaultGuard {
    FAULT.with(|f| f.set(Some((kind, factor))));
    FaultGuard { _priv: () }
}

pub struct FaultGuard {
    _priv: (),
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        FAULT.with(|f| f.set(None));
    }
}
