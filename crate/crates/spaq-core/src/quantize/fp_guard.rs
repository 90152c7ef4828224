//! Integer-purity tripwire for the quantized conv path.
//!
//! Every float helper on the quantized execution path calls
//! [`note_float_op`]. The integer conv core runs inside a [`conv_region`]
//! guard; a float op noted while a region is active counts as a violation.
//! Tests drain the counter with [`take_violations`] after running
//! `quantized_forward` to assert the accumulation loops stayed integer-only.

use std::cell::Cell;

thread_local! {
    static IN_CONV: Cell<u32> = const { Cell::new(0) };
    static VIOLATIONS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) struct ConvRegion;

pub(crate) fn conv_region() -> ConvRegion {
    IN_CONV.with(|c| c.set(c.get() + 1));
    ConvRegion
}

impl Drop for ConvRegion {
    fn drop(&mut self) {
        IN_CONV.with(|c| c.set(c.get() - 1));
    }
}

#[inline]
pub(crate) fn note_float_op() {
    IN_CONV.with(|c| {
        if c.get() > 0 {
            VIOLATIONS.with(|v| v.set(v.get() + 1));
        }
    });
}

/// Read and clear the violation counter for the current thread.
pub fn take_violations() -> u64 {
    VIOLATIONS.with(|v| v.replace(0))
}
