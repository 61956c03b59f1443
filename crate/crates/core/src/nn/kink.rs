//! Thread-local record of ReLU on/off patterns.
//!
//! A central difference is only a valid derivative estimate when no ReLU
//! changes state between `θ - h` and `θ + h`; the gradient checker compares
//! pattern hashes to detect such crossings.

use std::cell::Cell;

use crate::digest::Fnv1a;
use crate::tensor::Scalar;

thread_local! {
    static PATTERN: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Folds the sign pattern of `pre` (ReLU inputs) into the active record, if any.
pub(crate) fn record<T: Scalar>(pre: &[T]) {
    PATTERN.with(|p| {
        if let Some(state) = p.get() {
            let mut h = Fnv1a::resume(state);
            let mut bytes = Vec::with_capacity(pre.len().div_ceil(8));
            for chunk in pre.chunks(8) {
                let mut b = 0u8;
                for (i, &v) in chunk.iter().enumerate() {
                    b |= u8::from(v > T::zero()) << i;
                }
                bytes.push(b);
            }
            h.write(&bytes);
            p.set(Some(h.finish()));
        }
    });
}

/// Runs `f` and returns its result together with the hash of every ReLU
/// pattern evaluated on this thread meanwhile.
pub fn with_pattern<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = PATTERN.with(|p| p.replace(Some(Fnv1a::new().finish())));
    let r = f();
    let pattern = PATTERN.with(|p| p.replace(outer)).expect("pattern record active");
    (r, pattern)
}
