//! Signature of the piecewise branches taken during a forward pass.
//!
//! ReLU signs, max-pool winners, bilinear cells and clamp saturation are
//! hashed while a watch is active. Two evaluations with different
//! signatures lie on different smooth pieces, so a central difference
//! spanning them is not a derivative estimate.

use std::cell::Cell;

thread_local! {
    static SIGNATURE: Cell<Option<u64>> = const { Cell::new(None) };
}

const FNV_PRIME: u64 = 0x0100_0000_01b3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(FNV_PRIME)
}

pub(crate) fn active() -> bool {
    SIGNATURE.with(|s| s.get().is_some())
}

/// Folds branch identifiers into the active signature; no-op otherwise.
pub(crate) fn record(values: impl IntoIterator<Item = u64>) {
    SIGNATURE.with(|s| {
        if let Some(mut h) = s.get() {
            for v in values {
                h = mix(h, v);
            }
            s.set(Some(h));
        }
    });
}

/// Runs `f` and returns its result with the branch signature it produced.
pub fn watch<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = SIGNATURE.with(|s| s.replace(Some(FNV_OFFSET)));
    let out = f();
    let sig = SIGNATURE.with(|s| s.replace(outer)).unwrap_or(FNV_OFFSET);
    (out, sig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signatures_depend_on_recorded_branches() {
        let ((), a) = watch(|| record([1, 0, 1]));
        let ((), b) = watch(|| record([1, 0, 1]));
        let ((), c) = watch(|| record([1, 1, 1]));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(!active());
    }

    #[test]
    fn nested_watches_are_independent() {
        let (inner, outer) = watch(|| {
            record([7]);
            watch(|| record([9])).1
        });
        let ((), only_nine) = watch(|| record([9]));
        assert_eq!(inner, only_nine);
        assert_ne!(outer, only_nine);
    }
}
