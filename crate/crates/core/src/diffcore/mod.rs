//! Minimal reverse-mode automatic differentiation over dense tensors.

mod check;
mod pool;
mod real;
mod store;
mod tape;

pub use check::{gradient_check, CheckInput, DEFAULT_FD_STEP};
pub use real::Real;
pub use store::{PTensor, ParamSet, RegisteredParams};
pub use tape::{Tape, Tensor};

/// Keep multi-megabyte tensor buffers inside the malloc arena instead of
/// round-tripping them through mmap/munmap on every tape rebuild. Training
/// allocates hundreds of such buffers per step; without this the kernel page
/// churn dominates. Idempotent; called by the trainer and CLI entry points.
pub fn tune_allocator() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}
