//! Thread-local recycling of tensor buffers.
//!
//! A training step allocates the same ~hundred buffer sizes every iteration;
//! recycling them across tape rebuilds keeps the pages warm instead of
//! faulting fresh ones in from the kernel each step. Buffers are bucketed by
//! exact capacity and fully initialized by their next user before any read.

use std::cell::RefCell;
use std::collections::HashMap;

pub(crate) struct Pool<T> {
    buckets: HashMap<usize, Vec<Vec<T>>>,
    held: usize,
    held_limit: usize,
}

const PER_BUCKET: usize = 8;
/// Retained elements per precision (~1.2 GB of f32).
const HELD_LIMIT: usize = 300_000_000;

impl<T> Pool<T> {
    fn new() -> Self {
        Pool { buckets: HashMap::new(), held: 0, held_limit: HELD_LIMIT }
    }

    pub(crate) fn take(&mut self, capacity: usize) -> Option<Vec<T>> {
        let bucket = self.buckets.get_mut(&capacity)?;
        let mut v = bucket.pop()?;
        self.held -= capacity;
        v.clear();
        Some(v)
    }

    pub(crate) fn put(&mut self, v: Vec<T>) {
        let cap = v.capacity();
        if cap == 0 || self.held + cap > self.held_limit {
            return;
        }
        let bucket = self.buckets.entry(cap).or_default();
        if bucket.len() < PER_BUCKET {
            self.held += cap;
            bucket.push(v);
        }
    }
}

thread_local! {
    static POOL_F32: RefCell<Pool<f32>> = RefCell::new(Pool::new());
    static POOL_F64: RefCell<Pool<f64>> = RefCell::new(Pool::new());
}

/// Per-precision access to the thread's buffer pool.
pub trait Pooled: Sized {
    fn pool_take(capacity: usize) -> Option<Vec<Self>>;
    fn pool_put(v: Vec<Self>);
}

impl Pooled for f32 {
    fn pool_take(capacity: usize) -> Option<Vec<Self>> {
        POOL_F32.with(|p| p.borrow_mut().take(capacity))
    }

    fn pool_put(v: Vec<Self>) {
        POOL_F32.with(|p| p.borrow_mut().put(v));
    }
}

impl Pooled for f64 {
    fn pool_take(capacity: usize) -> Option<Vec<Self>> {
        POOL_F64.with(|p| p.borrow_mut().take(capacity))
    }

    fn pool_put(v: Vec<Self>) {
        POOL_F64.with(|p| p.borrow_mut().put(v));
    }
}

/// An empty Vec with exactly `capacity` reserved, reusing a pooled buffer
/// when one of that size exists.
pub(crate) fn vec_with_capacity<T: Pooled>(capacity: usize) -> Vec<T> {
    T::pool_take(capacity).unwrap_or_else(|| Vec::with_capacity(capacity))
}
