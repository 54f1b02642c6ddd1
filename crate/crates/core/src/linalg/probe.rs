//! Allocation probe for tensor buffers.
//!
//! Every tensor constructor reports its shape here. Recording is off unless a
//! caller wraps work in [`track`], so the cost outside of tracking is one
//! thread-local flag read.

use std::cell::{Cell, RefCell};

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static LOG: RefCell<AllocStats> = RefCell::new(AllocStats::default());
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AllocStats {
    /// Every `(rows, cols)` allocated, in order.
    pub shapes: Vec<(usize, usize)>,
    pub total_bytes: usize,
    pub largest_bytes: usize,
}

impl AllocStats {
    pub fn saw_shape(&self, rows: usize, cols: usize) -> bool {
        self.shapes.contains(&(rows, cols))
    }
}

pub(crate) fn record<T>(rows: usize, cols: usize) {
    if !ACTIVE.with(Cell::get) {
        return;
    }
    let bytes = rows * cols * std::mem::size_of::<T>();
    LOG.with(|log| {
        let mut log = log.borrow_mut();
        log.shapes.push((rows, cols));
        log.total_bytes += bytes;
        log.largest_bytes = log.largest_bytes.max(bytes);
    });
}

/// Runs `f` and returns the tensor allocations it made on this thread.
/// Nested calls are not supported; the inner call resets the log.
pub fn track<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    LOG.with(|log| *log.borrow_mut() = AllocStats::default());
    ACTIVE.with(|a| a.set(true));
    let out = f();
    ACTIVE.with(|a| a.set(false));
    let stats = LOG.with(|log| std::mem::take(&mut *log.borrow_mut()));
    (out, stats)
}
