//! Instrumented allocation accounting.
//!
//! Every tensor buffer registers its size with a [`Tracker`] when it is
//! created and releases it when the last reference is dropped. A thread can
//! install its own tracker with [`Tracker::enter`]; otherwise buffers are
//! charged to a process-wide tracker. The buffer remembers which tracker it
//! was charged to, so it can be dropped on any thread.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

/// Bytes per element used for execution (64-bit floats).
pub const EXEC_ELEMENT_SIZE: u64 = 8;

/// Bytes per element of the reporting model (BFloat16).
pub const BF16_ELEMENT_SIZE: u64 = 2;

/// Snapshot of a tracker's counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocStats {
    pub live_bytes: u64,
    pub peak_bytes: u64,
    /// Number of tracked allocations since the tracker was created.
    pub alloc_count: u64,
    /// Reporting element size; the counters above always use 8-byte elements.
    pub element_size_model: u64,
}

impl AllocStats {
    /// Rescales the execution counters to the reporting element size.
    pub fn reported(&self) -> AllocStats {
        AllocStats {
            live_bytes: self.live_bytes / EXEC_ELEMENT_SIZE * self.element_size_model,
            peak_bytes: self.peak_bytes / EXEC_ELEMENT_SIZE * self.element_size_model,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocEvent {
    Alloc { id: u64, bytes: u64 },
    Free { id: u64, bytes: u64 },
}

#[derive(Debug, Default)]
pub struct Tracker {
    live: AtomicU64,
    peak: AtomicU64,
    allocs: AtomicU64,
    events: Mutex<Option<Vec<AllocEvent>>>,
}

static GLOBAL: OnceLock<Arc<Tracker>> = OnceLock::new();
static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static CURRENT: RefCell<Option<Arc<Tracker>>> = const { RefCell::new(None) };
    static UNTRACKED_DEPTH: Cell<u32> = const { Cell::new(0) };
}

impl Tracker {
    pub fn new() -> Arc<Self> {
        Arc::new(Tracker::default())
    }

    /// A fresh tracker that also keeps an event log for replay checks.
    pub fn with_event_log() -> Arc<Self> {
        let t = Tracker::default();
        *t.events.lock().unwrap() = Some(Vec::new());
        Arc::new(t)
    }

    /// Makes this tracker current on the calling thread until the guard drops.
    pub fn enter(self: &Arc<Self>) -> TrackerGuard {
        let prev = CURRENT.with(|c| c.borrow_mut().replace(Arc::clone(self)));
        TrackerGuard { prev }
    }

    pub fn stats(&self) -> AllocStats {
        AllocStats {
            live_bytes: self.live.load(Ordering::SeqCst),
            peak_bytes: self.peak.load(Ordering::SeqCst),
            alloc_count: self.allocs.load(Ordering::SeqCst),
            element_size_model: BF16_ELEMENT_SIZE,
        }
    }

    /// Sets the peak to the current live value.
    pub fn reset_peak(&self) {
        let live = self.live.load(Ordering::SeqCst);
        self.peak.store(live, Ordering::SeqCst);
    }

    pub fn events(&self) -> Vec<AllocEvent> {
        self.events.lock().unwrap().clone().unwrap_or_default()
    }

    fn charge(&self, id: u64, bytes: u64) {
        let live = self.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(live, Ordering::SeqCst);
        self.allocs.fetch_add(1, Ordering::SeqCst);
        if let Some(log) = self.events.lock().unwrap().as_mut() {
            log.push(AllocEvent::Alloc { id, bytes });
        }
    }

    fn release(&self, id: u64, bytes: u64) {
        self.live.fetch_sub(bytes, Ordering::SeqCst);
        if let Some(log) = self.events.lock().unwrap().as_mut() {
            log.push(AllocEvent::Free { id, bytes });
        }
    }
}

pub struct TrackerGuard {
    prev: Option<Arc<Tracker>>,
}

impl Drop for TrackerGuard {
    fn drop(&mut self) {
        let prev = self.prev.take();
        CURRENT.with(|c| *c.borrow_mut() = prev);
    }
}

fn global() -> &'static Arc<Tracker> {
    GLOBAL.get_or_init(Tracker::new)
}

/// The tracker new buffers on this thread are charged to.
pub fn current_tracker() -> Arc<Tracker> {
    CURRENT.with(|c| c.borrow().clone()).unwrap_or_else(|| Arc::clone(global()))
}

/// Counters of the current tracker.
pub fn alloc_stats() -> AllocStats {
    current_tracker().stats()
}

/// Resets the current tracker's peak to its live value.
pub fn reset_peak() {
    current_tracker().reset_peak()
}

/// Runs `f` with tracking suspended: buffers created inside are not charged.
/// Used for parameters and for views into already-charged buffers.
pub fn untracked<R>(f: impl FnOnce() -> R) -> R {
    struct Restore;
    impl Drop for Restore {
        fn drop(&mut self) {
            UNTRACKED_DEPTH.with(|d| d.set(d.get() - 1));
        }
    }
    UNTRACKED_DEPTH.with(|d| d.set(d.get() + 1));
    let _restore = Restore;
    f()
}

/// Backing storage of a tensor. Charged on creation, released on drop.
#[derive(Debug)]
pub(crate) struct Buffer {
    pub(crate) data: Vec<f64>,
    id: u64,
    tracker: Option<Arc<Tracker>>,
}

impl Buffer {
    pub(crate) fn new(data: Vec<f64>) -> Self {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        let tracked = UNTRACKED_DEPTH.with(|d| d.get() == 0);
        let tracker = tracked.then(current_tracker);
        if let Some(t) = &tracker {
            t.charge(id, data.len() as u64 * EXEC_ELEMENT_SIZE);
        }
        Buffer { data, id, tracker }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub(crate) fn is_tracked(&self) -> bool {
        self.tracker.is_some()
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(self.data.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        if let Some(t) = &self.tracker {
            t.release(self.id, self.data.len() as u64 * EXEC_ELEMENT_SIZE);
        }
    }
}
