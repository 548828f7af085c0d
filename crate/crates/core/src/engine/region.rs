use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

use crate::buffer::RegionId;
use crate::fault_source::MappedMemory;
use crate::store::Store;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    ReadOnly,
    ReadWrite,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionStatus {
    Healthy,
    Failed(String),
}

/// Snapshot of a region's status and counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionReport {
    pub status: RegionStatus,
    /// Demand faults that led to a fill.
    pub faults_served: u64,
    /// Every fault event attributed to the region, duplicates included.
    pub fault_events: u64,
    /// Completed fills of any kind.
    pub fills: u64,
    pub evictions: u64,
    pub write_backs: u64,
    pub resident_bytes: usize,
}

#[derive(Default)]
pub(crate) struct Counters {
    pub faults_served: AtomicU64,
    pub fault_events: AtomicU64,
    pub fills: AtomicU64,
    pub evictions: AtomicU64,
    pub write_backs: AtomicU64,
}

pub(crate) fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

pub(crate) struct Region {
    pub id: RegionId,
    pub base: usize,
    /// Mapped length, a whole number of pages.
    pub length: usize,
    pub page_size: usize,
    pub store: Store,
    pub store_size: u64,
    pub writable: bool,
    pub memory: Arc<dyn MappedMemory>,
    pub counters: Counters,
    status: Mutex<RegionStatus>,
    pub draining: AtomicBool,
    /// Pages resolved with the poison pattern; never written back.
    pub poisoned: Mutex<HashSet<u64>>,
    /// Serializes explicit flushes of this region.
    pub flush_lock: Mutex<()>,
    evictions_in_flight: Mutex<usize>,
    evictions_done: Condvar,
}

impl Region {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: RegionId,
        base: usize,
        length: usize,
        page_size: usize,
        store: Store,
        writable: bool,
        memory: Arc<dyn MappedMemory>,
    ) -> Self {
        let store_size = store.size();
        Region {
            id,
            base,
            length,
            page_size,
            store,
            store_size,
            writable,
            memory,
            counters: Counters::default(),
            status: Mutex::new(RegionStatus::Healthy),
            draining: AtomicBool::new(false),
            poisoned: Mutex::new(HashSet::new()),
            flush_lock: Mutex::new(()),
            evictions_in_flight: Mutex::new(0),
            evictions_done: Condvar::new(),
        }
    }

    pub fn num_pages(&self) -> u64 {
        (self.length / self.page_size) as u64
    }

    pub fn page_index(&self, address: usize) -> u64 {
        ((address - self.base) / self.page_size) as u64
    }

    pub fn page_base(&self, index: u64) -> usize {
        self.base + index as usize * self.page_size
    }

    pub fn contains(&self, address: usize) -> bool {
        address >= self.base && address < self.base + self.length
    }

    /// Store offset of a page and how many of its bytes the store backs.
    pub fn store_span(&self, index: u64) -> (u64, usize) {
        let offset = index * self.page_size as u64;
        let n = self.store_size.saturating_sub(offset).min(self.page_size as u64) as usize;
        (offset, n)
    }

    pub fn status(&self) -> RegionStatus {
        self.status.lock().clone()
    }

    /// Marks the region failed, keeping the first reason.
    pub fn fail(&self, reason: impl Into<String>) {
        let mut s = self.status.lock();
        if *s == RegionStatus::Healthy {
            let reason = reason.into();
            log::error!("region {:#x} failed: {reason}", self.base);
            *s = RegionStatus::Failed(reason);
        }
    }

    pub fn eviction_started(&self, n: usize) {
        *self.evictions_in_flight.lock() += n;
    }

    pub fn eviction_finished(&self) {
        let mut g = self.evictions_in_flight.lock();
        *g -= 1;
        if *g == 0 {
            self.evictions_done.notify_all();
        }
    }

    pub fn evictions_in_flight(&self) -> usize {
        *self.evictions_in_flight.lock()
    }

    pub fn wait_evictions(&self, timeout: std::time::Duration) {
        let mut g = self.evictions_in_flight.lock();
        if *g > 0 {
            self.evictions_done.wait_for(&mut g, timeout);
        }
    }
}
