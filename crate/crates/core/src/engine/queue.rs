use std::collections::VecDeque;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use crate::buffer::{PageDescriptor, PageKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FillItem {
    pub key: PageKey,
    /// A thread is known to be blocked on this page.
    pub demand: bool,
    pub prefetch: bool,
    /// Triggered by a write; the page is resolved writable and dirty.
    pub write: bool,
    pub seq: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct EvictItem {
    pub victims: Vec<PageDescriptor>,
}

struct FillLevels {
    high: VecDeque<FillItem>,
    low: VecDeque<FillItem>,
    closed: bool,
}

/// Two-level FIFO shared by all fillers: demand and read-ahead fills ahead
/// of prefetches.
pub(crate) struct FillQueue {
    levels: Mutex<FillLevels>,
    ready: Condvar,
}

impl FillQueue {
    pub fn new() -> Self {
        FillQueue {
            levels: Mutex::new(FillLevels {
                high: VecDeque::new(),
                low: VecDeque::new(),
                closed: false,
            }),
            ready: Condvar::new(),
        }
    }

    pub fn push(&self, item: FillItem) {
        let mut l = self.levels.lock();
        if item.prefetch {
            l.low.push_back(item);
        } else {
            l.high.push_back(item);
        }
        drop(l);
        self.ready.notify_one();
    }

    pub fn try_pop(&self) -> Option<FillItem> {
        let mut l = self.levels.lock();
        l.high.pop_front().or_else(|| l.low.pop_front())
    }

    /// Waits up to `timeout` for an item. Returns `None` on timeout or close.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<FillItem> {
        let mut l = self.levels.lock();
        loop {
            if let Some(item) = l.high.pop_front().or_else(|| l.low.pop_front()) {
                return Some(item);
            }
            if l.closed || self.ready.wait_for(&mut l, timeout).timed_out() {
                return None;
            }
        }
    }

    pub fn len(&self) -> usize {
        let l = self.levels.lock();
        l.high.len() + l.low.len()
    }

    pub fn close(&self) {
        self.levels.lock().closed = true;
        self.ready.notify_all();
    }
}

pub(crate) struct EvictQueue {
    items: Mutex<(VecDeque<EvictItem>, bool)>,
    ready: Condvar,
}

impl EvictQueue {
    pub fn new() -> Self {
        EvictQueue {
            items: Mutex::new((VecDeque::new(), false)),
            ready: Condvar::new(),
        }
    }

    pub fn push(&self, item: EvictItem) {
        self.items.lock().0.push_back(item);
        self.ready.notify_one();
    }

    pub fn try_pop(&self) -> Option<EvictItem> {
        self.items.lock().0.pop_front()
    }

    pub fn pop_timeout(&self, timeout: Duration) -> Option<EvictItem> {
        let mut g = self.items.lock();
        loop {
            if let Some(item) = g.0.pop_front() {
                return Some(item);
            }
            if g.1 || self.ready.wait_for(&mut g, timeout).timed_out() {
                return None;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.items.lock().0.len()
    }

    pub fn close(&self) {
        self.items.lock().1 = true;
        self.ready.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(index: u64, prefetch: bool) -> FillItem {
        FillItem {
            key: PageKey::new(0, index),
            demand: !prefetch,
            prefetch,
            write: false,
            seq: index,
        }
    }

    #[test]
    fn demand_before_prefetch_fifo_within_level() {
        let q = FillQueue::new();
        q.push(item(1, true));
        q.push(item(2, false));
        q.push(item(3, true));
        q.push(item(4, false));
        let order: Vec<u64> = std::iter::from_fn(|| q.try_pop()).map(|i| i.key.index).collect();
        assert_eq!(order, vec![2, 4, 1, 3]);
    }

    #[test]
    fn pop_times_out_and_close_wakes() {
        let q = FillQueue::new();
        assert!(q.pop_timeout(Duration::from_millis(5)).is_none());
        q.close();
        assert!(q.pop_timeout(Duration::from_secs(10)).is_none());
        let e = EvictQueue::new();
        e.push(EvictItem { victims: vec![] });
        assert_eq!(e.len(), 1);
        assert!(e.pop_timeout(Duration::from_millis(1)).is_some());
    }
}
