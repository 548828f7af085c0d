//! The shared page buffer ledger.
//!
//! One ledger tracks every resident page of every region. Accounting is in
//! bytes because regions may use different page sizes. Each page moves
//! through a small state machine:
//!
//! ```text
//! Absent -> Filling -> PresentClean <-> PresentDirty
//!                          |                 |
//!                          +---> Evicting <--+
//!                                   |
//!                                 Absent
//! ```
//!
//! A page in `Filling` or `Evicting` is owned by exactly one worker. The
//! ledger never blocks: when there is no room, [`BufferLedger::reserve_slot`]
//! reports [`Reservation::NeedsEviction`] and leaves scheduling to the caller.

use std::collections::{BTreeMap, HashMap};

use parking_lot::Mutex;
use thiserror::Error;

use crate::config::{watermark_bytes, RuntimeConfig};

pub type RegionId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageKey {
    pub region: RegionId,
    pub index: u64,
}

impl PageKey {
    pub fn new(region: RegionId, index: u64) -> Self {
        PageKey { region, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PageState {
    Absent,
    Filling,
    PresentClean,
    PresentDirty,
    Evicting,
}

impl PageState {
    pub fn is_present(self) -> bool {
        matches!(self, PageState::PresentClean | PageState::PresentDirty)
    }

    pub fn is_in_flight(self) -> bool {
        matches!(self, PageState::Filling | PageState::Evicting)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageDescriptor {
    pub key: PageKey,
    pub page_size: usize,
    pub state: PageState,
    /// Unwritten modifications exist. Stays set while `Evicting`.
    pub dirty: bool,
    pub residency_seq: u64,
    /// Claimed by an explicit flush; not eligible for eviction.
    pub flushing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reservation {
    Reserved,
    AlreadyInFlight(PageState),
    AlreadyPresent,
    NeedsEviction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvictionPolicy {
    /// Oldest fault-visible touch first; touches through `reserve_slot`
    /// refresh a page's sequence.
    #[default]
    Lru,
    /// Oldest fill first; touches do not refresh.
    Fifo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushClaim {
    Claimed,
    NotDirty,
    Busy,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("illegal transition {op} on page {key:?} in state {from:?}")]
    IllegalTransition {
        key: PageKey,
        from: PageState,
        op: &'static str,
    },
    #[error("every resident page is in flight")]
    NoEligibleVictims,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Occupancy {
    pub resident_bytes: usize,
    pub dirty_bytes: usize,
    pub evicting_bytes: usize,
    pub above_high: bool,
    pub at_or_below_low: bool,
}

/// Victims selected by [`BufferLedger::plan_eviction`], with the occupancy
/// that triggered the plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionPlan {
    pub victims: Vec<PageDescriptor>,
    /// Resident bytes not already being evicted, at planning time.
    pub effective_bytes: usize,
    pub target_bytes: usize,
    pub selected_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Filling,
    Present,
    Evicting,
}

#[derive(Debug, Clone)]
struct Entry {
    page_size: usize,
    phase: Phase,
    dirty: bool,
    seq: u64,
    flushing: bool,
}

impl Entry {
    fn state(&self) -> PageState {
        match (self.phase, self.dirty) {
            (Phase::Filling, _) => PageState::Filling,
            (Phase::Present, false) => PageState::PresentClean,
            (Phase::Present, true) => PageState::PresentDirty,
            (Phase::Evicting, _) => PageState::Evicting,
        }
    }

    fn describe(&self, key: PageKey) -> PageDescriptor {
        PageDescriptor {
            key,
            page_size: self.page_size,
            state: self.state(),
            dirty: self.dirty,
            residency_seq: self.seq,
            flushing: self.flushing,
        }
    }
}

#[derive(Debug, Default)]
struct LedgerState {
    pages: HashMap<PageKey, Entry>,
    order: BTreeMap<u64, PageKey>,
    next_seq: u64,
    resident: usize,
    dirty: usize,
    evicting: usize,
    per_region: HashMap<RegionId, usize>,
}

impl LedgerState {
    fn stamp(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    fn add_resident(&mut self, region: RegionId, bytes: usize) {
        self.resident += bytes;
        *self.per_region.entry(region).or_default() += bytes;
    }

    fn remove_resident(&mut self, region: RegionId, bytes: usize) {
        self.resident -= bytes;
        if let Some(r) = self.per_region.get_mut(&region) {
            *r -= bytes;
            if *r == 0 {
                self.per_region.remove(&region);
            }
        }
    }

    fn illegal(&self, key: PageKey, op: &'static str) -> LedgerError {
        LedgerError::IllegalTransition {
            key,
            from: self.pages.get(&key).map_or(PageState::Absent, Entry::state),
            op,
        }
    }

    fn take_victims(&mut self, target: usize) -> Vec<PageDescriptor> {
        let mut picked = Vec::new();
        let mut sum = 0;
        for (seq, key) in &self.order {
            if sum >= target {
                break;
            }
            let entry = &self.pages[key];
            if entry.flushing {
                continue;
            }
            sum += entry.page_size;
            picked.push((*seq, *key));
        }
        picked
            .into_iter()
            .map(|(seq, key)| {
                self.order.remove(&seq);
                let entry = self.pages.get_mut(&key).expect("ordered page exists");
                entry.phase = Phase::Evicting;
                let d = entry.describe(key);
                self.evicting += d.page_size;
                d
            })
            .collect()
    }
}

pub struct BufferLedger {
    capacity: usize,
    high_bytes: usize,
    low_bytes: usize,
    policy: EvictionPolicy,
    state: Mutex<LedgerState>,
}

impl BufferLedger {
    pub fn new(capacity: usize, high_percent: u8, low_percent: u8, policy: EvictionPolicy) -> Self {
        assert!(low_percent < high_percent && high_percent <= 100);
        BufferLedger {
            capacity,
            high_bytes: watermark_bytes(capacity, high_percent),
            low_bytes: watermark_bytes(capacity, low_percent),
            policy,
            state: Mutex::new(LedgerState::default()),
        }
    }

    pub fn from_config(config: &RuntimeConfig, policy: EvictionPolicy) -> Self {
        Self::new(
            config.buffer_capacity(),
            config.high_watermark(),
            config.low_watermark(),
            policy,
        )
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn high_bytes(&self) -> usize {
        self.high_bytes
    }

    pub fn low_bytes(&self) -> usize {
        self.low_bytes
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    /// Claims an absent page for filling, or reports why it cannot.
    pub fn reserve_slot(&self, key: PageKey, page_size: usize) -> Reservation {
        assert!(page_size > 0, "page size must be positive");
        let mut st = self.state.lock();
        if let Some(entry) = st.pages.get(&key) {
            debug_assert_eq!(entry.page_size, page_size, "page size differs from region's");
            return match entry.phase {
                Phase::Filling | Phase::Evicting => Reservation::AlreadyInFlight(entry.state()),
                Phase::Present => {
                    if self.policy == EvictionPolicy::Lru {
                        let old = entry.seq;
                        let seq = st.stamp();
                        st.order.remove(&old);
                        st.order.insert(seq, key);
                        st.pages.get_mut(&key).expect("present").seq = seq;
                    }
                    Reservation::AlreadyPresent
                }
            };
        }
        if st.resident + page_size > self.capacity {
            return Reservation::NeedsEviction;
        }
        st.pages.insert(
            key,
            Entry {
                page_size,
                phase: Phase::Filling,
                dirty: false,
                seq: 0,
                flushing: false,
            },
        );
        st.add_resident(key.region, page_size);
        Reservation::Reserved
    }

    /// `Filling -> PresentClean`, stamping a fresh residency sequence.
    pub fn commit_fill(&self, key: PageKey) -> Result<PageDescriptor, LedgerError> {
        let mut st = self.state.lock();
        match st.pages.get(&key) {
            Some(e) if e.phase == Phase::Filling => {}
            _ => return Err(st.illegal(key, "commit_fill")),
        }
        let seq = st.stamp();
        st.order.insert(seq, key);
        let entry = st.pages.get_mut(&key).expect("checked");
        entry.phase = Phase::Present;
        entry.seq = seq;
        Ok(entry.describe(key))
    }

    /// Rolls a claim back: `Filling -> Absent`.
    pub fn abort_fill(&self, key: PageKey) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        match st.pages.get(&key) {
            Some(e) if e.phase == Phase::Filling => {
                let size = e.page_size;
                st.pages.remove(&key);
                st.remove_resident(key.region, size);
                Ok(())
            }
            _ => Err(st.illegal(key, "abort_fill")),
        }
    }

    /// `PresentClean | PresentDirty -> PresentDirty`.
    pub fn mark_dirty(&self, key: PageKey) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        match st.pages.get(&key) {
            Some(e) if e.phase == Phase::Present => {
                if !e.dirty {
                    let size = e.page_size;
                    st.dirty += size;
                    st.pages.get_mut(&key).expect("checked").dirty = true;
                }
                Ok(())
            }
            _ => Err(st.illegal(key, "mark_dirty")),
        }
    }

    /// Claims a present page for an explicit flush. Unless `keep_dirty`, the
    /// page is considered clean from this point; a write racing with the
    /// flush marks it dirty again through [`BufferLedger::mark_dirty`].
    pub fn begin_flush(&self, key: PageKey, keep_dirty: bool) -> FlushClaim {
        let mut st = self.state.lock();
        let Some(entry) = st.pages.get(&key) else {
            return FlushClaim::NotDirty;
        };
        if entry.phase != Phase::Present || entry.flushing {
            return FlushClaim::Busy;
        }
        if !entry.dirty {
            return FlushClaim::NotDirty;
        }
        let size = entry.page_size;
        if !keep_dirty {
            st.dirty -= size;
        }
        let entry = st.pages.get_mut(&key).expect("checked");
        entry.flushing = true;
        entry.dirty = keep_dirty;
        FlushClaim::Claimed
    }

    /// Ends a flush claim. A failed write-back restores the dirty flag.
    pub fn end_flush(&self, key: PageKey, written: bool) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        match st.pages.get(&key) {
            Some(e) if e.flushing => {
                let restore = !written && !e.dirty;
                let size = e.page_size;
                if restore {
                    st.dirty += size;
                }
                let entry = st.pages.get_mut(&key).expect("checked");
                entry.flushing = false;
                if restore {
                    entry.dirty = true;
                }
                Ok(())
            }
            _ => Err(st.illegal(key, "end_flush")),
        }
    }

    /// Selects the oldest evictable pages until their sizes reach
    /// `target_bytes`, moving each to `Evicting`.
    pub fn select_victims(&self, target_bytes: usize) -> Result<Vec<PageDescriptor>, LedgerError> {
        if target_bytes == 0 {
            return Ok(Vec::new());
        }
        let mut st = self.state.lock();
        let victims = st.take_victims(target_bytes);
        if victims.is_empty() {
            return Err(LedgerError::NoEligibleVictims);
        }
        Ok(victims)
    }

    /// Decides whether eviction is due and, if so, claims victims down to
    /// the low watermark in one atomic step.
    ///
    /// Eviction is due when resident bytes not already being evicted reach
    /// the high watermark, or when `extra_needed` more bytes would not fit.
    pub fn plan_eviction(&self, extra_needed: usize) -> Option<EvictionPlan> {
        let mut st = self.state.lock();
        let effective = st.resident - st.evicting;
        let over_high = effective >= self.high_bytes;
        let shortfall = (effective + extra_needed).saturating_sub(self.capacity);
        if !over_high && (extra_needed == 0 || shortfall == 0) {
            return None;
        }
        let target = effective.saturating_sub(self.low_bytes).max(shortfall);
        if target == 0 {
            return None;
        }
        let victims = st.take_victims(target);
        if victims.is_empty() {
            return None;
        }
        let selected_bytes = victims.iter().map(|v| v.page_size).sum();
        Some(EvictionPlan {
            victims,
            effective_bytes: effective,
            target_bytes: target,
            selected_bytes,
        })
    }

    /// Puts a victim back after a failed write-back: `Evicting -> Present`.
    pub fn abort_eviction(&self, key: PageKey) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        match st.pages.get(&key) {
            Some(e) if e.phase == Phase::Evicting => {
                let size = e.page_size;
                let seq = st.stamp();
                st.evicting -= size;
                st.order.insert(seq, key);
                let entry = st.pages.get_mut(&key).expect("checked");
                entry.phase = Phase::Present;
                entry.seq = seq;
                Ok(())
            }
            _ => Err(st.illegal(key, "abort_eviction")),
        }
    }

    /// `Evicting -> Absent`. The caller guarantees any needed write-back
    /// has completed.
    pub fn release_slot(&self, key: PageKey) -> Result<PageDescriptor, LedgerError> {
        let mut st = self.state.lock();
        match st.pages.get(&key) {
            Some(e) if e.phase == Phase::Evicting => {
                let d = e.describe(key);
                st.pages.remove(&key);
                st.evicting -= d.page_size;
                if d.dirty {
                    st.dirty -= d.page_size;
                }
                st.remove_resident(key.region, d.page_size);
                Ok(d)
            }
            _ => Err(st.illegal(key, "release_slot")),
        }
    }

    /// Moves every evictable page of `region` to `Evicting`. Returns the
    /// claimed pages and how many of the region's pages are still busy.
    pub fn claim_region(&self, region: RegionId) -> (Vec<PageDescriptor>, usize) {
        let mut st = self.state.lock();
        let keys: Vec<PageKey> = st.pages.keys().filter(|k| k.region == region).copied().collect();
        let mut claimed = Vec::new();
        let mut busy = 0;
        for key in keys {
            let entry = st.pages.get(&key).expect("listed");
            if entry.phase != Phase::Present || entry.flushing {
                busy += 1;
                continue;
            }
            let seq = entry.seq;
            st.order.remove(&seq);
            let entry = st.pages.get_mut(&key).expect("listed");
            entry.phase = Phase::Evicting;
            let d = entry.describe(key);
            st.evicting += d.page_size;
            claimed.push(d);
        }
        claimed.sort_by_key(|d| d.key.index);
        (claimed, busy)
    }

    pub fn occupancy_stats(&self) -> Occupancy {
        let st = self.state.lock();
        Occupancy {
            resident_bytes: st.resident,
            dirty_bytes: st.dirty,
            evicting_bytes: st.evicting,
            above_high: st.resident >= self.high_bytes,
            at_or_below_low: st.resident <= self.low_bytes,
        }
    }

    pub fn page(&self, key: PageKey) -> Option<PageDescriptor> {
        self.state.lock().pages.get(&key).map(|e| e.describe(key))
    }

    pub fn state_of(&self, key: PageKey) -> PageState {
        self.page(key).map_or(PageState::Absent, |d| d.state)
    }

    /// All tracked pages of a region, ordered by page index.
    pub fn region_pages(&self, region: RegionId) -> Vec<PageDescriptor> {
        let st = self.state.lock();
        let mut pages: Vec<PageDescriptor> = st
            .pages
            .iter()
            .filter(|(k, _)| k.region == region)
            .map(|(k, e)| e.describe(*k))
            .collect();
        pages.sort_by_key(|d| d.key.index);
        pages
    }

    pub fn region_resident_bytes(&self, region: RegionId) -> usize {
        self.state.lock().per_region.get(&region).copied().unwrap_or(0)
    }

    /// Every tracked page, in no particular order.
    pub fn pages(&self) -> Vec<PageDescriptor> {
        let st = self.state.lock();
        st.pages.iter().map(|(k, e)| e.describe(*k)).collect()
    }

    /// Present pages in eviction order (oldest first).
    pub fn eviction_order(&self) -> Vec<PageDescriptor> {
        let st = self.state.lock();
        st.order.values().map(|k| st.pages[k].describe(*k)).collect()
    }

    /// Recomputes every derived counter from the page table and checks the
    /// ledger's invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let st = self.state.lock();
        let resident: usize = st.pages.values().map(|e| e.page_size).sum();
        let dirty: usize = st.pages.values().filter(|e| e.dirty).map(|e| e.page_size).sum();
        let evicting: usize = st
            .pages
            .values()
            .filter(|e| e.phase == Phase::Evicting)
            .map(|e| e.page_size)
            .sum();
        if resident != st.resident {
            return Err(format!("resident {} != recount {resident}", st.resident));
        }
        if dirty != st.dirty {
            return Err(format!("dirty {} != recount {dirty}", st.dirty));
        }
        if evicting != st.evicting {
            return Err(format!("evicting {} != recount {evicting}", st.evicting));
        }
        if st.resident > self.capacity {
            return Err(format!("resident {} exceeds capacity {}", st.resident, self.capacity));
        }
        let per_region: usize = st.per_region.values().sum();
        if per_region != st.resident {
            return Err("per-region totals disagree".into());
        }
        let present = st.pages.values().filter(|e| e.phase == Phase::Present).count();
        if present != st.order.len() {
            return Err(format!("{} present pages but {} ordered", present, st.order.len()));
        }
        for (seq, key) in &st.order {
            match st.pages.get(key) {
                Some(e) if e.phase == Phase::Present && e.seq == *seq => {}
                _ => return Err(format!("order entry {seq} -> {key:?} is stale")),
            }
        }
        Ok(())
    }
}
