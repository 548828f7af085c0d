//! The paging runtime.
//!
//! An [`Engine`] owns a buffer ledger and three worker groups. Managers poll
//! the fault source and turn events into fill work; fillers read pages from
//! the backing store and resolve them; evictors write dirty victims back and
//! discard them once occupancy reaches the high watermark.
//!
//! Events that arrive for a page already being filled or evicted are parked
//! per page and replayed once the page settles, so a blocked thread is never
//! forgotten.

mod queue;
mod region;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::buffer::{
    BufferLedger, EvictionPolicy, FlushClaim, Occupancy, PageDescriptor, PageKey, PageState, RegionId,
    Reservation,
};
use crate::config::RuntimeConfig;
use crate::fault_source::{Capabilities, FaultError, FaultEvent, FaultKind, FaultSource, MappedMemory};
use crate::store::{read_fully, Store, StoreError};

use queue::{EvictItem, EvictQueue, FillItem, FillQueue};
use region::{bump, Counters, Region};

pub use region::{MapMode, RegionReport, RegionStatus};

/// Byte written over pages whose demand fill failed.
pub const POISON_BYTE: u8 = 0xDB;

const WRITE_RETRIES: usize = 3;
const DEFERRED_STRIPES: usize = 64;
const WORKER_TICK: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no region at {0:#x}")]
    UnknownRegion(usize),
    #[error("region {base:#x} has failed: {reason}")]
    RegionFailed { base: usize, reason: String },
    #[error("address {0:#x} is not a page base")]
    MisalignedAddress(usize),
    #[error("invalid page size {page_size}: {reason}")]
    InvalidPageSize { page_size: usize, reason: String },
    #[error("region length must be positive")]
    InvalidLength,
    #[error("backing store is closed")]
    StoreClosed,
    #[error("read-write mapping of a read-only store")]
    StoreNotWritable,
    #[error("fault at {0:#x} lies outside every region")]
    FaultOutsideRegion(usize),
    #[error("I/O failure on region {base:#x}: {source}")]
    IoFailure {
        base: usize,
        #[source]
        source: StoreError,
    },
    #[error(transparent)]
    Source(#[from] FaultError),
    #[error("engine aborted: {0}")]
    Aborted(String),
    #[error("{} region(s) failed to shut down cleanly", .0.len())]
    Shutdown(Vec<EngineError>),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// Called by filler `worker` before each dequeue; may block to stall it.
pub type FillerGate = Arc<dyn Fn(usize) + Send + Sync>;

#[derive(Clone, Default)]
pub struct EngineOptions {
    /// Start no workers; the caller drives the engine through
    /// [`Engine::pump_events`], [`Engine::filler_step`] and
    /// [`Engine::evictor_step`].
    pub manual: bool,
    pub policy: EvictionPolicy,
    pub filler_gate: Option<FillerGate>,
}

/// What handling one event produced.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Handled {
    /// Page indexes for which fills were enqueued, demand page first.
    pub fills: Vec<u64>,
    pub marked_dirty: bool,
    /// The page was in flight; the event will be replayed when it settles.
    pub deferred: bool,
    /// The buffer was full; the event waits for space.
    pub awaiting_space: bool,
}

/// One eviction decision, recorded for watermark analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvictionRecord {
    /// Resident bytes not already being evicted when the decision was made.
    pub effective_bytes: usize,
    pub extra_needed: usize,
    pub target_bytes: usize,
    pub selected_bytes: usize,
    pub largest_victim: usize,
    pub high_bytes: usize,
    pub low_bytes: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub faults_served: u64,
    pub fault_events: u64,
    pub fills: u64,
    pub evictions: u64,
    pub write_backs: u64,
    pub resident_bytes: usize,
    pub dirty_bytes: usize,
}

enum Waiter {
    Fault(FaultEvent),
    Prefetch(PageKey, usize),
}

#[derive(Default)]
struct Registry {
    by_base: BTreeMap<usize, Arc<Region>>,
    by_id: HashMap<RegionId, Arc<Region>>,
}

struct Inner {
    config: RuntimeConfig,
    source: Arc<dyn FaultSource>,
    caps: Capabilities,
    ledger: BufferLedger,
    registry: RwLock<Registry>,
    next_region: AtomicU32,
    fills: FillQueue,
    evicts: EvictQueue,
    deferred: Vec<Mutex<HashMap<PageKey, Vec<FaultEvent>>>>,
    waiters: Mutex<VecDeque<Waiter>>,
    /// Queued or running work items.
    busy: AtomicUsize,
    seq: AtomicU64,
    running: AtomicBool,
    aborted: Mutex<Option<String>>,
    manual: bool,
    filler_gate: Option<FillerGate>,
    trace: Mutex<Vec<EvictionRecord>>,
    totals: Counters,
}

pub struct Engine {
    inner: Arc<Inner>,
    workers: Mutex<Vec<JoinHandle<()>>>,
    shut: AtomicBool,
}

impl Engine {
    /// Starts an engine with worker threads sized by `config`.
    pub fn start(config: RuntimeConfig, source: Arc<dyn FaultSource>) -> Result<Self> {
        Self::start_with(config, source, EngineOptions::default())
    }

    /// Starts an engine without workers, for step-wise driving.
    pub fn start_manual(config: RuntimeConfig, source: Arc<dyn FaultSource>) -> Result<Self> {
        Self::start_with(
            config,
            source,
            EngineOptions {
                manual: true,
                ..EngineOptions::default()
            },
        )
    }

    pub fn start_with(config: RuntimeConfig, source: Arc<dyn FaultSource>, options: EngineOptions) -> Result<Self> {
        let caps = source.capabilities();
        if !config.page_size().is_multiple_of(caps.granularity) {
            return Err(EngineError::InvalidPageSize {
                page_size: config.page_size(),
                reason: format!("not a multiple of the source granularity {}", caps.granularity),
            });
        }
        source.attach()?;
        let config = config.frozen();
        let inner = Arc::new(Inner {
            ledger: BufferLedger::from_config(&config, options.policy),
            config,
            source,
            caps,
            registry: RwLock::new(Registry::default()),
            next_region: AtomicU32::new(1),
            fills: FillQueue::new(),
            evicts: EvictQueue::new(),
            deferred: (0..DEFERRED_STRIPES).map(|_| Mutex::new(HashMap::new())).collect(),
            waiters: Mutex::new(VecDeque::new()),
            busy: AtomicUsize::new(0),
            seq: AtomicU64::new(0),
            running: AtomicBool::new(true),
            aborted: Mutex::new(None),
            manual: options.manual,
            filler_gate: options.filler_gate,
            trace: Mutex::new(Vec::new()),
            totals: Counters::default(),
        });
        let engine = Engine {
            inner,
            workers: Mutex::new(Vec::new()),
            shut: AtomicBool::new(false),
        };
        if !options.manual {
            engine.spawn_workers();
        }
        Ok(engine)
    }

    fn spawn_workers(&self) {
        let c = &self.inner.config;
        let mut workers = self.workers.lock();
        for i in 0..c.num_managers() {
            let inner = Arc::clone(&self.inner);
            workers.push(spawn(format!("upager-manager-{i}"), move || inner.manager_loop()));
        }
        for i in 0..c.num_fillers() {
            let inner = Arc::clone(&self.inner);
            workers.push(spawn(format!("upager-filler-{i}"), move || inner.filler_loop(i)));
        }
        for i in 0..c.num_evictors() {
            let inner = Arc::clone(&self.inner);
            workers.push(spawn(format!("upager-evictor-{i}"), move || inner.evictor_loop()));
        }
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.inner.config
    }

    pub fn capabilities(&self) -> Capabilities {
        self.inner.caps
    }

    pub fn ledger(&self) -> &BufferLedger {
        &self.inner.ledger
    }

    pub fn occupancy(&self) -> Occupancy {
        self.inner.ledger.occupancy_stats()
    }

    /// Maps `length` bytes of `store` and returns the base address. The
    /// mapping is rounded up to whole pages; bytes past the end of the store
    /// read as zero.
    pub fn umap(&self, length: usize, mode: MapMode, store: Store, page_size: Option<usize>) -> Result<usize> {
        self.inner.check_aborted()?;
        let page_size = page_size.unwrap_or(self.inner.config.page_size());
        let g = self.inner.caps.granularity;
        let invalid = |reason: String| EngineError::InvalidPageSize { page_size, reason };
        if page_size == 0 || !page_size.is_multiple_of(g) {
            return Err(invalid(format!("must be a positive multiple of {g}")));
        }
        if page_size > self.inner.ledger.capacity() {
            return Err(invalid(format!(
                "exceeds the buffer capacity of {} bytes",
                self.inner.ledger.capacity()
            )));
        }
        if length == 0 {
            return Err(EngineError::InvalidLength);
        }
        if !store.is_open() {
            return Err(EngineError::StoreClosed);
        }
        let writable = mode == MapMode::ReadWrite;
        if writable && !store.is_writable() {
            return Err(EngineError::StoreNotWritable);
        }
        let mapped = length.next_multiple_of(page_size);
        let source = &self.inner.source;
        let base = source.reserve(mapped, writable)?;
        source.register_range(base, mapped, page_size, writable)?;
        let memory = source.memory(base)?;
        let id = self.inner.next_region.fetch_add(1, Ordering::Relaxed);
        let region = Arc::new(Region::new(id, base, mapped, page_size, store, writable, memory));
        let mut reg = self.inner.registry.write();
        reg.by_base.insert(base, Arc::clone(&region));
        reg.by_id.insert(id, region);
        Ok(base)
    }

    /// Application view of the region at `base`.
    pub fn memory(&self, base: usize) -> Result<Arc<dyn MappedMemory>> {
        Ok(Arc::clone(&self.inner.region(base)?.memory))
    }

    /// Writes back every dirty page, syncs the store and unregisters the
    /// region. Blocks until drained.
    ///
    /// A region that had already failed is torn down all the same and the
    /// failure is reported.
    pub fn uunmap(&self, base: usize) -> Result<()> {
        self.inner.uunmap(base)
    }

    /// Starts asynchronous fills of the listed page bases.
    pub fn prefetch(&self, pages: &[usize]) -> Result<()> {
        let inner = &self.inner;
        inner.check_aborted()?;
        let mut claims = Vec::with_capacity(pages.len());
        for &address in pages {
            let region = inner.region_at(address).ok_or(EngineError::UnknownRegion(address))?;
            if (address - region.base) % region.page_size != 0 {
                return Err(EngineError::MisalignedAddress(address));
            }
            inner.check_healthy(&region)?;
            claims.push((PageKey::new(region.id, region.page_index(address)), region.page_size));
        }
        for (key, page_size) in claims {
            if inner.claim_prefetch(key, page_size) {
                inner.push_waiter(Waiter::Prefetch(key, page_size), page_size);
            }
        }
        Ok(())
    }

    /// Writes every dirty page of the region back and syncs the store. Pages
    /// stay resident.
    pub fn flush(&self, base: usize) -> Result<()> {
        self.inner.flush(base)
    }

    pub fn status(&self, base: usize) -> Result<RegionReport> {
        let region = self.inner.region(base)?;
        let c = &region.counters;
        Ok(RegionReport {
            status: region.status(),
            faults_served: c.faults_served.load(Ordering::Relaxed),
            fault_events: c.fault_events.load(Ordering::Relaxed),
            fills: c.fills.load(Ordering::Relaxed),
            evictions: c.evictions.load(Ordering::Relaxed),
            write_backs: c.write_backs.load(Ordering::Relaxed),
            resident_bytes: self.inner.ledger.region_resident_bytes(region.id),
        })
    }

    /// Totals across every region this engine has mapped.
    pub fn stats(&self) -> EngineStats {
        let c = &self.inner.totals;
        let occ = self.inner.ledger.occupancy_stats();
        EngineStats {
            faults_served: c.faults_served.load(Ordering::Relaxed),
            fault_events: c.fault_events.load(Ordering::Relaxed),
            fills: c.fills.load(Ordering::Relaxed),
            evictions: c.evictions.load(Ordering::Relaxed),
            write_backs: c.write_backs.load(Ordering::Relaxed),
            resident_bytes: occ.resident_bytes,
            dirty_bytes: occ.dirty_bytes,
        }
    }

    pub fn eviction_trace(&self) -> Vec<EvictionRecord> {
        self.inner.trace.lock().clone()
    }

    /// Turns one fault event into work.
    pub fn handle_event(&self, event: FaultEvent) -> Result<Handled> {
        self.inner.dispatch(event)
    }

    /// Polls the source once and handles what it returns.
    pub fn pump_events(&self) -> Result<usize> {
        let events = self.inner.source.poll_events(self.inner.config.max_fault_events())?;
        for &e in &events {
            self.inner.dispatch(e)?;
        }
        Ok(events.len())
    }

    /// Executes one queued fill. Returns whether there was one.
    pub fn filler_step(&self) -> bool {
        self.inner.filler_step()
    }

    /// Executes one eviction work item, planning one first if occupancy is
    /// at the high watermark. Returns the bytes evicted.
    pub fn evictor_step(&self) -> usize {
        self.inner.evictor_step()
    }

    /// Number of queued fill items.
    pub fn pending_fills(&self) -> usize {
        self.inner.fills.len()
    }

    pub fn pending_evictions(&self) -> usize {
        self.inner.evicts.len()
    }

    pub fn is_idle(&self) -> bool {
        self.inner.is_idle()
    }

    /// Blocks until no work is queued or running. In manual mode the work
    /// is executed on the calling thread.
    pub fn wait_idle(&self) {
        while !self.wait_idle_timeout(Duration::from_secs(3600)) {}
    }

    pub fn wait_idle_timeout(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.inner.manual {
                self.inner.run_pending();
            }
            if self.inner.is_idle() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_micros(200));
        }
    }

    /// Unmaps every region with full write-back, then stops the workers.
    /// Later calls do nothing.
    pub fn shutdown(&self) -> Result<()> {
        if self.shut.swap(true, Ordering::AcqRel) {
            return Ok(());
        }
        let bases: Vec<usize> = self.inner.registry.read().by_base.keys().copied().collect();
        let errors: Vec<EngineError> = bases.into_iter().filter_map(|b| self.inner.uunmap(b).err()).collect();
        self.stop_workers();
        self.inner.source.detach();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Shutdown(errors))
        }
    }

    /// Stops the engine and drops every resident page without writing
    /// anything back, as if the process had died.
    pub fn abandon(self) {
        self.shut.store(true, Ordering::Release);
        self.stop_workers();
        let regions: Vec<Arc<Region>> = std::mem::take(&mut self.inner.registry.write().by_base)
            .into_values()
            .collect();
        for r in regions {
            let _ = self.inner.source.unregister_range(r.base);
        }
        self.inner.source.detach();
    }

    fn stop_workers(&self) {
        self.inner.running.store(false, Ordering::Release);
        self.inner.fills.close();
        self.inner.evicts.close();
        for h in self.workers.lock().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown() {
            log::error!("engine shutdown: {e}");
        }
    }
}

fn spawn(name: String, f: impl FnOnce() + Send + 'static) -> JoinHandle<()> {
    thread::Builder::new().name(name).spawn(f).expect("spawn worker thread")
}

impl Inner {
    fn check_aborted(&self) -> Result<()> {
        match &*self.aborted.lock() {
            Some(reason) => Err(EngineError::Aborted(reason.clone())),
            None => Ok(()),
        }
    }

    fn check_healthy(&self, region: &Region) -> Result<()> {
        match region.status() {
            RegionStatus::Healthy => Ok(()),
            RegionStatus::Failed(reason) => Err(EngineError::RegionFailed {
                base: region.base,
                reason,
            }),
        }
    }

    fn region(&self, base: usize) -> Result<Arc<Region>> {
        self.registry
            .read()
            .by_base
            .get(&base)
            .cloned()
            .ok_or(EngineError::UnknownRegion(base))
    }

    fn region_at(&self, address: usize) -> Option<Arc<Region>> {
        let reg = self.registry.read();
        let (_, r) = reg.by_base.range(..=address).next_back()?;
        r.contains(address).then(|| Arc::clone(r))
    }

    fn region_by_id(&self, id: RegionId) -> Option<Arc<Region>> {
        self.registry.read().by_id.get(&id).cloned()
    }

    fn stripe(&self, key: PageKey) -> &Mutex<HashMap<PageKey, Vec<FaultEvent>>> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        key.hash(&mut h);
        &self.deferred[h.finish() as usize % DEFERRED_STRIPES]
    }

    fn next_seq(&self) -> u64 {
        self.seq.fetch_add(1, Ordering::Relaxed)
    }

    fn enqueue_fill(&self, key: PageKey, demand: bool, prefetch: bool, write: bool) {
        self.busy.fetch_add(1, Ordering::AcqRel);
        self.fills.push(FillItem {
            key,
            demand,
            prefetch,
            write,
            seq: self.next_seq(),
        });
    }

    fn is_idle(&self) -> bool {
        self.busy.load(Ordering::Acquire) == 0 && self.waiters.lock().is_empty()
    }

    // ---- fault handling -------------------------------------------------

    fn dispatch(&self, event: FaultEvent) -> Result<Handled> {
        let h = match self.handle(event, true) {
            Ok(h) => h,
            Err(EngineError::FaultOutsideRegion(a)) => {
                let reason = format!("fault at {a:#x} outside every region");
                log::error!("{reason}");
                *self.aborted.lock() = Some(reason);
                return Err(EngineError::FaultOutsideRegion(a));
            }
            Err(e) => return Err(e),
        };
        if h.awaiting_space {
            let size = self.region_at(event.address).map_or(0, |r| r.page_size);
            self.push_waiter(Waiter::Fault(event), size);
        }
        Ok(h)
    }

    fn handle(&self, event: FaultEvent, fresh: bool) -> Result<Handled> {
        let region = self
            .region_at(event.address)
            .ok_or(EngineError::FaultOutsideRegion(event.address))?;
        if fresh {
            bump(&region.counters.fault_events);
            bump(&self.totals.fault_events);
        }
        let ps = region.page_size;
        let index = region.page_index(event.address);
        let key = PageKey::new(region.id, index);
        let page_base = region.page_base(index);
        let mut h = Handled::default();
        let mut deferred = self.stripe(key).lock();
        match self.ledger.state_of(key) {
            PageState::Filling | PageState::Evicting => {
                deferred.entry(key).or_default().push(event);
                h.deferred = true;
            }
            PageState::PresentClean | PageState::PresentDirty => match event.kind {
                FaultKind::WriteProtect => {
                    if !region.writable {
                        log::warn!("write-protect fault on read-only region {:#x}", region.base);
                    } else if self.ledger.mark_dirty(key).is_ok() {
                        self.source.unprotect_page(page_base, ps)?;
                        h.marked_dirty = true;
                    } else {
                        // Claimed for eviction since the state was read.
                        deferred.entry(key).or_default().push(event);
                        h.deferred = true;
                    }
                }
                FaultKind::Read | FaultKind::Write => self.source.wake_page(page_base, ps)?,
            },
            PageState::Absent => match event.kind {
                // The page was discarded, which already woke the writer.
                FaultKind::WriteProtect => {}
                FaultKind::Read | FaultKind::Write => match self.ledger.reserve_slot(key, ps) {
                    Reservation::Reserved => {
                        bump(&region.counters.faults_served);
                        bump(&self.totals.faults_served);
                        let write = event.kind == FaultKind::Write && region.writable;
                        self.enqueue_fill(key, true, false, write);
                        h.fills.push(index);
                        self.read_ahead(&region, index, &mut h);
                    }
                    Reservation::AlreadyInFlight(_) => {
                        deferred.entry(key).or_default().push(event);
                        h.deferred = true;
                    }
                    Reservation::AlreadyPresent => self.source.wake_page(page_base, ps)?,
                    Reservation::NeedsEviction => h.awaiting_space = true,
                },
            },
        }
        Ok(h)
    }

    fn read_ahead(&self, region: &Region, index: u64, h: &mut Handled) {
        let last = region.num_pages();
        let ra = self.config.read_ahead() as u64;
        for next in index + 1..(index + 1 + ra).min(last) {
            let key = PageKey::new(region.id, next);
            match self.ledger.reserve_slot(key, region.page_size) {
                Reservation::Reserved => {
                    self.enqueue_fill(key, false, false, false);
                    h.fills.push(next);
                }
                Reservation::NeedsEviction => break,
                _ => {}
            }
        }
    }

    /// Returns true when the page must wait for buffer space.
    fn claim_prefetch(&self, key: PageKey, page_size: usize) -> bool {
        match self.ledger.reserve_slot(key, page_size) {
            Reservation::Reserved => {
                self.enqueue_fill(key, false, true, false);
                false
            }
            Reservation::NeedsEviction => true,
            Reservation::AlreadyInFlight(_) | Reservation::AlreadyPresent => false,
        }
    }

    fn replay(&self, events: Option<Vec<FaultEvent>>) {
        for e in events.into_iter().flatten() {
            match self.handle(e, false) {
                Ok(h) if h.awaiting_space => {
                    let size = self.region_at(e.address).map_or(0, |r| r.page_size);
                    self.push_waiter(Waiter::Fault(e), size);
                }
                Ok(_) => {}
                Err(err) => log::warn!("dropping replayed event at {:#x}: {err}", e.address),
            }
        }
    }

    fn push_waiter(&self, waiter: Waiter, size: usize) {
        self.waiters.lock().push_back(waiter);
        self.request_eviction(size);
        self.service_waiters();
    }

    /// Retries space-starved work in arrival order, stopping at the first
    /// item that still does not fit.
    fn service_waiters(&self) {
        loop {
            let Some(w) = self.waiters.lock().pop_front() else {
                return;
            };
            let need = match &w {
                Waiter::Fault(e) => match self.handle(*e, false) {
                    Ok(h) if h.awaiting_space => self.region_at(e.address).map(|r| r.page_size),
                    Ok(_) => None,
                    Err(err) => {
                        log::debug!("dropping waiting event at {:#x}: {err}", e.address);
                        None
                    }
                },
                Waiter::Prefetch(key, size) => {
                    let live = self.region_by_id(key.region).is_some();
                    (live && self.claim_prefetch(*key, *size)).then_some(*size)
                }
            };
            if let Some(size) = need {
                self.waiters.lock().push_front(w);
                self.request_eviction(size);
                return;
            }
        }
    }

    /// Plans an eviction if one is due and queues the victims, split across
    /// the evictors. Returns whether anything was queued.
    fn request_eviction(&self, extra_needed: usize) -> bool {
        let Some(plan) = self.ledger.plan_eviction(extra_needed) else {
            return false;
        };
        self.trace.lock().push(EvictionRecord {
            effective_bytes: plan.effective_bytes,
            extra_needed,
            target_bytes: plan.target_bytes,
            selected_bytes: plan.selected_bytes,
            largest_victim: plan.victims.iter().map(|v| v.page_size).max().unwrap_or(0),
            high_bytes: self.ledger.high_bytes(),
            low_bytes: self.ledger.low_bytes(),
        });
        let parts = self.config.num_evictors().clamp(1, plan.victims.len());
        let mut chunks: Vec<Vec<PageDescriptor>> = vec![Vec::new(); parts];
        for (i, v) in plan.victims.into_iter().enumerate() {
            if let Some(r) = self.region_by_id(v.key.region) {
                r.eviction_started(1);
            }
            chunks[i % parts].push(v);
        }
        for victims in chunks {
            self.busy.fetch_add(1, Ordering::AcqRel);
            self.evicts.push(EvictItem { victims });
        }
        true
    }

    // ---- fills ------------------------------------------------------------

    fn filler_step(&self) -> bool {
        match self.fills.try_pop() {
            Some(item) => {
                self.run_fill(item);
                self.busy.fetch_sub(1, Ordering::AcqRel);
                true
            }
            None => false,
        }
    }

    fn run_fill(&self, item: FillItem) {
        let key = item.key;
        let Some(region) = self.region_by_id(key.region) else {
            log::error!("fill for unknown region {}", key.region);
            return;
        };
        let ps = region.page_size;
        let page_base = region.page_base(key.index);
        let mut buf = vec![0u8; ps];
        let (offset, n) = region.store_span(key.index);
        let read = if n > 0 {
            read_fully(&*region.store, offset, &mut buf[..n])
        } else {
            Ok(0)
        };
        let wp = self.caps.supports_write_protect;
        match read {
            Ok(_) => {
                let protect = region.writable && wp && !item.write;
                if let Err(e) = self.resolve(page_base, &buf, protect) {
                    region.fail(format!("resolving page {}: {e}", key.index));
                    self.settle(key, |l| l.abort_fill(key).map(|_| ()));
                } else {
                    let dirty = region.writable && (item.write || !wp);
                    self.settle(key, |l| {
                        l.commit_fill(key)?;
                        if dirty {
                            l.mark_dirty(key)?;
                        }
                        Ok(())
                    });
                    bump(&region.counters.fills);
                    bump(&self.totals.fills);
                }
            }
            Err(e) if item.demand => {
                region.fail(format!("reading page {}: {e}", key.index));
                buf.fill(POISON_BYTE);
                region.poisoned.lock().insert(key.index);
                if let Err(e) = self.resolve(page_base, &buf, false) {
                    log::error!("resolving poisoned page {page_base:#x}: {e}");
                }
                self.settle(key, |l| l.commit_fill(key).map(|_| ()));
            }
            Err(e) => {
                log::warn!("speculative fill of page {} failed: {e}", key.index);
                self.settle(key, |l| l.abort_fill(key));
            }
        }
        self.request_eviction(0);
        self.service_waiters();
    }

    fn resolve(&self, page_base: usize, data: &[u8], protect: bool) -> Result<(), FaultError> {
        match self.source.resolve_page(page_base, data, protect) {
            Err(FaultError::AlreadyPopulated(_)) => {
                log::error!("page {page_base:#x} was already populated");
                Ok(())
            }
            r => r,
        }
    }

    /// Applies a ledger transition that takes a page out of flight, then
    /// replays the events parked on it.
    fn settle(
        &self,
        key: PageKey,
        op: impl FnOnce(&BufferLedger) -> Result<(), crate::buffer::LedgerError>,
    ) {
        let parked = {
            let mut d = self.stripe(key).lock();
            if let Err(e) = op(&self.ledger) {
                log::error!("ledger transition on {key:?}: {e}");
            }
            d.remove(&key)
        };
        self.replay(parked);
    }

    // ---- eviction ---------------------------------------------------------

    fn evictor_step(&self) -> usize {
        let item = self.evicts.try_pop().or_else(|| {
            if self.request_eviction(0) {
                self.evicts.try_pop()
            } else {
                None
            }
        });
        match item {
            Some(item) => {
                let n = self.run_evict(item);
                self.busy.fetch_sub(1, Ordering::AcqRel);
                n
            }
            None => 0,
        }
    }

    fn run_evict(&self, item: EvictItem) -> usize {
        let mut bytes = 0;
        for v in item.victims {
            if self.evict_page(v).is_ok() {
                bytes += v.page_size;
            }
        }
        self.service_waiters();
        bytes
    }

    /// Writes back (if dirty), discards and releases one claimed page.
    fn evict_page(&self, v: PageDescriptor) -> Result<()> {
        let key = v.key;
        let Some(region) = self.region_by_id(key.region) else {
            log::error!("eviction for unknown region {}", key.region);
            return Ok(());
        };
        let poisoned = region.poisoned.lock().contains(&key.index);
        let written = if region.writable && v.dirty && !poisoned {
            self.write_back(&region, key.index)
        } else {
            Ok(())
        };
        if let Err(e) = written {
            region.fail(e.to_string());
            self.settle(key, |l| l.abort_eviction(key));
            region.eviction_finished();
            return Err(e);
        }
        let page_base = region.page_base(key.index);
        if let Err(e) = self.source.discard_page(page_base, region.page_size) {
            log::error!("discarding page {page_base:#x}: {e}");
        }
        self.settle(key, |l| l.release_slot(key).map(|_| ()));
        region.poisoned.lock().remove(&key.index);
        bump(&region.counters.evictions);
        bump(&self.totals.evictions);
        region.eviction_finished();
        Ok(())
    }

    /// Protects, copies and stores one page.
    fn write_back(&self, region: &Region, index: u64) -> Result<()> {
        let key = PageKey::new(region.id, index);
        let ps = region.page_size;
        let page_base = region.page_base(index);
        if self.caps.supports_write_protect {
            let _parked = self.stripe(key).lock();
            match self.source.write_protect_page(page_base, ps) {
                Ok(()) | Err(FaultError::Unsupported) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let mut buf = vec![0u8; ps];
        self.source.copy_page(page_base, &mut buf)?;
        let (offset, n) = region.store_span(index);
        if buf[n..].iter().any(|&b| b != 0) {
            region.fail(format!("page {index} was written past the end of the store"));
        }
        if n > 0 {
            let mut last = None;
            for _ in 0..=WRITE_RETRIES {
                match region.store.write_at(offset, &buf[..n]) {
                    Ok(_) => {
                        last = None;
                        break;
                    }
                    Err(e) => last = Some(e),
                }
            }
            if let Some(source) = last {
                return Err(EngineError::IoFailure {
                    base: region.base,
                    source,
                });
            }
        }
        bump(&region.counters.write_backs);
        bump(&self.totals.write_backs);
        Ok(())
    }

    // ---- flush and unmap --------------------------------------------------

    fn flush(&self, base: usize) -> Result<()> {
        self.check_aborted()?;
        let region = self.region(base)?;
        self.check_healthy(&region)?;
        let io = |source| EngineError::IoFailure { base, source };
        if !region.writable {
            return region.store.sync().map_err(io);
        }
        let _serial = region.flush_lock.lock();
        // A write-triggered fill is visible to the writer before it commits.
        while self
            .ledger
            .region_pages(region.id)
            .iter()
            .any(|d| d.state == PageState::Filling)
        {
            self.make_progress();
        }
        let keep_dirty = !self.caps.supports_write_protect;
        let mut first_err = None;
        for d in self.ledger.region_pages(region.id) {
            if !d.dirty || !d.state.is_present() {
                continue;
            }
            if self.ledger.begin_flush(d.key, keep_dirty) != FlushClaim::Claimed {
                continue;
            }
            let result = if region.poisoned.lock().contains(&d.key.index) {
                Ok(())
            } else {
                self.write_back(&region, d.key.index)
            };
            if let Err(e) = self.ledger.end_flush(d.key, result.is_ok()) {
                log::error!("ending flush of {:?}: {e}", d.key);
            }
            if let Err(e) = result {
                region.fail(e.to_string());
                first_err.get_or_insert(e);
            }
        }
        while region.evictions_in_flight() > 0 {
            if self.manual {
                self.evictor_step();
            } else {
                region.wait_evictions(Duration::from_millis(10));
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        self.check_healthy(&region)?;
        region.store.sync().map_err(|e| {
            region.fail(e.to_string());
            io(e)
        })
    }

    fn uunmap(&self, base: usize) -> Result<()> {
        let region = self.region(base)?;
        region.draining.store(true, Ordering::Release);
        loop {
            let (claimed, busy) = self.ledger.claim_region(region.id);
            let any = !claimed.is_empty();
            region.eviction_started(claimed.len());
            let mut failure = None;
            for v in claimed {
                if let Err(e) = self.evict_page(v) {
                    failure.get_or_insert(e);
                }
            }
            if let Some(e) = failure {
                region.draining.store(false, Ordering::Release);
                return Err(e);
            }
            if busy == 0 && !any {
                break;
            }
            if !any {
                self.make_progress();
            }
        }
        if let Err(e) = region.store.sync() {
            region.fail(e.to_string());
            region.draining.store(false, Ordering::Release);
            return Err(EngineError::IoFailure { base, source: e });
        }
        self.waiters.lock().retain(|w| match w {
            Waiter::Fault(e) => !region.contains(e.address),
            Waiter::Prefetch(k, _) => k.region != region.id,
        });
        self.source.unregister_range(base)?;
        {
            let mut reg = self.registry.write();
            reg.by_base.remove(&base);
            reg.by_id.remove(&region.id);
        }
        self.check_healthy(&region)
    }

    /// Lets in-flight work advance while a caller waits on it.
    fn make_progress(&self) {
        if self.manual && (self.filler_step() || self.evictor_step() > 0) {
            return;
        }
        thread::sleep(Duration::from_micros(500));
    }

    fn run_pending(&self) {
        loop {
            self.service_waiters();
            let filled = self.filler_step();
            let evicted = self.evictor_step() > 0;
            if !filled && !evicted {
                return;
            }
        }
    }

    // ---- workers ------------------------------------------------------------

    fn manager_loop(&self) {
        let max = self.config.max_fault_events();
        while self.running.load(Ordering::Acquire) {
            match self.source.poll_events(max) {
                Ok(events) => {
                    for e in events {
                        if let Err(err) = self.dispatch(e) {
                            log::error!("handling fault at {:#x}: {err}", e.address);
                            if matches!(err, EngineError::FaultOutsideRegion(_)) {
                                return;
                            }
                        }
                    }
                }
                Err(FaultError::SourceClosed) => return,
                Err(e) => {
                    log::error!("polling fault events: {e}");
                    thread::sleep(WORKER_TICK);
                }
            }
        }
    }

    fn filler_loop(&self, worker: usize) {
        while self.running.load(Ordering::Acquire) {
            if let Some(gate) = &self.filler_gate {
                gate(worker);
            }
            if let Some(item) = self.fills.pop_timeout(WORKER_TICK) {
                self.run_fill(item);
                self.busy.fetch_sub(1, Ordering::AcqRel);
            }
        }
    }

    fn evictor_loop(&self) {
        while self.running.load(Ordering::Acquire) {
            match self.evicts.pop_timeout(WORKER_TICK) {
                Some(item) => {
                    self.run_evict(item);
                    self.busy.fetch_sub(1, Ordering::AcqRel);
                }
                None => {
                    self.request_eviction(0);
                    self.service_waiters();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
