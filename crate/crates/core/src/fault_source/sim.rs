use std::alloc::{self, Layout};
use std::collections::{BTreeMap, VecDeque};
use std::ptr::NonNull;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};

use super::{
    check_page_args, Capabilities, FaultError, FaultEvent, FaultKind, FaultSource, MappedMemory,
    Result,
};

const WAIT_STRIPES: usize = 64;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub supports_write_protect: bool,
    pub granularity: usize,
    /// Longest time `poll_events` waits when nothing is pending.
    pub poll_timeout: Duration,
    /// First address handed out by `reserve`.
    pub base_address: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            supports_write_protect: true,
            granularity: 4096,
            poll_timeout: Duration::from_millis(5),
            base_address: 0x1000_0000_0000,
        }
    }
}

/// Heap page backing one populated simulated page.
struct PageFrame {
    ptr: NonNull<u8>,
    len: usize,
}

// SAFETY: the frame is plain bytes; concurrent access is coordinated by the
// owning slot's lock.
unsafe impl Send for PageFrame {}
unsafe impl Sync for PageFrame {}

impl PageFrame {
    fn layout(len: usize) -> Layout {
        Layout::from_size_align(len, 64).expect("valid page layout")
    }

    fn from_bytes(data: &[u8]) -> Self {
        assert!(!data.is_empty());
        // SAFETY: layout has non-zero size.
        let raw = unsafe { alloc::alloc(Self::layout(data.len())) };
        let ptr = NonNull::new(raw).unwrap_or_else(|| alloc::handle_alloc_error(Self::layout(data.len())));
        // SAFETY: fresh allocation of data.len() bytes.
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), ptr.as_ptr(), data.len()) };
        PageFrame { ptr, len: data.len() }
    }

    fn read(&self, offset: usize, out: &mut [u8]) {
        assert!(offset + out.len() <= self.len);
        // SAFETY: bounds checked above; the frame outlives the call.
        unsafe { std::ptr::copy_nonoverlapping(self.ptr.as_ptr().add(offset), out.as_mut_ptr(), out.len()) };
    }

    /// Writes through a shared reference. Callers hold the slot's read lock,
    /// which excludes resolve, protect and discard; byte-level races between
    /// application threads are the application's own business, as with real
    /// memory.
    fn write(&self, offset: usize, data: &[u8]) {
        assert!(offset + data.len() <= self.len);
        // SAFETY: bounds checked above; the allocation is exclusively owned
        // by this frame and never handed out as a Rust reference.
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), self.ptr.as_ptr().add(offset), data.len()) };
    }
}

impl Drop for PageFrame {
    fn drop(&mut self) {
        // SAFETY: allocated in from_bytes with the same layout.
        unsafe { alloc::dealloc(self.ptr.as_ptr(), Self::layout(self.len)) };
    }
}

#[derive(Default)]
struct SlotState {
    frame: Option<PageFrame>,
    protected: bool,
}

#[derive(Default)]
struct Slot {
    state: RwLock<SlotState>,
    /// Bumped under the write lock on every change that can unblock a waiter.
    epoch: AtomicU64,
}

/// Where an access stopped: the page and the slot epoch observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Blocked {
    pub page: usize,
    pub epoch: u64,
}

struct EventQueue {
    pending: VecDeque<FaultEvent>,
    next_seq: u64,
}

struct Shared {
    config: SimConfig,
    events: Mutex<EventQueue>,
    events_cv: Condvar,
    closed: AtomicBool,
    delivered: AtomicU64,
    stripes: Vec<(Mutex<()>, Condvar)>,
    changes: Mutex<u64>,
    changes_cv: Condvar,
}

impl Shared {
    fn raise(&self, address: usize, kind: FaultKind) {
        if self.closed.load(Ordering::Acquire) {
            return;
        }
        let mut q = self.events.lock();
        let seq = q.next_seq;
        q.next_seq += 1;
        q.pending.push_back(FaultEvent { address, kind, seq });
        drop(q);
        self.delivered.fetch_add(1, Ordering::Relaxed);
        self.events_cv.notify_one();
    }

    fn bump_changes(&self) {
        *self.changes.lock() += 1;
        self.changes_cv.notify_all();
    }
}

/// One registered simulated range.
pub(crate) struct SimRange {
    shared: Arc<Shared>,
    base: usize,
    len: usize,
    page_size: usize,
    writable: bool,
    stripe_offset: usize,
    live: AtomicBool,
    slots: Box<[Slot]>,
}

impl SimRange {
    pub(crate) fn base(&self) -> usize {
        self.base
    }

    fn stripe(&self, page: usize) -> &(Mutex<()>, Condvar) {
        &self.shared.stripes[(self.stripe_offset + page) % WAIT_STRIPES]
    }

    fn notify(&self, page: usize) {
        let (lock, cv) = self.stripe(page);
        drop(lock.lock());
        cv.notify_all();
        self.shared.bump_changes();
    }

    fn check_live(&self) {
        if !self.live.load(Ordering::Acquire) {
            panic!("access to unmapped simulated range at {:#x}", self.base);
        }
    }

    pub(crate) fn epoch(&self, page: usize) -> u64 {
        self.slots[page].epoch.load(Ordering::Acquire)
    }

    /// Attempts one access confined to a single page. On a fault, raises the
    /// event and reports where it stopped.
    fn try_page_read(&self, page: usize, offset: usize, out: &mut [u8]) -> Result<(), Blocked> {
        let slot = &self.slots[page];
        let st = slot.state.read();
        match &st.frame {
            Some(frame) => {
                frame.read(offset, out);
                Ok(())
            }
            None => {
                let epoch = slot.epoch.load(Ordering::Acquire);
                drop(st);
                self.shared.raise(self.base + page * self.page_size + offset, FaultKind::Read);
                Err(Blocked { page, epoch })
            }
        }
    }

    fn try_page_write(&self, page: usize, offset: usize, data: &[u8]) -> Result<(), Blocked> {
        if !self.writable {
            panic!("write to read-only simulated range at {:#x}", self.base);
        }
        let slot = &self.slots[page];
        let st = slot.state.read();
        let kind = match &st.frame {
            Some(frame) if !st.protected => {
                frame.write(offset, data);
                return Ok(());
            }
            Some(_) => FaultKind::WriteProtect,
            None => FaultKind::Write,
        };
        let epoch = slot.epoch.load(Ordering::Acquire);
        drop(st);
        self.shared.raise(self.base + page * self.page_size + offset, kind);
        Err(Blocked { page, epoch })
    }

    fn wait(&self, blocked: Blocked) {
        let (lock, cv) = self.stripe(blocked.page);
        let mut guard = lock.lock();
        while self.epoch(blocked.page) == blocked.epoch {
            self.check_live();
            cv.wait_for(&mut guard, Duration::from_millis(50));
        }
    }

    /// Splits `[offset, offset + len)` into per-page pieces.
    fn pieces(&self, offset: usize, len: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        assert!(
            offset.checked_add(len).is_some_and(|end| end <= self.len),
            "access {offset:#x}+{len} outside simulated range of {} bytes",
            self.len
        );
        let ps = self.page_size;
        let mut pos = offset;
        let end = offset + len;
        std::iter::from_fn(move || {
            if pos >= end {
                return None;
            }
            let page = pos / ps;
            let in_page = pos % ps;
            let n = (ps - in_page).min(end - pos);
            let piece = (page, in_page, pos - offset, n);
            pos += n;
            Some(piece)
        })
    }

    pub(crate) fn try_read(&self, offset: usize, buf: &mut [u8]) -> Result<(), Blocked> {
        self.check_live();
        for (page, in_page, at, n) in self.pieces(offset, buf.len()) {
            self.try_page_read(page, in_page, &mut buf[at..at + n])?;
        }
        Ok(())
    }

    pub(crate) fn try_write(&self, offset: usize, data: &[u8]) -> Result<(), Blocked> {
        self.check_live();
        for (page, in_page, at, n) in self.pieces(offset, data.len()) {
            self.try_page_write(page, in_page, &data[at..at + n])?;
        }
        Ok(())
    }

    fn slot_for(&self, page_base: usize) -> Result<(usize, &Slot)> {
        let off = page_base - self.base;
        if !off.is_multiple_of(self.page_size) {
            return Err(FaultError::InvalidRange(format!("{page_base:#x} is not a page base")));
        }
        let page = off / self.page_size;
        Ok((page, &self.slots[page]))
    }

    fn is_populated(&self, page: usize) -> bool {
        self.slots[page].state.read().frame.is_some()
    }

    fn is_protected(&self, page: usize) -> bool {
        self.slots[page].state.read().protected
    }
}

impl MappedMemory for SimRange {
    fn len(&self) -> usize {
        self.len
    }

    fn read(&self, offset: usize, buf: &mut [u8]) {
        self.check_live();
        for (page, in_page, at, n) in self.pieces(offset, buf.len()) {
            while let Err(b) = self.try_page_read(page, in_page, &mut buf[at..at + n]) {
                self.wait(b);
            }
        }
    }

    fn write(&self, offset: usize, data: &[u8]) {
        self.check_live();
        for (page, in_page, at, n) in self.pieces(offset, data.len()) {
            while let Err(b) = self.try_page_write(page, in_page, &data[at..at + n]) {
                self.wait(b);
            }
        }
    }
}

/// A software MMU: ranges of simulated pages whose first touch raises a
/// fault event and blocks the touching thread until the page is resolved.
pub struct SimulatedSource {
    shared: Arc<Shared>,
    ranges: RwLock<BTreeMap<usize, Arc<SimRange>>>,
    next_base: Mutex<usize>,
    attached: AtomicBool,
}

impl Default for SimulatedSource {
    fn default() -> Self {
        Self::new(SimConfig::default())
    }
}

impl SimulatedSource {
    pub fn new(config: SimConfig) -> Self {
        assert!(config.granularity.is_power_of_two());
        let base = config.base_address;
        SimulatedSource {
            shared: Arc::new(Shared {
                config,
                events: Mutex::new(EventQueue {
                    pending: VecDeque::new(),
                    next_seq: 1,
                }),
                events_cv: Condvar::new(),
                closed: AtomicBool::new(false),
                delivered: AtomicU64::new(0),
                stripes: (0..WAIT_STRIPES).map(|_| (Mutex::new(()), Condvar::new())).collect(),
                changes: Mutex::new(0),
                changes_cv: Condvar::new(),
            }),
            ranges: RwLock::new(BTreeMap::new()),
            next_base: Mutex::new(base),
            attached: AtomicBool::new(false),
        }
    }

    /// Source without write-protection support.
    pub fn without_write_protect() -> Self {
        Self::new(SimConfig {
            supports_write_protect: false,
            ..SimConfig::default()
        })
    }

    pub(crate) fn find(&self, address: usize) -> Option<Arc<SimRange>> {
        let ranges = self.ranges.read();
        let (_, range) = ranges.range(..=address).next_back()?;
        (address < range.base + range.len).then(|| Arc::clone(range))
    }

    fn find_page(&self, page_base: usize) -> Result<Arc<SimRange>> {
        self.find(page_base).ok_or(FaultError::UnknownRange(page_base))
    }

    /// Total events delivered since creation.
    pub fn events_delivered(&self) -> u64 {
        self.shared.delivered.load(Ordering::Relaxed)
    }

    /// Number of events waiting to be polled.
    pub fn pending_events(&self) -> usize {
        self.shared.events.lock().pending.len()
    }

    pub fn is_populated(&self, address: usize) -> bool {
        self.find(address).is_some_and(|r| r.is_populated((address - r.base) / r.page_size))
    }

    pub fn is_protected(&self, address: usize) -> bool {
        self.find(address).is_some_and(|r| r.is_protected((address - r.base) / r.page_size))
    }

    /// Blocking read as an application thread would perform it.
    pub fn read(&self, address: usize, buf: &mut [u8]) {
        let range = self.find(address).expect("read from unmapped simulated address");
        range.read(address - range.base, buf);
    }

    /// Blocking write as an application thread would perform it.
    pub fn write(&self, address: usize, data: &[u8]) {
        let range = self.find(address).expect("write to unmapped simulated address");
        range.write(address - range.base, data);
    }

    pub(crate) fn changes(&self) -> u64 {
        *self.shared.changes.lock()
    }

    /// Waits until the global change counter moves past `seen`.
    pub(crate) fn wait_changes(&self, seen: u64, timeout: Duration) {
        let mut g = self.shared.changes.lock();
        if *g == seen {
            self.shared.changes_cv.wait_for(&mut g, timeout);
        }
    }
}

impl FaultSource for SimulatedSource {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_write_protect: self.shared.config.supports_write_protect,
            granularity: self.shared.config.granularity,
        }
    }

    fn attach(&self) -> Result<()> {
        if self.shared.closed.load(Ordering::Acquire) {
            return Err(FaultError::SourceClosed);
        }
        self.attached
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| ())
            .map_err(|_| FaultError::AlreadyAttached)
    }

    fn detach(&self) {
        self.attached.store(false, Ordering::Release);
    }

    fn reserve(&self, length: usize, _writable: bool) -> Result<usize> {
        if length == 0 {
            return Err(FaultError::InvalidRange("zero length".into()));
        }
        let g = self.shared.config.granularity;
        let mut next = self.next_base.lock();
        let base = *next;
        // Leave an unmapped guard gap between ranges.
        *next = (base + length + g).next_multiple_of(1 << 21);
        Ok(base)
    }

    fn register_range(&self, base: usize, length: usize, page_size: usize, writable: bool) -> Result<()> {
        let g = self.shared.config.granularity;
        if length == 0 {
            return Err(FaultError::InvalidRange("zero length".into()));
        }
        if !base.is_multiple_of(g) || page_size == 0 || !page_size.is_multiple_of(g) || !length.is_multiple_of(page_size) {
            return Err(FaultError::InvalidRange(format!(
                "base {base:#x}, length {length:#x} and page size {page_size:#x} must be aligned"
            )));
        }
        let mut ranges = self.ranges.write();
        let overlaps = ranges
            .range(..base + length)
            .next_back()
            .is_some_and(|(_, r)| r.base + r.len > base);
        if overlaps {
            return Err(FaultError::OverlapError { base, length });
        }
        let pages = length / page_size;
        let range = SimRange {
            shared: Arc::clone(&self.shared),
            base,
            len: length,
            page_size,
            writable,
            stripe_offset: (base / g) % WAIT_STRIPES,
            live: AtomicBool::new(true),
            slots: (0..pages).map(|_| Slot::default()).collect(),
        };
        ranges.insert(base, Arc::new(range));
        Ok(())
    }

    fn unregister_range(&self, base: usize) -> Result<()> {
        let range = self
            .ranges
            .write()
            .remove(&base)
            .ok_or(FaultError::UnknownRange(base))?;
        range.live.store(false, Ordering::Release);
        let end = base + range.len;
        self.shared
            .events
            .lock()
            .pending
            .retain(|e| e.address < base || e.address >= end);
        // Release memory even if application handles outlive the range.
        for slot in range.slots.iter() {
            let mut st = slot.state.write();
            st.frame = None;
            st.protected = false;
            slot.epoch.fetch_add(1, Ordering::AcqRel);
        }
        for (lock, cv) in &self.shared.stripes {
            drop(lock.lock());
            cv.notify_all();
        }
        Ok(())
    }

    fn poll_events(&self, max_events: usize) -> Result<Vec<FaultEvent>> {
        let max_events = max_events.max(1);
        let mut q = self.shared.events.lock();
        if self.shared.closed.load(Ordering::Acquire) {
            return Err(FaultError::SourceClosed);
        }
        if q.pending.is_empty() {
            self.shared.events_cv.wait_for(&mut q, self.shared.config.poll_timeout);
        }
        let n = q.pending.len().min(max_events);
        Ok(q.pending.drain(..n).collect())
    }

    fn resolve_page(&self, page_base: usize, data: &[u8], write_protect: bool) -> Result<()> {
        if write_protect && !self.shared.config.supports_write_protect {
            return Err(FaultError::Unsupported);
        }
        let range = self.find_page(page_base)?;
        check_page_args(page_base - range.base, range.page_size, data.len())?;
        let (page, slot) = range.slot_for(page_base)?;
        {
            let mut st = slot.state.write();
            if st.frame.is_some() {
                return Err(FaultError::AlreadyPopulated(page_base));
            }
            st.frame = Some(PageFrame::from_bytes(data));
            st.protected = write_protect;
            slot.epoch.fetch_add(1, Ordering::AcqRel);
        }
        range.notify(page);
        Ok(())
    }

    fn write_protect_page(&self, page_base: usize, _page_size: usize) -> Result<()> {
        if !self.shared.config.supports_write_protect {
            return Err(FaultError::Unsupported);
        }
        let range = self.find_page(page_base)?;
        let (_, slot) = range.slot_for(page_base)?;
        let mut st = slot.state.write();
        if st.frame.is_none() {
            return Err(FaultError::NotPopulated(page_base));
        }
        st.protected = true;
        Ok(())
    }

    fn unprotect_page(&self, page_base: usize, _page_size: usize) -> Result<()> {
        let range = self.find_page(page_base)?;
        let (page, slot) = range.slot_for(page_base)?;
        {
            let mut st = slot.state.write();
            if st.frame.is_none() {
                return Err(FaultError::NotPopulated(page_base));
            }
            if !st.protected {
                return Ok(());
            }
            st.protected = false;
            slot.epoch.fetch_add(1, Ordering::AcqRel);
        }
        range.notify(page);
        Ok(())
    }

    fn discard_page(&self, page_base: usize, _page_size: usize) -> Result<()> {
        let range = self.find_page(page_base)?;
        let (page, slot) = range.slot_for(page_base)?;
        let frame = {
            let mut st = slot.state.write();
            let frame = st.frame.take().ok_or(FaultError::NotPopulated(page_base))?;
            st.protected = false;
            slot.epoch.fetch_add(1, Ordering::AcqRel);
            frame
        };
        drop(frame);
        range.notify(page);
        Ok(())
    }

    fn wake_page(&self, page_base: usize, _page_size: usize) -> Result<()> {
        let range = self.find_page(page_base)?;
        let (page, _) = range.slot_for(page_base)?;
        range.notify(page);
        Ok(())
    }

    fn copy_page(&self, page_base: usize, out: &mut [u8]) -> Result<()> {
        let range = self.find_page(page_base)?;
        check_page_args(page_base - range.base, range.page_size, out.len())?;
        let (_, slot) = range.slot_for(page_base)?;
        let st = slot.state.read();
        let frame = st.frame.as_ref().ok_or(FaultError::NotPopulated(page_base))?;
        frame.read(0, out);
        Ok(())
    }

    fn memory(&self, base: usize) -> Result<Arc<dyn MappedMemory>> {
        let range = self.ranges.read().get(&base).cloned().ok_or(FaultError::UnknownRange(base))?;
        Ok(range)
    }

    fn close(&self) {
        self.shared.closed.store(true, Ordering::Release);
        self.shared.events_cv.notify_all();
    }
}
