//! Linux `userfaultfd` fault source (x86_64 and aarch64).

use std::collections::BTreeMap;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;

use super::{Capabilities, FaultError, FaultEvent, FaultKind, FaultSource, MappedMemory, Result};

const UFFD_API: u64 = 0xAA;
const UFFD_USER_MODE_ONLY: libc::c_int = 1;
const UFFD_FEATURE_PAGEFAULT_FLAG_WP: u64 = 1 << 0;

const UFFDIO_API: libc::c_ulong = 0xC018_AA3F;
const UFFDIO_REGISTER: libc::c_ulong = 0xC020_AA00;
const UFFDIO_UNREGISTER: libc::c_ulong = 0x8010_AA01;
const UFFDIO_WAKE: libc::c_ulong = 0x8010_AA02;
const UFFDIO_COPY: libc::c_ulong = 0xC028_AA03;
const UFFDIO_WRITEPROTECT: libc::c_ulong = 0xC018_AA06;

const UFFDIO_REGISTER_MODE_MISSING: u64 = 1 << 0;
const UFFDIO_REGISTER_MODE_WP: u64 = 1 << 1;
const UFFDIO_COPY_MODE_WP: u64 = 1 << 1;
const UFFDIO_WRITEPROTECT_MODE_WP: u64 = 1 << 0;
const UFFDIO_WRITEPROTECT_IOCTL_BIT: u64 = 1 << 0x06;

const UFFD_EVENT_PAGEFAULT: u8 = 0x12;
const UFFD_PAGEFAULT_FLAG_WRITE: u64 = 1 << 0;
const UFFD_PAGEFAULT_FLAG_WP: u64 = 1 << 1;
const MSG_SIZE: usize = 32;

#[repr(C)]
#[derive(Default)]
struct UffdioApi {
    api: u64,
    features: u64,
    ioctls: u64,
}

#[repr(C)]
#[derive(Default, Clone, Copy)]
struct UffdioRange {
    start: u64,
    len: u64,
}

#[repr(C)]
#[derive(Default)]
struct UffdioRegister {
    range: UffdioRange,
    mode: u64,
    ioctls: u64,
}

#[repr(C)]
#[derive(Default)]
struct UffdioCopy {
    dst: u64,
    src: u64,
    len: u64,
    mode: u64,
    copy: i64,
}

#[repr(C)]
#[derive(Default)]
struct UffdioWriteprotect {
    range: UffdioRange,
    mode: u64,
}

#[derive(Debug, Clone)]
pub struct KernelOptions {
    /// Use write protection when the kernel offers it.
    pub write_protect: bool,
    pub poll_timeout: Duration,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            write_protect: true,
            poll_timeout: Duration::from_millis(5),
        }
    }
}

struct KernelRange {
    len: usize,
    /// Whether this source created the mapping and must unmap it.
    owned: bool,
}

pub struct KernelSource {
    fd: OwnedFd,
    wp: bool,
    granularity: usize,
    poll_timeout: Duration,
    attached: AtomicBool,
    closed: AtomicBool,
    seq: AtomicU64,
    reserved: RwLock<BTreeMap<usize, usize>>,
    ranges: RwLock<BTreeMap<usize, KernelRange>>,
}

fn open_fd() -> io::Result<OwnedFd> {
    let flags = libc::O_CLOEXEC | libc::O_NONBLOCK;
    for extra in [UFFD_USER_MODE_ONLY, 0] {
        // SAFETY: plain syscall with integer flags.
        let fd = unsafe { libc::syscall(libc::SYS_userfaultfd, flags | extra) };
        if fd >= 0 {
            // SAFETY: the kernel returned a fresh descriptor we now own.
            return Ok(unsafe { OwnedFd::from_raw_fd(fd as RawFd) });
        }
        let err = io::Error::last_os_error();
        if err.raw_os_error() != Some(libc::EINVAL) {
            return Err(err);
        }
    }
    Err(io::Error::from_raw_os_error(libc::EINVAL))
}

fn ioctl<T>(fd: RawFd, request: libc::c_ulong, arg: &mut T) -> io::Result<()> {
    // SAFETY: `arg` is a repr(C) struct matching `request`'s layout.
    let rc = unsafe { libc::ioctl(fd, request as _, arg as *mut T) };
    if rc < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

fn handshake(fd: RawFd, features: u64) -> io::Result<UffdioApi> {
    let mut api = UffdioApi {
        api: UFFD_API,
        features,
        ioctls: 0,
    };
    ioctl(fd, UFFDIO_API, &mut api)?;
    Ok(api)
}

fn kernel_err(op: &'static str) -> impl FnOnce(io::Error) -> FaultError {
    move |source| FaultError::KernelError { op, source }
}

impl KernelSource {
    pub fn open() -> Result<Self> {
        Self::open_with(KernelOptions::default())
    }

    pub fn open_with(options: KernelOptions) -> Result<Self> {
        let unavailable = |e: io::Error| FaultError::KernelUnavailable(e.to_string());
        // The handshake runs once per descriptor, so probe features on a
        // throwaway one first.
        let probe = open_fd().map_err(unavailable)?;
        let offered = handshake(probe.as_raw_fd(), 0).map_err(unavailable)?.features;
        drop(probe);
        let wp = options.write_protect && offered & UFFD_FEATURE_PAGEFAULT_FLAG_WP != 0;
        let fd = open_fd().map_err(unavailable)?;
        handshake(fd.as_raw_fd(), if wp { UFFD_FEATURE_PAGEFAULT_FLAG_WP } else { 0 })
            .map_err(unavailable)?;
        // SAFETY: sysconf has no preconditions.
        let granularity = unsafe { libc::sysconf(libc::_SC_PAGESIZE) }.max(4096) as usize;
        Ok(KernelSource {
            fd,
            wp,
            granularity,
            poll_timeout: options.poll_timeout,
            attached: AtomicBool::new(false),
            closed: AtomicBool::new(false),
            seq: AtomicU64::new(1),
            reserved: RwLock::new(BTreeMap::new()),
            ranges: RwLock::new(BTreeMap::new()),
        })
    }

    /// Whether the running kernel lets this process use the facility.
    pub fn is_available() -> bool {
        Self::open().is_ok()
    }

    fn raw(&self) -> RawFd {
        self.fd.as_raw_fd()
    }

    fn range_of(&self, address: usize) -> Result<(usize, usize)> {
        let ranges = self.ranges.read();
        match ranges.range(..=address).next_back() {
            Some((&base, r)) if address < base + r.len => Ok((base, r.len)),
            _ => Err(FaultError::UnknownRange(address)),
        }
    }

    fn wake(&self, start: usize, len: usize) -> Result<()> {
        let mut range = UffdioRange {
            start: start as u64,
            len: len as u64,
        };
        ioctl(self.raw(), UFFDIO_WAKE, &mut range).map_err(kernel_err("UFFDIO_WAKE"))
    }

    fn set_protection(&self, page_base: usize, page_size: usize, protect: bool) -> Result<()> {
        let mut wp = UffdioWriteprotect {
            range: UffdioRange {
                start: page_base as u64,
                len: page_size as u64,
            },
            mode: if protect { UFFDIO_WRITEPROTECT_MODE_WP } else { 0 },
        };
        ioctl(self.raw(), UFFDIO_WRITEPROTECT, &mut wp).map_err(kernel_err("UFFDIO_WRITEPROTECT"))
    }
}

impl FaultSource for KernelSource {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_write_protect: self.wp,
            granularity: self.granularity,
        }
    }

    fn attach(&self) -> Result<()> {
        if self.closed.load(Ordering::Acquire) {
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

    fn reserve(&self, length: usize, writable: bool) -> Result<usize> {
        if length == 0 {
            return Err(FaultError::InvalidRange("zero length".into()));
        }
        let length = length.next_multiple_of(self.granularity);
        let prot = if writable {
            libc::PROT_READ | libc::PROT_WRITE
        } else {
            libc::PROT_READ
        };
        // SAFETY: anonymous mapping at a kernel-chosen address.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                length,
                prot,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(FaultError::KernelError {
                op: "mmap",
                source: io::Error::last_os_error(),
            });
        }
        self.reserved.write().insert(ptr as usize, length);
        Ok(ptr as usize)
    }

    fn register_range(&self, base: usize, length: usize, page_size: usize, writable: bool) -> Result<()> {
        let g = self.granularity;
        if length == 0 || !base.is_multiple_of(g) || !page_size.is_multiple_of(g) || !length.is_multiple_of(page_size) {
            return Err(FaultError::InvalidRange(format!(
                "base {base:#x}, length {length:#x} and page size {page_size:#x} must be aligned"
            )));
        }
        let mut ranges = self.ranges.write();
        let overlaps = ranges
            .range(..base + length)
            .next_back()
            .is_some_and(|(&b, r)| b + r.len > base);
        if overlaps {
            return Err(FaultError::OverlapError { base, length });
        }
        let use_wp = writable && self.wp;
        let mut reg = UffdioRegister {
            range: UffdioRange {
                start: base as u64,
                len: length as u64,
            },
            mode: UFFDIO_REGISTER_MODE_MISSING | if use_wp { UFFDIO_REGISTER_MODE_WP } else { 0 },
            ioctls: 0,
        };
        ioctl(self.raw(), UFFDIO_REGISTER, &mut reg).map_err(kernel_err("UFFDIO_REGISTER"))?;
        if use_wp && reg.ioctls & UFFDIO_WRITEPROTECT_IOCTL_BIT == 0 {
            let mut range = reg.range;
            let _ = ioctl(self.raw(), UFFDIO_UNREGISTER, &mut range);
            return Err(FaultError::Unsupported);
        }
        let owned = self.reserved.write().remove(&base).is_some();
        ranges.insert(base, KernelRange { len: length, owned });
        Ok(())
    }

    fn unregister_range(&self, base: usize) -> Result<()> {
        let range = self.ranges.write().remove(&base).ok_or(FaultError::UnknownRange(base))?;
        let mut r = UffdioRange {
            start: base as u64,
            len: range.len as u64,
        };
        ioctl(self.raw(), UFFDIO_UNREGISTER, &mut r).map_err(kernel_err("UFFDIO_UNREGISTER"))?;
        if range.owned {
            // SAFETY: mapping created by `reserve` with this base and length.
            unsafe { libc::munmap(base as *mut libc::c_void, range.len) };
        }
        Ok(())
    }

    fn poll_events(&self, max_events: usize) -> Result<Vec<FaultEvent>> {
        if self.closed.load(Ordering::Acquire) {
            return Err(FaultError::SourceClosed);
        }
        let mut pfd = libc::pollfd {
            fd: self.raw(),
            events: libc::POLLIN,
            revents: 0,
        };
        let timeout = self.poll_timeout.as_millis().clamp(1, i32::MAX as u128) as i32;
        // SAFETY: one valid pollfd.
        let rc = unsafe { libc::poll(&mut pfd, 1, timeout) };
        if rc < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                return Ok(Vec::new());
            }
            return Err(FaultError::KernelError { op: "poll", source: err });
        }
        if rc == 0 {
            return Ok(Vec::new());
        }
        let max_events = max_events.max(1);
        let mut buf = vec![0u8; max_events * MSG_SIZE];
        // SAFETY: buf is valid for buf.len() bytes.
        let n = unsafe { libc::read(self.raw(), buf.as_mut_ptr().cast(), buf.len()) };
        if n < 0 {
            let err = io::Error::last_os_error();
            return match err.raw_os_error() {
                Some(libc::EAGAIN) | Some(libc::EINTR) => Ok(Vec::new()),
                _ => Err(FaultError::KernelError { op: "read", source: err }),
            };
        }
        let mut events = Vec::new();
        for msg in buf[..n as usize].chunks_exact(MSG_SIZE) {
            if msg[0] != UFFD_EVENT_PAGEFAULT {
                continue;
            }
            let flags = u64::from_ne_bytes(msg[8..16].try_into().expect("8 bytes"));
            let address = u64::from_ne_bytes(msg[16..24].try_into().expect("8 bytes")) as usize;
            let kind = if flags & UFFD_PAGEFAULT_FLAG_WP != 0 {
                FaultKind::WriteProtect
            } else if flags & UFFD_PAGEFAULT_FLAG_WRITE != 0 {
                FaultKind::Write
            } else {
                FaultKind::Read
            };
            let seq = self.seq.fetch_add(1, Ordering::Relaxed);
            events.push(FaultEvent { address, kind, seq });
        }
        Ok(events)
    }

    fn resolve_page(&self, page_base: usize, data: &[u8], write_protect: bool) -> Result<()> {
        if write_protect && !self.wp {
            return Err(FaultError::Unsupported);
        }
        self.range_of(page_base)?;
        if !page_base.is_multiple_of(self.granularity) || !data.len().is_multiple_of(self.granularity) || data.is_empty() {
            return Err(FaultError::InvalidRange(format!("bad page {page_base:#x}+{}", data.len())));
        }
        let mut done = 0usize;
        while done < data.len() {
            let mut copy = UffdioCopy {
                dst: (page_base + done) as u64,
                src: data[done..].as_ptr() as u64,
                len: (data.len() - done) as u64,
                mode: if write_protect { UFFDIO_COPY_MODE_WP } else { 0 },
                copy: 0,
            };
            match ioctl(self.raw(), UFFDIO_COPY, &mut copy) {
                Ok(()) => done = data.len(),
                Err(e) => {
                    if copy.copy > 0 {
                        done += copy.copy as usize;
                    }
                    match e.raw_os_error() {
                        Some(libc::EAGAIN) => continue,
                        Some(libc::EEXIST) if done == 0 => {
                            return Err(FaultError::AlreadyPopulated(page_base))
                        }
                        Some(libc::EEXIST) => {
                            // A previous partial copy raced; skip the populated
                            // base page and carry on.
                            done += self.granularity;
                        }
                        _ => return Err(FaultError::KernelError { op: "UFFDIO_COPY", source: e }),
                    }
                }
            }
        }
        Ok(())
    }

    fn write_protect_page(&self, page_base: usize, page_size: usize) -> Result<()> {
        if !self.wp {
            return Err(FaultError::Unsupported);
        }
        self.range_of(page_base)?;
        self.set_protection(page_base, page_size, true)
    }

    fn unprotect_page(&self, page_base: usize, page_size: usize) -> Result<()> {
        if !self.wp {
            return Ok(());
        }
        self.range_of(page_base)?;
        self.set_protection(page_base, page_size, false)
    }

    fn discard_page(&self, page_base: usize, page_size: usize) -> Result<()> {
        self.range_of(page_base)?;
        // SAFETY: the page lies inside a registered mapping.
        let rc = unsafe { libc::madvise(page_base as *mut libc::c_void, page_size, libc::MADV_DONTNEED) };
        if rc < 0 {
            return Err(FaultError::KernelError {
                op: "madvise",
                source: io::Error::last_os_error(),
            });
        }
        self.wake(page_base, page_size)
    }

    fn wake_page(&self, page_base: usize, page_size: usize) -> Result<()> {
        self.range_of(page_base)?;
        self.wake(page_base, page_size)
    }

    fn copy_page(&self, page_base: usize, out: &mut [u8]) -> Result<()> {
        let (base, len) = self.range_of(page_base)?;
        if page_base + out.len() > base + len {
            return Err(FaultError::InvalidRange(format!("copy past end of range at {page_base:#x}")));
        }
        // SAFETY: the page is populated (caller contract) and in range.
        unsafe { std::ptr::copy_nonoverlapping(page_base as *const u8, out.as_mut_ptr(), out.len()) };
        Ok(())
    }

    fn memory(&self, base: usize) -> Result<Arc<dyn MappedMemory>> {
        let ranges = self.ranges.read();
        let r = ranges.get(&base).ok_or(FaultError::UnknownRange(base))?;
        Ok(Arc::new(KernelMemory { base, len: r.len }))
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }
}

impl Drop for KernelSource {
    fn drop(&mut self) {
        for (&base, r) in self.ranges.read().iter() {
            if r.owned {
                // SAFETY: mapping created by `reserve`.
                unsafe { libc::munmap(base as *mut libc::c_void, r.len) };
            }
        }
        for (&base, &len) in self.reserved.read().iter() {
            // SAFETY: mapping created by `reserve`.
            unsafe { libc::munmap(base as *mut libc::c_void, len) };
        }
    }
}

/// Raw view of a registered kernel range; faults are served by the engine.
struct KernelMemory {
    base: usize,
    len: usize,
}

impl KernelMemory {
    fn check(&self, offset: usize, n: usize) {
        assert!(
            offset.checked_add(n).is_some_and(|e| e <= self.len),
            "access {offset:#x}+{n} outside mapping of {} bytes",
            self.len
        );
    }
}

impl MappedMemory for KernelMemory {
    fn len(&self) -> usize {
        self.len
    }

    fn read(&self, offset: usize, buf: &mut [u8]) {
        self.check(offset, buf.len());
        // SAFETY: in-bounds access to a live mapping; faults block in the kernel.
        unsafe { std::ptr::copy_nonoverlapping((self.base + offset) as *const u8, buf.as_mut_ptr(), buf.len()) };
    }

    fn write(&self, offset: usize, data: &[u8]) {
        self.check(offset, data.len());
        // SAFETY: as for `read`.
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), (self.base + offset) as *mut u8, data.len()) };
    }

    fn read_u64(&self, offset: usize) -> u64 {
        self.check(offset, 8);
        // SAFETY: as for `read`.
        unsafe { std::ptr::read_unaligned((self.base + offset) as *const u64) }
    }

    fn write_u64(&self, offset: usize, value: u64) {
        self.check(offset, 8);
        // SAFETY: as for `read`.
        unsafe { std::ptr::write_unaligned((self.base + offset) as *mut u64, value) }
    }
}
