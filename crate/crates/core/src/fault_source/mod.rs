//! Sources of page-fault events and the primitives that resolve them.
//!
//! [`FaultSource`] is implemented by [`SimulatedSource`], a deterministic
//! software MMU usable on any OS, and by [`KernelSource`], which drives the
//! Linux `userfaultfd` facility. The engine only ever talks to the trait.

mod kernel;
mod script;
mod sim;

use std::sync::Arc;

use thiserror::Error;

pub use kernel::{KernelOptions, KernelSource};
pub use script::{CompletedStep, RunnerError, ScriptRunner, Step, StepKind};
pub use sim::{SimConfig, SimulatedSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    Read,
    Write,
    /// A write to a populated, write-protected page.
    WriteProtect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultEvent {
    pub address: usize,
    pub kind: FaultKind,
    /// Strictly increasing per source.
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub supports_write_protect: bool,
    /// Base page granularity; page sizes and bases are multiples of it.
    pub granularity: usize,
}

#[derive(Debug, Error)]
pub enum FaultError {
    #[error("range {base:#x}+{length:#x} overlaps a registered range")]
    OverlapError { base: usize, length: usize },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("no registered range at {0:#x}")]
    UnknownRange(usize),
    #[error("fault source is closed")]
    SourceClosed,
    #[error("fault source is already owned by an engine")]
    AlreadyAttached,
    #[error("page {0:#x} is already populated")]
    AlreadyPopulated(usize),
    #[error("page {0:#x} is not populated")]
    NotPopulated(usize),
    #[error("write protection is not supported by this source")]
    Unsupported,
    #[error("user-fault facility unavailable: {0}")]
    KernelUnavailable(String),
    #[error("{op} failed: {source}")]
    KernelError {
        op: &'static str,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = FaultError> = std::result::Result<T, E>;

/// Operations the engine needs from a fault source.
///
/// `poll_events` is called by manager workers; the page operations may be
/// called concurrently by fillers and evictors on distinct pages. Calls on
/// one page are serialized by the caller.
pub trait FaultSource: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Claims exclusive ownership for one engine.
    fn attach(&self) -> Result<()>;

    fn detach(&self);

    /// Reserves a fresh, unpopulated address range of `length` bytes.
    fn reserve(&self, length: usize, writable: bool) -> Result<usize>;

    fn register_range(&self, base: usize, length: usize, page_size: usize, writable: bool) -> Result<()>;

    fn unregister_range(&self, base: usize) -> Result<()>;

    /// Returns up to `max_events` pending events in sequence order, waiting
    /// a bounded time when none are pending.
    fn poll_events(&self, max_events: usize) -> Result<Vec<FaultEvent>>;

    /// Atomically populates an unpopulated page with `data` and wakes
    /// every thread waiting on it. With `write_protect`, the page becomes
    /// visible already protected.
    fn resolve_page(&self, page_base: usize, data: &[u8], write_protect: bool) -> Result<()>;

    fn write_protect_page(&self, page_base: usize, page_size: usize) -> Result<()>;

    fn unprotect_page(&self, page_base: usize, page_size: usize) -> Result<()>;

    /// Returns a populated page to the unpopulated state.
    fn discard_page(&self, page_base: usize, page_size: usize) -> Result<()>;

    /// Wakes threads waiting on a page without changing it.
    fn wake_page(&self, page_base: usize, page_size: usize) -> Result<()>;

    /// Copies the current content of a populated page.
    fn copy_page(&self, page_base: usize, out: &mut [u8]) -> Result<()>;

    /// Application-side view of a registered range.
    fn memory(&self, base: usize) -> Result<Arc<dyn MappedMemory>>;

    fn close(&self);
}

/// Application-side access to a mapped range. Accesses to unpopulated pages
/// block until the engine resolves them.
pub trait MappedMemory: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read(&self, offset: usize, buf: &mut [u8]);

    fn write(&self, offset: usize, data: &[u8]);

    fn read_u64(&self, offset: usize) -> u64 {
        let mut b = [0u8; 8];
        self.read(offset, &mut b);
        u64::from_le_bytes(b)
    }

    fn write_u64(&self, offset: usize, value: u64) {
        self.write(offset, &value.to_le_bytes());
    }

    /// Reads consecutive little-endian words starting at `offset`.
    fn read_u64s(&self, offset: usize, out: &mut [u64]) {
        let mut bytes = vec![0u8; out.len() * 8];
        self.read(offset, &mut bytes);
        for (w, chunk) in out.iter_mut().zip(bytes.chunks_exact(8)) {
            *w = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }

    fn write_u64s(&self, offset: usize, words: &[u64]) {
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        self.write(offset, &bytes);
    }
}

pub(crate) fn check_page_args(offset_in_range: usize, page_size: usize, data_len: usize) -> Result<()> {
    if !offset_in_range.is_multiple_of(page_size) {
        return Err(FaultError::InvalidRange(format!(
            "offset {offset_in_range:#x} is not aligned to page size {page_size:#x}"
        )));
    }
    if data_len != page_size {
        return Err(FaultError::InvalidRange(format!(
            "page data is {data_len} bytes, page size is {page_size}"
        )));
    }
    Ok(())
}
