//! Backing stores: the byte-addressed sources regions are filled from and
//! written back to.
//!
//! Every backend implements [`BackingStore`]. Reads past the end return a
//! short count; zero-filling the remainder of a page is the engine's job.

mod file;
mod memory;

use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

pub use file::{FileSegment, FileStore};
pub use memory::{CallbackStore, MemoryStore, ReadFn, SyncFn, WriteFn, ZeroStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StoreKind {
    SingleFile,
    MultiFile,
    InMemory,
    ZeroFill,
    Callback,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("offset {offset} is outside the store (size {size})")]
    OutOfRange { offset: u64, size: u64 },
    #[error("store is read-only")]
    ReadOnlyStore,
    #[error("store is closed")]
    StoreClosed,
    #[error("invalid segment {path:?}: {reason}")]
    InvalidSegment { path: PathBuf, reason: String },
    #[error("I/O failure on {}: {source}", describe_segment(.segment, .path))]
    IoFailure {
        segment: Option<usize>,
        path: Option<PathBuf>,
        #[source]
        source: io::Error,
    },
}

fn describe_segment(segment: &Option<usize>, path: &Option<PathBuf>) -> String {
    match (segment, path) {
        (Some(i), Some(p)) => format!("segment {i} ({})", p.display()),
        (None, Some(p)) => p.display().to_string(),
        (Some(i), None) => format!("segment {i}"),
        (None, None) => "store".to_string(),
    }
}

impl StoreError {
    pub fn io(source: io::Error) -> Self {
        StoreError::IoFailure {
            segment: None,
            path: None,
            source,
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Uniform read/write interface over a backing store.
///
/// Implementations must tolerate concurrent calls from many workers on any
/// ranges. Overlapping concurrent writes carry no ordering guarantee.
pub trait BackingStore: Send + Sync {
    fn kind(&self) -> StoreKind;

    /// Total addressable bytes; stable for the lifetime of the store.
    fn size(&self) -> u64;

    fn is_writable(&self) -> bool;

    fn is_open(&self) -> bool {
        true
    }

    /// Copies `min(buf.len(), size - offset)` bytes starting at `offset`.
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<usize>;

    /// Writes all of `data` at `offset`; the range must lie inside the store.
    fn write_at(&self, offset: u64, data: &[u8]) -> Result<usize>;

    /// Makes completed writes durable.
    fn sync(&self) -> Result<()>;
}

/// Shared handle to a store, as held by regions and workers.
pub type Store = Arc<dyn BackingStore>;

pub(crate) fn check_read(offset: u64, size: u64) -> Result<()> {
    if offset >= size {
        return Err(StoreError::OutOfRange { offset, size });
    }
    Ok(())
}

pub(crate) fn check_write(offset: u64, len: usize, size: u64) -> Result<()> {
    match offset.checked_add(len as u64) {
        Some(end) if end <= size => Ok(()),
        _ => Err(StoreError::OutOfRange { offset, size }),
    }
}

/// Reads until `buf` is full or the store ends, returning the byte count.
pub fn read_fully(store: &dyn BackingStore, offset: u64, buf: &mut [u8]) -> Result<usize> {
    let size = store.size();
    if offset >= size || buf.is_empty() {
        return Ok(0);
    }
    let want = buf.len().min((size - offset) as usize);
    let mut done = 0;
    while done < want {
        let n = store.read_at(offset + done as u64, &mut buf[done..want])?;
        if n == 0 {
            break;
        }
        done += n;
    }
    Ok(done)
}
