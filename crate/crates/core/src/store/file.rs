use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use parking_lot::RwLock;

use super::{check_read, check_write, BackingStore, Result, StoreError, StoreKind};

/// A slice of a file contributing bytes to a file-backed store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileSegment {
    pub path: PathBuf,
    pub offset: u64,
    pub length: u64,
}

impl FileSegment {
    pub fn new(path: impl Into<PathBuf>, offset: u64, length: u64) -> Self {
        FileSegment {
            path: path.into(),
            offset,
            length,
        }
    }
}

struct OpenSegment {
    segment: FileSegment,
    file: File,
    /// Global offset of the first byte of this segment.
    start: u64,
}

/// Single- or multi-file store using positioned I/O (`pread`/`pwrite`).
///
/// Segments are concatenated in registration order into one contiguous
/// address space.
pub struct FileStore {
    kind: StoreKind,
    writable: bool,
    total: u64,
    segments: RwLock<Option<Vec<OpenSegment>>>,
}

impl FileStore {
    /// Opens a whole file as a single-segment store.
    pub fn open(path: impl AsRef<Path>, writable: bool) -> Result<Self> {
        let path = path.as_ref();
        let len = std::fs::metadata(path)
            .map_err(|source| StoreError::IoFailure {
                segment: Some(0),
                path: Some(path.to_path_buf()),
                source,
            })?
            .len();
        Self::from_segments(StoreKind::SingleFile, vec![FileSegment::new(path, 0, len)], writable)
    }

    /// Opens one slice of a file.
    pub fn open_segment(segment: FileSegment, writable: bool) -> Result<Self> {
        Self::from_segments(StoreKind::SingleFile, vec![segment], writable)
    }

    /// Concatenates several file slices, in order, into one store.
    pub fn open_multi(segments: Vec<FileSegment>, writable: bool) -> Result<Self> {
        Self::from_segments(StoreKind::MultiFile, segments, writable)
    }

    fn from_segments(kind: StoreKind, segments: Vec<FileSegment>, writable: bool) -> Result<Self> {
        if segments.is_empty() {
            return Err(StoreError::InvalidSegment {
                path: PathBuf::new(),
                reason: "no segments".into(),
            });
        }
        let mut open = Vec::with_capacity(segments.len());
        let mut start = 0u64;
        for (index, segment) in segments.into_iter().enumerate() {
            let file = OpenOptions::new()
                .read(true)
                .write(writable)
                .open(&segment.path)
                .map_err(|source| StoreError::IoFailure {
                    segment: Some(index),
                    path: Some(segment.path.clone()),
                    source,
                })?;
            let file_len = file
                .metadata()
                .map_err(|source| StoreError::IoFailure {
                    segment: Some(index),
                    path: Some(segment.path.clone()),
                    source,
                })?
                .len();
            if segment.length == 0 {
                return Err(StoreError::InvalidSegment {
                    path: segment.path,
                    reason: "zero length".into(),
                });
            }
            if segment.offset.checked_add(segment.length).is_none_or(|end| end > file_len) {
                return Err(StoreError::InvalidSegment {
                    reason: format!(
                        "offset {} + length {} exceeds file size {file_len}",
                        segment.offset, segment.length
                    ),
                    path: segment.path,
                });
            }
            let length = segment.length;
            open.push(OpenSegment {
                segment,
                file,
                start,
            });
            start += length;
        }
        Ok(FileStore {
            kind,
            writable,
            total: start,
            segments: RwLock::new(Some(open)),
        })
    }

    pub fn segments(&self) -> Vec<FileSegment> {
        self.segments
            .read()
            .as_ref()
            .map(|s| s.iter().map(|o| o.segment.clone()).collect())
            .unwrap_or_default()
    }

    /// Maps a global offset to `(segment index, byte offset in that
    /// segment's file)`.
    pub fn resolve_segment(&self, global_offset: u64) -> Result<(usize, u64)> {
        check_read(global_offset, self.total)?;
        let guard = self.segments.read();
        let segments = guard.as_ref().ok_or(StoreError::StoreClosed)?;
        let (index, intra) = locate(segments, global_offset);
        Ok((index, segments[index].segment.offset + intra))
    }

    /// Drops the file handles; later I/O fails.
    pub fn close(&self) {
        self.segments.write().take();
    }

    fn io_error(index: usize, seg: &OpenSegment, source: std::io::Error) -> StoreError {
        StoreError::IoFailure {
            segment: Some(index),
            path: Some(seg.segment.path.clone()),
            source,
        }
    }
}

fn locate(segments: &[OpenSegment], global_offset: u64) -> (usize, u64) {
    // Last segment whose start is <= offset.
    let index = segments.partition_point(|s| s.start <= global_offset) - 1;
    (index, global_offset - segments[index].start)
}

impl BackingStore for FileStore {
    fn kind(&self) -> StoreKind {
        self.kind
    }

    fn size(&self) -> u64 {
        self.total
    }

    fn is_writable(&self) -> bool {
        self.writable
    }

    fn is_open(&self) -> bool {
        self.segments.read().is_some()
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<usize> {
        check_read(offset, self.total)?;
        let guard = self.segments.read();
        let segments = guard.as_ref().ok_or(StoreError::StoreClosed)?;
        let want = buf.len().min((self.total - offset) as usize);
        let (mut index, mut intra) = locate(segments, offset);
        let mut done = 0;
        while done < want {
            let seg = &segments[index];
            let chunk = ((seg.segment.length - intra) as usize).min(want - done);
            seg.file
                .read_exact_at(&mut buf[done..done + chunk], seg.segment.offset + intra)
                .map_err(|e| Self::io_error(index, seg, e))?;
            done += chunk;
            index += 1;
            intra = 0;
        }
        Ok(done)
    }

    fn write_at(&self, offset: u64, data: &[u8]) -> Result<usize> {
        if !self.writable {
            return Err(StoreError::ReadOnlyStore);
        }
        if data.is_empty() {
            return Ok(0);
        }
        check_write(offset, data.len(), self.total)?;
        let guard = self.segments.read();
        let segments = guard.as_ref().ok_or(StoreError::StoreClosed)?;
        let (mut index, mut intra) = locate(segments, offset);
        let mut done = 0;
        while done < data.len() {
            let seg = &segments[index];
            let chunk = ((seg.segment.length - intra) as usize).min(data.len() - done);
            seg.file
                .write_all_at(&data[done..done + chunk], seg.segment.offset + intra)
                .map_err(|e| Self::io_error(index, seg, e))?;
            done += chunk;
            index += 1;
            intra = 0;
        }
        Ok(done)
    }

    fn sync(&self) -> Result<()> {
        let guard = self.segments.read();
        let segments = guard.as_ref().ok_or_else(|| {
            StoreError::io(std::io::Error::new(std::io::ErrorKind::NotConnected, "store closed"))
        })?;
        if !self.writable {
            return Ok(());
        }
        for (index, seg) in segments.iter().enumerate() {
            seg.file.sync_data().map_err(|e| Self::io_error(index, seg, e))?;
        }
        Ok(())
    }
}
