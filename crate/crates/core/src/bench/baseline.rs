use std::fs::OpenOptions;
use std::io;
use std::path::Path;

use memmap2::{Mmap, MmapMut};

use crate::fault_source::MappedMemory;

enum Map {
    ReadOnly(Mmap),
    ReadWrite(MmapMut),
}

/// A shared file mapping managed entirely by the OS.
pub(crate) struct OsMapping {
    map: Map,
    base: usize,
    len: usize,
}

impl OsMapping {
    pub fn open(path: &Path, writable: bool) -> io::Result<Self> {
        let file = OpenOptions::new().read(true).write(writable).open(path)?;
        // SAFETY: the benchmark owns the file for the lifetime of the mapping.
        let map = unsafe {
            if writable {
                Map::ReadWrite(MmapMut::map_mut(&file)?)
            } else {
                Map::ReadOnly(Mmap::map(&file)?)
            }
        };
        let (base, len) = match &map {
            Map::ReadOnly(m) => (m.as_ptr() as usize, m.len()),
            Map::ReadWrite(m) => (m.as_ptr() as usize, m.len()),
        };
        Ok(OsMapping { map, base, len })
    }

    pub fn flush(&self) -> io::Result<()> {
        match &self.map {
            Map::ReadOnly(_) => Ok(()),
            Map::ReadWrite(m) => m.flush(),
        }
    }

    fn check(&self, offset: usize, n: usize) {
        assert!(
            offset.checked_add(n).is_some_and(|end| end <= self.len),
            "access {offset:#x}+{n} outside a mapping of {} bytes",
            self.len
        );
    }
}

impl MappedMemory for OsMapping {
    fn len(&self) -> usize {
        self.len
    }

    fn read(&self, offset: usize, buf: &mut [u8]) {
        self.check(offset, buf.len());
        // SAFETY: in bounds of a live mapping.
        unsafe { std::ptr::copy_nonoverlapping((self.base + offset) as *const u8, buf.as_mut_ptr(), buf.len()) };
    }

    fn write(&self, offset: usize, data: &[u8]) {
        assert!(matches!(self.map, Map::ReadWrite(_)), "write to a read-only mapping");
        self.check(offset, data.len());
        // SAFETY: in bounds of a live writable mapping; callers coordinate
        // overlapping writes themselves.
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), (self.base + offset) as *mut u8, data.len()) };
    }
}
