use std::io;

use parking_lot::RwLock;

use super::{check_read, check_write, BackingStore, Result, StoreError, StoreKind};

/// Volatile store held in process memory.
pub struct MemoryStore {
    bytes: RwLock<Vec<u8>>,
    writable: bool,
}

impl MemoryStore {
    pub fn new(bytes: Vec<u8>) -> Self {
        MemoryStore {
            bytes: RwLock::new(bytes),
            writable: true,
        }
    }

    pub fn zeroed(size: usize) -> Self {
        Self::new(vec![0; size])
    }

    pub fn read_only(bytes: Vec<u8>) -> Self {
        MemoryStore {
            bytes: RwLock::new(bytes),
            writable: false,
        }
    }

    /// Copy of the current contents.
    pub fn snapshot(&self) -> Vec<u8> {
        self.bytes.read().clone()
    }
}

impl BackingStore for MemoryStore {
    fn kind(&self) -> StoreKind {
        StoreKind::InMemory
    }

    fn size(&self) -> u64 {
        self.bytes.read().len() as u64
    }

    fn is_writable(&self) -> bool {
        self.writable
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<usize> {
        let bytes = self.bytes.read();
        check_read(offset, bytes.len() as u64)?;
        let start = offset as usize;
        let n = buf.len().min(bytes.len() - start);
        buf[..n].copy_from_slice(&bytes[start..start + n]);
        Ok(n)
    }

    fn write_at(&self, offset: u64, data: &[u8]) -> Result<usize> {
        if !self.writable {
            return Err(StoreError::ReadOnlyStore);
        }
        let mut bytes = self.bytes.write();
        check_write(offset, data.len(), bytes.len() as u64)?;
        let start = offset as usize;
        bytes[start..start + data.len()].copy_from_slice(data);
        Ok(data.len())
    }

    fn sync(&self) -> Result<()> {
        Ok(())
    }
}

/// Read-only store of a declared size whose every byte is zero.
pub struct ZeroStore {
    size: u64,
}

impl ZeroStore {
    pub fn new(size: u64) -> Self {
        ZeroStore { size }
    }
}

impl BackingStore for ZeroStore {
    fn kind(&self) -> StoreKind {
        StoreKind::ZeroFill
    }

    fn size(&self) -> u64 {
        self.size
    }

    fn is_writable(&self) -> bool {
        false
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<usize> {
        check_read(offset, self.size)?;
        let n = buf.len().min((self.size - offset) as usize);
        buf[..n].fill(0);
        Ok(n)
    }

    fn write_at(&self, _offset: u64, _data: &[u8]) -> Result<usize> {
        Err(StoreError::ReadOnlyStore)
    }

    fn sync(&self) -> Result<()> {
        Ok(())
    }
}

pub type ReadFn = Box<dyn Fn(u64, &mut [u8]) -> io::Result<usize> + Send + Sync>;
pub type WriteFn = Box<dyn Fn(u64, &[u8]) -> io::Result<usize> + Send + Sync>;
pub type SyncFn = Box<dyn Fn() -> io::Result<()> + Send + Sync>;

/// Application-supplied store: a pair of functions with the same contract
/// as [`BackingStore::read_at`] and [`BackingStore::write_at`].
pub struct CallbackStore {
    size: u64,
    read: ReadFn,
    write: Option<WriteFn>,
    sync: Option<SyncFn>,
}

impl CallbackStore {
    pub fn read_only(size: u64, read: ReadFn) -> Self {
        CallbackStore {
            size,
            read,
            write: None,
            sync: None,
        }
    }

    pub fn new(size: u64, read: ReadFn, write: WriteFn) -> Self {
        CallbackStore {
            size,
            read,
            write: Some(write),
            sync: None,
        }
    }

    pub fn with_sync(mut self, sync: SyncFn) -> Self {
        self.sync = Some(sync);
        self
    }
}

impl BackingStore for CallbackStore {
    fn kind(&self) -> StoreKind {
        StoreKind::Callback
    }

    fn size(&self) -> u64 {
        self.size
    }

    fn is_writable(&self) -> bool {
        self.write.is_some()
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<usize> {
        check_read(offset, self.size)?;
        let n = buf.len().min((self.size - offset) as usize);
        (self.read)(offset, &mut buf[..n]).map_err(StoreError::io)
    }

    fn write_at(&self, offset: u64, data: &[u8]) -> Result<usize> {
        let write = self.write.as_ref().ok_or(StoreError::ReadOnlyStore)?;
        check_write(offset, data.len(), self.size)?;
        write(offset, data).map_err(StoreError::io)
    }

    fn sync(&self) -> Result<()> {
        match &self.sync {
            Some(f) => f().map_err(StoreError::io),
            None => Ok(()),
        }
    }
}
