//! Present slices of several files as one contiguous region.

use std::error::Error;
use std::sync::Arc;

use upager::config::RuntimeConfig;
use upager::engine::{Engine, MapMode};
use upager::fault_source::SimulatedSource;
use upager::store::{BackingStore, FileSegment, FileStore};

fn main() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let mut segments = Vec::new();
    for (i, fill) in b"abc".iter().copied().enumerate() {
        let path = dir.path().join(format!("part{i}"));
        // 1 KiB of header that the region skips, then 8 KiB of data.
        let mut bytes = vec![0u8; 1024];
        bytes.extend(std::iter::repeat_n(fill, 8192));
        std::fs::write(&path, bytes)?;
        segments.push(FileSegment::new(path, 1024, 8192));
    }
    let store = Arc::new(FileStore::open_multi(segments, false)?);
    println!("global offset 20000 lives in {:?}", store.resolve_segment(20000)?);

    let config = RuntimeConfig::defaults(2, 1 << 30)?
        .set_buffer_capacity(64 << 10)?
        .set_page_size(4096)?;
    let engine = Engine::start(config, Arc::new(SimulatedSource::default()))?;
    let len = store.size() as usize;
    let base = engine.umap(len, MapMode::ReadOnly, store, None)?;
    let mem = engine.memory(base)?;
    for off in [0, 8191, 8192, 20000] {
        let mut b = [0u8];
        mem.read(off, &mut b);
        println!("offset {off}: {}", b[0] as char);
    }
    engine.shutdown()?;
    Ok(())
}
