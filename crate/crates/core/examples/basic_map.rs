//! Map a file through the engine, read and modify it, unmap.

use std::error::Error;
use std::sync::Arc;

use upager::config::RuntimeConfig;
use upager::engine::{Engine, MapMode};
use upager::fault_source::SimulatedSource;
use upager::store::FileStore;

fn main() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("data");
    std::fs::write(&path, (0..1u32 << 20).map(|i| i as u8).collect::<Vec<_>>())?;

    let config = RuntimeConfig::defaults(2, 1 << 30)?
        .set_buffer_capacity(256 << 10)?
        .set_page_size(64 << 10)?;
    let engine = Engine::start(config, Arc::new(SimulatedSource::default()))?;
    let store = Arc::new(FileStore::open(&path, true)?);
    let base = engine.umap(1 << 20, MapMode::ReadWrite, store, None)?;
    let mem = engine.memory(base)?;

    let mut sum = 0u64;
    let mut buf = vec![0u8; 4096];
    for off in (0..1 << 20).step_by(4096) {
        mem.read(off, &mut buf);
        sum += buf.iter().map(|&b| b as u64).sum::<u64>();
    }
    mem.write(12345, b"hello");

    let status = engine.status(base)?;
    println!("byte sum {sum}, faults {}, evictions {}", status.faults_served, status.evictions);
    engine.uunmap(base)?;
    engine.shutdown()?;

    let bytes = std::fs::read(&path)?;
    assert_eq!(&bytes[12345..12350], b"hello");
    println!("write persisted");
    Ok(())
}
