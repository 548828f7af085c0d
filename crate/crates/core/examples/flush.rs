//! Make writes durable without unmapping.

use std::error::Error;
use std::sync::Arc;

use upager::config::RuntimeConfig;
use upager::engine::{Engine, MapMode};
use upager::fault_source::SimulatedSource;
use upager::store::FileStore;

fn main() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("log");
    std::fs::write(&path, vec![0u8; 64 << 10])?;

    let config = RuntimeConfig::defaults(2, 1 << 30)?
        .set_buffer_capacity(64 << 10)?
        .set_page_size(4096)?;
    let engine = Engine::start(config, Arc::new(SimulatedSource::default()))?;
    let base = engine.umap(64 << 10, MapMode::ReadWrite, Arc::new(FileStore::open(&path, true)?), None)?;
    let mem = engine.memory(base)?;
    for i in 0..8 {
        mem.write(i * 8192, format!("entry {i}").as_bytes());
    }
    engine.flush(base)?;
    println!("dirty bytes after flush: {}", engine.stats().dirty_bytes);

    // Drop the buffer without further write-back, as a crash would.
    engine.abandon();
    let bytes = std::fs::read(&path)?;
    assert_eq!(&bytes[7 * 8192..7 * 8192 + 7], b"entry 7");
    println!("all 8 entries survived");
    Ok(())
}
