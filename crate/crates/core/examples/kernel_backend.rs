//! Serve real page faults with the kernel user-fault facility, when the
//! host allows it.

use std::error::Error;
use std::sync::Arc;

use upager::config::RuntimeConfig;
use upager::engine::{Engine, MapMode};
use upager::fault_source::{FaultSource, KernelSource};
use upager::store::MemoryStore;

const PAGE: usize = 4096;

fn main() -> Result<(), Box<dyn Error>> {
    let source = match KernelSource::open() {
        Ok(s) => Arc::new(s),
        Err(e) => {
            println!("kernel fault source unavailable: {e}");
            return Ok(());
        }
    };
    println!("write protection: {}", source.capabilities().supports_write_protect);

    let config = RuntimeConfig::defaults(2, 1 << 30)?
        .set_buffer_capacity(16 * PAGE)?
        .set_page_size(PAGE)?;
    let engine = Engine::start(config, source)?;
    let store = Arc::new(MemoryStore::new(vec![7u8; 64 * PAGE]));
    let base = engine.umap(64 * PAGE, MapMode::ReadWrite, store.clone(), None)?;
    let mem = engine.memory(base)?;
    for p in 0..64 {
        mem.write_u64(p * PAGE, p as u64);
    }
    let status = engine.status(base)?;
    println!("faults {}, evictions {}", status.faults_served, status.evictions);
    engine.shutdown()?;
    assert_eq!(u64::from_le_bytes(store.snapshot()[63 * PAGE..63 * PAGE + 8].try_into()?), 63);
    println!("64 pages written through a 16-page buffer");
    Ok(())
}
