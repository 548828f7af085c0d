//! Back a region with application callbacks instead of a file.

use std::error::Error;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use upager::config::RuntimeConfig;
use upager::engine::{Engine, MapMode};
use upager::fault_source::SimulatedSource;
use upager::store::CallbackStore;

const PAGE: usize = 4096;

fn main() -> Result<(), Box<dyn Error>> {
    // Every byte is computed on demand from its offset.
    let calls = Arc::new(AtomicU64::new(0));
    let counter = calls.clone();
    let store = CallbackStore::read_only(
        (1 << 20) as u64,
        Box::new(move |offset, buf| {
            counter.fetch_add(1, Ordering::Relaxed);
            for (i, b) in buf.iter_mut().enumerate() {
                *b = ((offset as usize + i) % 251) as u8;
            }
            Ok(buf.len())
        }),
    );

    let config = RuntimeConfig::defaults(2, 1 << 30)?
        .set_buffer_capacity(32 * PAGE)?
        .set_page_size(PAGE)?
        .set_read_ahead(3)?;
    let engine = Engine::start(config, Arc::new(SimulatedSource::default()))?;
    let base = engine.umap(1 << 20, MapMode::ReadOnly, Arc::new(store), None)?;
    let mem = engine.memory(base)?;
    for p in 0..16 {
        assert_eq!(mem.read_u64(p * PAGE) as u8, ((p * PAGE) % 251) as u8);
    }
    let status = engine.status(base)?;
    println!(
        "16 pages read with {} store calls and {} demand faults",
        calls.load(Ordering::Relaxed),
        status.faults_served
    );
    engine.shutdown()?;
    Ok(())
}
