//! Prefetch scattered pages ahead of use so that accessing them raises no
//! faults.

use std::error::Error;
use std::sync::Arc;

use upager::config::RuntimeConfig;
use upager::engine::{Engine, MapMode};
use upager::fault_source::SimulatedSource;
use upager::store::MemoryStore;

const PAGE: usize = 4096;

fn main() -> Result<(), Box<dyn Error>> {
    let config = RuntimeConfig::defaults(2, 1 << 30)?
        .set_buffer_capacity(64 * PAGE)?
        .set_page_size(PAGE)?;
    let engine = Engine::start(config, Arc::new(SimulatedSource::default()))?;
    let store = Arc::new(MemoryStore::new((0..128 * PAGE).map(|i| (i / PAGE) as u8).collect()));
    let base = engine.umap(128 * PAGE, MapMode::ReadOnly, store, None)?;

    let wanted = [5, 15, 40, 99];
    let pages: Vec<usize> = wanted.iter().map(|p| base + p * PAGE).collect();
    engine.prefetch(&pages)?;
    engine.wait_idle();

    let mem = engine.memory(base)?;
    for p in wanted {
        let mut b = [0u8];
        mem.read(p * PAGE, &mut b);
        println!("page {p} starts with {}", b[0]);
    }
    let status = engine.status(base)?;
    println!("fills {}, demand faults {}", status.fills, status.faults_served);
    engine.shutdown()?;
    Ok(())
}
