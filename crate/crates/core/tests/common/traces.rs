//! Random scripted access traces replayed through a threaded engine on the
//! simulated source, checked against a direct-apply oracle.

use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upager::config::RuntimeConfig;
use upager::engine::{Engine, MapMode};
use upager::fault_source::{ScriptRunner, SimulatedSource, Step};
use upager::store::MemoryStore;

#[derive(Debug, Clone)]
pub struct TraceShape {
    pub page_size: usize,
    pub buffer_pages: usize,
    pub region_pages: usize,
    pub store_len: usize,
    pub fillers: usize,
    pub evictors: usize,
    pub read_ahead: usize,
    pub threads: usize,
    pub steps: usize,
}

impl TraceShape {
    pub fn random(rng: &mut impl Rng) -> Self {
        let page_size = 4096 << rng.gen_range(0..=8);
        let buffer_pages = rng.gen_range(8..=64);
        let region_pages = rng.gen_range(buffer_pages / 2..=buffer_pages * 2);
        let tail = if rng.gen_bool(0.3) { rng.gen_range(1..page_size) } else { 0 };
        TraceShape {
            page_size,
            buffer_pages,
            region_pages,
            store_len: region_pages * page_size - tail,
            fillers: rng.gen_range(1..=8),
            evictors: rng.gen_range(1..=8),
            read_ahead: if rng.gen_bool(0.3) { rng.gen_range(1..=4) } else { 0 },
            threads: rng.gen_range(1..=4),
            steps: rng.gen_range(20..=150),
        }
    }

    pub fn config(&self) -> RuntimeConfig {
        RuntimeConfig::defaults(2, 1 << 30)
            .unwrap()
            .set_buffer_capacity(self.buffer_pages * self.page_size)
            .unwrap()
            .set_page_size(self.page_size)
            .unwrap()
            .set_fillers(self.fillers)
            .unwrap()
            .set_evictors(self.evictors)
            .unwrap()
            .set_read_ahead(self.read_ahead)
            .unwrap()
    }
}

fn initial_bytes(len: usize, seed: u64) -> Vec<u8> {
    (0..len).map(|i| (i as u64).wrapping_mul(31).wrapping_add(seed) as u8).collect()
}

/// Steps stay inside one page, since only single-page accesses are atomic.
fn random_steps(rng: &mut impl Rng, shape: &TraceShape, base: usize) -> Vec<Step> {
    let hot = rng.gen_range(1..=shape.region_pages);
    (0..shape.steps)
        .map(|_| {
            let thread = rng.gen_range(0..shape.threads);
            let page = if rng.gen_bool(0.5) {
                rng.gen_range(0..hot)
            } else {
                rng.gen_range(0..shape.region_pages)
            };
            let page_start = page * shape.page_size;
            let page_end = (page_start + shape.page_size).min(shape.store_len);
            let offset = rng.gen_range(page_start..page_end);
            let len = rng.gen_range(1..=64.min(page_end - offset));
            if rng.gen_bool(0.5) {
                Step::write(thread, base + offset, (0..len).map(|_| rng.gen()).collect())
            } else {
                Step::read(thread, base + offset, len)
            }
        })
        .collect()
}

/// Replays one random trace. Returns the shape on success and a description
/// of the first divergence otherwise.
pub fn run_trace(seed: u64) -> Result<TraceShape, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = TraceShape::random(&mut rng);
    let bytes = initial_bytes(shape.store_len, seed);
    let store = Arc::new(MemoryStore::new(bytes.clone()));
    let source = Arc::new(SimulatedSource::default());
    let engine = Engine::start(shape.config(), source.clone()).map_err(|e| e.to_string())?;
    let base = engine
        .umap(shape.store_len, MapMode::ReadWrite, store.clone(), None)
        .map_err(|e| e.to_string())?;
    let steps = random_steps(&mut rng, &shape, base);
    let mut runner = ScriptRunner::new(&source, steps);
    runner
        .run(Duration::from_secs(20))
        .map_err(|e| format!("seed {seed} {shape:?}: {e}"))?;

    let mut oracle = bytes;
    for (i, c) in runner.completed().iter().enumerate() {
        let at = c.address - base;
        let span = &mut oracle[at..at + c.data.len()];
        if c.is_write {
            span.copy_from_slice(&c.data);
        } else if span != c.data.as_slice() {
            return Err(format!("seed {seed} {shape:?}: read #{i} at {at:#x} saw stale bytes"));
        }
    }
    engine.uunmap(base).map_err(|e| e.to_string())?;
    engine.shutdown().map_err(|e| e.to_string())?;
    let stored = store.snapshot();
    if stored != oracle {
        let at = stored.iter().zip(&oracle).position(|(a, b)| a != b).unwrap_or(stored.len());
        return Err(format!("seed {seed} {shape:?}: store differs from oracle at byte {at:#x}"));
    }
    Ok(shape)
}
