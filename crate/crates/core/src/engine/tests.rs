use std::io;
use std::sync::atomic::AtomicUsize;

use super::*;
use crate::fault_source::SimulatedSource;
use crate::store::{CallbackStore, MemoryStore};

const PAGE: usize = 4096;

fn config(buffer_pages: usize, workers: usize, read_ahead: usize) -> RuntimeConfig {
    RuntimeConfig::defaults(workers, 1 << 30)
        .unwrap()
        .set_buffer_capacity(buffer_pages * PAGE)
        .unwrap()
        .set_page_size(PAGE)
        .unwrap()
        .set_fillers(workers)
        .unwrap()
        .set_evictors(workers)
        .unwrap()
        .set_read_ahead(read_ahead)
        .unwrap()
}

fn sim() -> Arc<SimulatedSource> {
    Arc::new(SimulatedSource::default())
}

fn pattern(len: usize) -> Vec<u8> {
    (0..len).map(|i| (i * 31 % 251) as u8).collect()
}

fn event(address: usize, kind: FaultKind) -> FaultEvent {
    FaultEvent { address, kind, seq: 0 }
}

#[test]
fn start_and_shutdown_empty() {
    let e = Engine::start(config(8, 2, 0), sim()).unwrap();
    e.shutdown().unwrap();
    e.shutdown().unwrap();
    assert_eq!(e.stats().faults_served, 0);
}

#[test]
fn second_engine_on_same_source_is_rejected() {
    let s = sim();
    let _a = Engine::start(config(8, 1, 0), s.clone()).unwrap();
    assert!(matches!(
        Engine::start(config(8, 1, 0), s),
        Err(EngineError::Source(FaultError::AlreadyAttached))
    ));
}

#[test]
fn read_byte_zero_of_mapped_store() {
    let bytes = pattern(1 << 20);
    let e = Engine::start(config(64, 2, 0), sim()).unwrap();
    let base = e
        .umap(1 << 20, MapMode::ReadOnly, Arc::new(MemoryStore::new(bytes.clone())), Some(PAGE))
        .unwrap();
    let mem = e.memory(base).unwrap();
    let mut b = [0u8; 1];
    mem.read(0, &mut b);
    assert_eq!(b[0], bytes[0]);
    assert_eq!(e.status(base).unwrap().faults_served, 1);
}

#[test]
fn default_page_size_comes_from_config() {
    let cfg = config(64, 1, 0).set_page_size(4 * PAGE).unwrap();
    let e = Engine::start(cfg, sim()).unwrap();
    let base = e
        .umap(1 << 16, MapMode::ReadOnly, Arc::new(MemoryStore::zeroed(1 << 16)), None)
        .unwrap();
    assert_eq!(e.inner.region(base).unwrap().page_size, 4 * PAGE);
}

#[test]
fn zero_tail_past_store_end() {
    let e = Engine::start(config(8, 1, 0), sim()).unwrap();
    let base = e
        .umap(10 * 1024, MapMode::ReadOnly, Arc::new(MemoryStore::new(vec![0xAB; 8192])), Some(PAGE))
        .unwrap();
    let mem = e.memory(base).unwrap();
    let mut b = [0xFFu8; 1];
    mem.read(9000, &mut b);
    assert_eq!(b[0], 0);
    mem.read(8191, &mut b);
    assert_eq!(b[0], 0xAB);
}

#[test]
fn map_argument_errors() {
    let e = Engine::start(config(8, 1, 0), sim()).unwrap();
    let store: Store = Arc::new(MemoryStore::zeroed(PAGE));
    assert!(matches!(
        e.umap(PAGE, MapMode::ReadOnly, store.clone(), Some(1000)),
        Err(EngineError::InvalidPageSize { .. })
    ));
    assert!(matches!(
        e.umap(PAGE, MapMode::ReadOnly, store.clone(), Some(16 * PAGE)),
        Err(EngineError::InvalidPageSize { .. })
    ));
    assert!(matches!(
        e.umap(0, MapMode::ReadOnly, store, Some(PAGE)),
        Err(EngineError::InvalidLength)
    ));
    let ro: Store = Arc::new(MemoryStore::read_only(vec![0; PAGE]));
    assert!(matches!(
        e.umap(PAGE, MapMode::ReadWrite, ro, Some(PAGE)),
        Err(EngineError::StoreNotWritable)
    ));
}

#[test]
fn write_then_uunmap_persists() {
    let store = Arc::new(MemoryStore::zeroed(16 * PAGE));
    let e = Engine::start(config(8, 2, 0), sim()).unwrap();
    let base = e.umap(16 * PAGE, MapMode::ReadWrite, store.clone(), Some(PAGE)).unwrap();
    e.memory(base).unwrap().write(5 * PAGE + 7, &[42]);
    e.uunmap(base).unwrap();
    assert_eq!(store.snapshot()[5 * PAGE + 7], 42);
    assert!(matches!(e.uunmap(base), Err(EngineError::UnknownRegion(_))));
}

#[test]
fn read_only_uunmap_writes_nothing() {
    let e = Engine::start(config(8, 2, 0), sim()).unwrap();
    let base = e
        .umap(4 * PAGE, MapMode::ReadOnly, Arc::new(MemoryStore::zeroed(4 * PAGE)), Some(PAGE))
        .unwrap();
    let mut b = [0u8; 1];
    e.memory(base).unwrap().read(0, &mut b);
    e.uunmap(base).unwrap();
    assert_eq!(e.stats().write_backs, 0);
    assert_eq!(e.stats().resident_bytes, 0);
}

fn manual(buffer_pages: usize, read_ahead: usize) -> (Engine, usize, Arc<MemoryStore>) {
    let e = Engine::start_manual(config(buffer_pages, 1, read_ahead), sim()).unwrap();
    let store = Arc::new(MemoryStore::new(pattern(32 * PAGE)));
    let base = e.umap(8 * PAGE, MapMode::ReadWrite, store.clone(), Some(PAGE)).unwrap();
    (e, base, store)
}

#[test]
fn read_fault_without_read_ahead_enqueues_one_fill() {
    let (e, base, _) = manual(16, 0);
    let h = e.handle_event(event(base + 3 * PAGE + 5, FaultKind::Read)).unwrap();
    assert_eq!(h.fills, vec![3]);
    assert_eq!(e.pending_fills(), 1);
    let dup = e.handle_event(event(base + 3 * PAGE, FaultKind::Read)).unwrap();
    assert!(dup.fills.is_empty() && dup.deferred);
}

#[test]
fn read_ahead_is_clamped_to_region() {
    let (e, base, _) = manual(16, 8);
    let h = e.handle_event(event(base + 5 * PAGE, FaultKind::Read)).unwrap();
    assert_eq!(h.fills, vec![5, 6, 7]);
}

#[test]
fn write_protect_fault_marks_dirty_without_fill() {
    let (e, base, _) = manual(16, 0);
    e.handle_event(event(base, FaultKind::Read)).unwrap();
    assert!(e.filler_step());
    let key = PageKey::new(1, 0);
    assert_eq!(e.ledger().state_of(key), PageState::PresentClean);
    let h = e.handle_event(event(base, FaultKind::WriteProtect)).unwrap();
    assert!(h.marked_dirty && h.fills.is_empty());
    assert_eq!(e.ledger().state_of(key), PageState::PresentDirty);
    assert_eq!(e.pending_fills(), 0);
}

#[test]
fn filler_step_on_empty_queue() {
    let (e, _, _) = manual(16, 0);
    assert!(!e.filler_step());
}

#[test]
fn evictors_run_from_high_to_low() {
    // 10-page buffer, 90/70 watermarks.
    let (e, base, _) = manual(10, 0);
    let store = Arc::new(MemoryStore::zeroed(16 * PAGE));
    let base2 = e.umap(16 * PAGE, MapMode::ReadOnly, store, Some(PAGE)).unwrap();
    let _ = base;
    for i in 0..8 {
        e.handle_event(event(base2 + i * PAGE, FaultKind::Read)).unwrap();
        assert!(e.filler_step());
        while e.evictor_step() > 0 {}
    }
    assert_eq!(e.occupancy().resident_bytes, 8 * PAGE);
    assert_eq!(e.evictor_step(), 0, "below high watermark");
    e.handle_event(event(base2 + 8 * PAGE, FaultKind::Read)).unwrap();
    e.filler_step();
    let mut evicted = 0;
    loop {
        let n = e.evictor_step();
        if n == 0 {
            break;
        }
        evicted += n;
    }
    assert_eq!(evicted, 2 * PAGE);
    assert_eq!(e.occupancy().resident_bytes, 7 * PAGE);
    assert_eq!(e.stats().write_backs, 0, "clean pages are only discarded");
}

#[test]
fn prefetch_then_access_is_fault_free() {
    let e = Engine::start(config(32, 2, 0), sim()).unwrap();
    let base = e
        .umap(32 * PAGE, MapMode::ReadOnly, Arc::new(MemoryStore::new(pattern(32 * PAGE))), Some(PAGE))
        .unwrap();
    e.prefetch(&[base + 5 * PAGE, base + 15 * PAGE]).unwrap();
    e.wait_idle();
    let mem = e.memory(base).unwrap();
    let mut b = [0u8; 8];
    mem.read(5 * PAGE, &mut b);
    mem.read(15 * PAGE + 100, &mut b);
    let st = e.status(base).unwrap();
    assert_eq!((st.faults_served, st.fault_events, st.fills), (0, 0, 2));
    e.prefetch(&[base + 5 * PAGE]).unwrap();
    assert_eq!(e.pending_fills(), 0);
    assert!(matches!(e.prefetch(&[base + 1]), Err(EngineError::MisalignedAddress(_))));
    assert!(matches!(e.prefetch(&[0x10]), Err(EngineError::UnknownRegion(_))));
}

#[test]
fn prefetch_beyond_capacity_evicts() {
    let (e, base, _) = manual(4, 0);
    let pages: Vec<usize> = (0..8).map(|i| base + i * PAGE).collect();
    e.prefetch(&pages).unwrap();
    e.wait_idle();
    assert!(e.occupancy().resident_bytes <= 4 * PAGE);
    assert!(e.stats().evictions >= 4);
    assert_eq!(e.stats().fills, 8);
}

#[test]
fn flush_then_abandon_keeps_data() {
    let store = Arc::new(MemoryStore::zeroed(8 * PAGE));
    let e = Engine::start(config(8, 2, 0), sim()).unwrap();
    let base = e.umap(8 * PAGE, MapMode::ReadWrite, store.clone(), Some(PAGE)).unwrap();
    let mem = e.memory(base).unwrap();
    for p in [1, 3, 6] {
        mem.write(p * PAGE + 11, &[p as u8; 4]);
    }
    e.flush(base).unwrap();
    assert_eq!(e.status(base).unwrap().write_backs, 3);
    assert!(e.ledger().region_pages(1).iter().all(|d| !d.dirty));
    e.flush(base).unwrap();
    assert_eq!(e.status(base).unwrap().write_backs, 3, "nothing dirty");
    e.abandon();
    let snap = store.snapshot();
    for p in [1, 3, 6] {
        assert_eq!(&snap[p * PAGE + 11..p * PAGE + 15], &[p as u8; 4]);
    }
}

#[test]
fn flush_read_only_region() {
    let e = Engine::start(config(8, 1, 0), sim()).unwrap();
    let base = e
        .umap(PAGE, MapMode::ReadOnly, Arc::new(MemoryStore::zeroed(PAGE)), Some(PAGE))
        .unwrap();
    e.flush(base).unwrap();
    assert_eq!(e.stats().write_backs, 0);
}

#[test]
fn status_counters_follow_read_ahead() {
    for (ra, expect_all) in [(0, true), (4, false)] {
        let e = Engine::start(config(16, 2, ra), sim()).unwrap();
        let base = e
            .umap(8 * PAGE, MapMode::ReadOnly, Arc::new(MemoryStore::zeroed(8 * PAGE)), Some(PAGE))
            .unwrap();
        let fresh = e.status(base).unwrap();
        assert_eq!((fresh.faults_served, fresh.fills, fresh.evictions, fresh.resident_bytes), (0, 0, 0, 0));
        let mem = e.memory(base).unwrap();
        let mut b = [0u8; 1];
        for p in 0..8 {
            mem.read(p * PAGE, &mut b);
        }
        let st = e.status(base).unwrap();
        if expect_all {
            assert_eq!(st.faults_served, 8);
        } else {
            assert!(st.faults_served < 8);
        }
        e.wait_idle();
        assert_eq!(e.status(base).unwrap().fills, 8);
    }
}

#[test]
fn shutdown_persists_dirty_pages() {
    let store = Arc::new(MemoryStore::zeroed(4 * PAGE));
    let e = Engine::start(config(8, 2, 0), sim()).unwrap();
    let base = e.umap(4 * PAGE, MapMode::ReadWrite, store.clone(), Some(PAGE)).unwrap();
    e.memory(base).unwrap().write_u64(3 * PAGE, 0xDEAD_BEEF);
    e.shutdown().unwrap();
    assert_eq!(&store.snapshot()[3 * PAGE..3 * PAGE + 4], &0xDEAD_BEEFu32.to_le_bytes());
    drop(e);
}

#[test]
fn failed_demand_fill_poisons_page() {
    let store: Store = Arc::new(CallbackStore::read_only(
        4 * PAGE as u64,
        Box::new(|off, buf| {
            if off >= 2 * PAGE as u64 {
                Err(io::Error::other("bad sector"))
            } else {
                buf.fill(1);
                Ok(buf.len())
            }
        }),
    ));
    let e = Engine::start(config(8, 1, 0), sim()).unwrap();
    let base = e.umap(4 * PAGE, MapMode::ReadOnly, store, Some(PAGE)).unwrap();
    let mem = e.memory(base).unwrap();
    let mut b = [0u8; 2];
    mem.read(0, &mut b);
    assert_eq!(b, [1, 1]);
    mem.read(2 * PAGE, &mut b);
    assert_eq!(b, [POISON_BYTE; 2]);
    assert!(matches!(e.status(base).unwrap().status, RegionStatus::Failed(_)));
    assert!(matches!(e.flush(base), Err(EngineError::RegionFailed { .. })));
    assert!(matches!(e.prefetch(&[base]), Err(EngineError::RegionFailed { .. })));
}

#[test]
fn write_back_failure_retries_then_keeps_page() {
    let attempts = Arc::new(AtomicUsize::new(0));
    let a = attempts.clone();
    let store: Store = Arc::new(CallbackStore::new(
        PAGE as u64,
        Box::new(|_, buf| {
            buf.fill(0);
            Ok(buf.len())
        }),
        Box::new(move |_, _| {
            a.fetch_add(1, Ordering::SeqCst);
            Err(io::Error::other("device gone"))
        }),
    ));
    let e = Engine::start(config(8, 1, 0), sim()).unwrap();
    let base = e.umap(PAGE, MapMode::ReadWrite, store, Some(PAGE)).unwrap();
    let mem = e.memory(base).unwrap();
    mem.write(0, &[9]);
    assert!(matches!(e.flush(base), Err(EngineError::IoFailure { .. })));
    assert_eq!(attempts.load(Ordering::SeqCst), 1 + WRITE_RETRIES);
    assert_eq!(e.ledger().state_of(PageKey::new(1, 0)), PageState::PresentDirty);
    let mut b = [0u8; 1];
    mem.read(0, &mut b);
    assert_eq!(b[0], 9, "data preserved in memory");
    assert!(e.uunmap(base).is_err());
    e.abandon();
}

#[test]
fn pessimistic_mode_without_write_protect() {
    let store = Arc::new(MemoryStore::zeroed(8 * PAGE));
    let e = Engine::start(config(4, 2, 0), Arc::new(SimulatedSource::without_write_protect())).unwrap();
    let base = e.umap(8 * PAGE, MapMode::ReadWrite, store.clone(), Some(PAGE)).unwrap();
    let mem = e.memory(base).unwrap();
    for p in 0..8 {
        mem.write_u64(p * PAGE, p as u64 + 1);
    }
    e.flush(base).unwrap();
    for p in 0..8 {
        assert_eq!(mem.read_u64(p * PAGE), p as u64 + 1);
    }
    e.uunmap(base).unwrap();
    let snap = store.snapshot();
    for p in 0..8 {
        assert_eq!(snap[p * PAGE], p as u8 + 1);
    }
}

#[test]
fn partial_tail_page_writes_prefix_only() {
    let store = Arc::new(MemoryStore::zeroed(PAGE + 100));
    let e = Engine::start(config(8, 1, 0), sim()).unwrap();
    let base = e.umap(PAGE + 100, MapMode::ReadWrite, store.clone(), Some(PAGE)).unwrap();
    e.memory(base).unwrap().write(PAGE + 99, &[7]);
    e.uunmap(base).unwrap();
    assert_eq!(store.snapshot()[PAGE + 99], 7);
}

#[test]
fn write_past_store_end_fails_region() {
    let store = Arc::new(MemoryStore::zeroed(PAGE + 100));
    let e = Engine::start(config(8, 1, 0), sim()).unwrap();
    let base = e.umap(2 * PAGE, MapMode::ReadWrite, store.clone(), Some(PAGE)).unwrap();
    e.memory(base).unwrap().write(PAGE + 200, &[7]);
    assert!(e.flush(base).is_err());
    assert!(matches!(e.status(base).unwrap().status, RegionStatus::Failed(_)));
}

#[test]
fn many_threads_share_few_pages() {
    let store = Arc::new(MemoryStore::zeroed(64 * PAGE));
    let e = Arc::new(Engine::start(config(8, 4, 1), sim()).unwrap());
    let base = e.umap(64 * PAGE, MapMode::ReadWrite, store.clone(), Some(PAGE)).unwrap();
    let mem = e.memory(base).unwrap();
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let mem = Arc::clone(&mem);
            thread::spawn(move || {
                for i in 0..64 {
                    let slot = (i * 8 + t) * 8;
                    mem.write_u64(slot * 8 % (64 * PAGE), (t * 1000 + i) as u64);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    e.uunmap(base).unwrap();
    let snap = store.snapshot();
    for t in 0..8 {
        for i in 0..64 {
            let slot = (i * 8 + t) * 8;
            let off = slot * 8 % (64 * PAGE);
            let v = u64::from_le_bytes(snap[off..off + 8].try_into().unwrap());
            assert_eq!(v, (t * 1000 + i) as u64);
        }
    }
    e.ledger().check_invariants().unwrap();
}
