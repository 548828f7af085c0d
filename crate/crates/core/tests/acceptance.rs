//! Acceptance criteria, one PASS/FAIL/SKIP line each. Exits nonzero when any
//! criterion fails.

mod common;

use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upager::bench::churn::{run_churn_with, scan_file, ChurnParams, Finish};
use upager::bench::{bfs, rmat, sort, RunSettings, SourceChoice};
use upager::config::RuntimeConfig;
use upager::engine::{Engine, EngineOptions, MapMode};
use upager::fault_source::{FaultSource, KernelSource, SimulatedSource};
use upager::store::{CallbackStore, MemoryStore};

type Outcome = Result<String, String>;

const KIB: usize = 1024;
const MIB: usize = 1024 * KIB;

fn config(buffer: usize, page: usize, fillers: usize, evictors: usize) -> RuntimeConfig {
    RuntimeConfig::defaults(2, 1 << 30)
        .unwrap()
        .set_buffer_capacity(buffer)
        .unwrap()
        .set_page_size(page)
        .unwrap()
        .set_fillers(fillers)
        .unwrap()
        .set_evictors(evictors)
        .unwrap()
}

fn ledger_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10_000u64 {
        common::ledger_model::run_sequence(seed, rng.gen_range(1..=300))?;
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("10000 sequences took {secs:.1} s"));
    }
    Ok(format!("10000 sequences, 0 divergences, {secs:.1} s"))
}

fn trace_consistency() -> Outcome {
    let start = Instant::now();
    let mut page_sizes = std::collections::BTreeSet::new();
    for seed in 0..1000u64 {
        let shape = common::traces::run_trace(seed)?;
        page_sizes.insert(shape.page_size);
    }
    Ok(format!(
        "1000 traces equal the direct-apply oracle; {} page sizes; {:.1} s",
        page_sizes.len(),
        start.elapsed().as_secs_f64()
    ))
}

struct SortRuns {
    faults: Vec<u64>,
    timing: String,
    counters: String,
}

/// Sorts 256 MiB through a 64 MiB buffer at three page sizes, in increasing
/// page-size order.
fn sort_runs(source: SourceChoice) -> Result<SortRuns, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("words");
    let start = Instant::now();
    let mut faults = Vec::new();
    let (mut timing, mut counters) = (Vec::new(), Vec::new());
    for page in [4 * KIB, 64 * KIB, MIB] {
        sort::gen_sort_data(&path, 256 * MIB as u64).map_err(|e| e.to_string())?;
        let settings = RunSettings::new(config(64 * MIB, page, 2, 2)).threads(4).source(source);
        let r = sort::run_sort(&path, &settings).map_err(|e| e.to_string())?;
        if !r.verified {
            return Err(format!("page {page}: {}", r.detail.unwrap_or_default()));
        }
        faults.push(r.faults_served);
        timing.push(format!("{}K {:.1} s", page / KIB, r.wall_time));
        counters.push(format!(
            "{}K faults_served={} bytes_transferred={}",
            page / KIB,
            r.faults_served,
            r.bytes_transferred
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 300.0 {
        return Err(format!("took {secs:.1} s"));
    }
    Ok(SortRuns {
        faults,
        timing: format!("verified at {}; total {secs:.1} s", timing.join(", ")),
        counters: counters.join(", "),
    })
}

fn page_size_trend(runs: &SortRuns) -> Outcome {
    if runs.faults.windows(2).all(|w| w[0] > w[1]) {
        Ok(runs.counters.clone())
    } else {
        Err(format!("faults not strictly decreasing: {}", runs.counters))
    }
}

fn bfs_correctness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut runs = 0;
    for _ in 0..5 {
        let seed = rng.gen();
        let path = dir.path().join(format!("g{seed}"));
        let g = rmat::gen_rmat_csr(&path, 14, 16, seed).map_err(|e| e.to_string())?;
        let buffer = (g.file_size() / 4) / 4096 * 4096;
        let settings = RunSettings::new(config(buffer, 4096, 2, 2)).threads(4);
        let connected: Vec<u64> = (0..g.num_vertices).filter(|&v| !g.neighbors(v).is_empty()).collect();
        for &source in connected.choose_multiple(&mut rng, 5) {
            let (r, levels) = bfs::run_bfs_levels(&path, source, &settings).map_err(|e| e.to_string())?;
            if levels != bfs::oracle_levels(&g, source) || !r.verified {
                return Err(format!("seed {seed} source {source} diverges from the oracle"));
            }
            if r.evictions == 0 {
                return Err(format!("seed {seed}: the run never evicted"));
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} runs identical to the in-memory oracle"))
}

fn watermark_discipline() -> Outcome {
    const PAGE: usize = 4096;
    // Manual mode: nothing is evicted below the high watermark.
    let e = Engine::start_manual(config(10 * PAGE, PAGE, 1, 1), Arc::new(SimulatedSource::default()))
        .map_err(|e| e.to_string())?;
    let base = e
        .umap(30 * PAGE, MapMode::ReadOnly, Arc::new(MemoryStore::zeroed(30 * PAGE)), None)
        .map_err(|e| e.to_string())?;
    let pages: Vec<usize> = (0..8).map(|i| base + i * PAGE).collect();
    e.prefetch(&pages).map_err(|e| e.to_string())?;
    e.wait_idle();
    if e.evictor_step() != 0 || !e.eviction_trace().is_empty() {
        return Err("evicted at 8 of 10 pages".into());
    }
    e.prefetch(&[base + 8 * PAGE]).map_err(|e| e.to_string())?;
    e.wait_idle();
    let resident = e.occupancy().resident_bytes;
    if resident != 7 * PAGE {
        return Err(format!("9 of 10 pages left {resident} bytes resident, expected 7 pages"));
    }
    e.shutdown().map_err(|e| e.to_string())?;

    // Threaded: cycle through a region three times the buffer size.
    let e = Engine::start(config(10 * PAGE, PAGE, 2, 2), Arc::new(SimulatedSource::default()))
        .map_err(|e| e.to_string())?;
    let base = e
        .umap(30 * PAGE, MapMode::ReadWrite, Arc::new(MemoryStore::zeroed(30 * PAGE)), None)
        .map_err(|e| e.to_string())?;
    let mem = e.memory(base).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for round in 0..20 {
        for p in 0..30 {
            let page = if round % 2 == 0 { p } else { rng.gen_range(0..30) };
            if rng.gen_bool(0.3) {
                mem.write(page * PAGE + 8, &[round as u8]);
            } else {
                mem.read_u64(page * PAGE);
            }
            let occ = e.occupancy();
            if occ.resident_bytes > 10 * PAGE {
                return Err(format!("resident {} above capacity", occ.resident_bytes));
            }
        }
    }
    let trace = e.eviction_trace();
    e.shutdown().map_err(|e| e.to_string())?;
    for (i, r) in trace.iter().enumerate() {
        if r.effective_bytes < r.high_bytes {
            return Err(format!("crossing {i} activated at {} below high {}", r.effective_bytes, r.high_bytes));
        }
        let left = r.effective_bytes - r.selected_bytes;
        if left > r.low_bytes || left + r.largest_victim <= r.low_bytes {
            return Err(format!("crossing {i} stopped at {left}, low is {}", r.low_bytes));
        }
    }
    if trace.len() < 20 {
        return Err(format!("only {} crossings", trace.len()));
    }
    Ok(format!("{} crossings, each started at/above high and stopped within one page of low", trace.len()))
}

fn prefetch_efficacy(source: Arc<dyn FaultSource>) -> Outcome {
    const PAGE: usize = 4096;
    let bytes: Vec<u8> = (0..256 * PAGE).map(|i| (i / PAGE) as u8).collect();
    let e = Engine::start(config(64 * PAGE, PAGE, 2, 2), source).map_err(|e| e.to_string())?;
    let base = e
        .umap(256 * PAGE, MapMode::ReadOnly, Arc::new(MemoryStore::new(bytes)), None)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pages: Vec<usize> = (0..128).map(|i| 2 * i).collect();
    pages.shuffle(&mut rng);
    pages.truncate(16);
    let addrs: Vec<usize> = pages.iter().map(|p| base + p * PAGE).collect();
    e.prefetch(&addrs).map_err(|e| e.to_string())?;
    if !e.wait_idle_timeout(Duration::from_secs(30)) {
        return Err("prefetch never quiesced".into());
    }
    let mem = e.memory(base).map_err(|e| e.to_string())?;
    for &p in &pages {
        let mut b = [0u8; 1];
        mem.read(p * PAGE + 5, &mut b);
        if b[0] != p as u8 {
            return Err(format!("page {p} holds {}", b[0]));
        }
    }
    let st = e.status(base).map_err(|e| e.to_string())?;
    e.shutdown().map_err(|e| e.to_string())?;
    if st.faults_served != 0 || st.fault_events != 0 {
        return Err(format!("{} demand faults, {} fault events", st.faults_served, st.fault_events));
    }
    Ok(format!("16 scattered pages prefetched, {} fills, 0 demand faults", st.fills))
}

fn durability() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut valid = 0;
    for run in 0..20u64 {
        let path = dir.path().join(format!("records{run}"));
        let params = ChurnParams {
            num_ops: 20_000,
            key_space: 16_384,
            read_fraction: 0.5,
            seed: run,
        };
        let settings = RunSettings::new(config(256 * KIB, 4096, 2, 2)).threads(4);
        let r = run_churn_with(&path, &params, &settings, Finish::FlushThenAbandon).map_err(|e| e.to_string())?;
        let scan = scan_file(&path, params.key_space).map_err(|e| e.to_string())?;
        if !r.verified || scan.corrupt > 0 {
            return Err(format!("run {run}: {} corrupt records", scan.corrupt));
        }
        valid += scan.valid;
    }
    Ok(format!("20 runs, 0 torn or invalid records, {valid} valid records on disk"))
}

fn load_balancing() -> Outcome {
    const PAGE: usize = 4096;
    const N: usize = 1000;
    let reads: Arc<Vec<AtomicU32>> = Arc::new((0..N).map(|_| AtomicU32::new(0)).collect());
    let counter = reads.clone();
    let store = CallbackStore::read_only(
        (N * PAGE) as u64,
        Box::new(move |offset, buf| {
            counter[offset as usize / PAGE].fetch_add(1, Ordering::Relaxed);
            buf.fill(1);
            Ok(buf.len())
        }),
    );
    let gate = Arc::new((Mutex::new(true), Condvar::new()));
    let stalled = Arc::new(AtomicBool::new(false));
    let (g, s) = (gate.clone(), stalled.clone());
    let options = EngineOptions {
        filler_gate: Some(Arc::new(move |worker| {
            if worker == 0 {
                s.store(true, Ordering::Release);
                let mut closed = g.0.lock();
                while *closed {
                    g.1.wait(&mut closed);
                }
            }
        })),
        ..EngineOptions::default()
    };
    let e = Engine::start_with(config(2 * N * PAGE, PAGE, 4, 1), Arc::new(SimulatedSource::default()), options)
        .map_err(|e| e.to_string())?;
    let base = e
        .umap(N * PAGE, MapMode::ReadOnly, Arc::new(store), None)
        .map_err(|e| e.to_string())?;
    let addrs: Vec<usize> = (0..N).map(|i| base + i * PAGE).collect();
    e.prefetch(&addrs).map_err(|e| e.to_string())?;
    let done = e.wait_idle_timeout(Duration::from_secs(60));
    let was_stalled = stalled.load(Ordering::Acquire);
    *gate.0.lock() = false;
    gate.1.notify_all();
    let fills = e.stats().fills;
    e.shutdown().map_err(|e| e.to_string())?;
    if !was_stalled {
        return Err("filler 0 was never stalled".into());
    }
    if !done {
        return Err("fills did not complete with one filler stalled".into());
    }
    let counts: Vec<u32> = reads.iter().map(|c| c.load(Ordering::Relaxed)).collect();
    if let Some(p) = counts.iter().position(|&c| c != 1) {
        return Err(format!("page {p} filled {} times", counts[p]));
    }
    Ok(format!("{N} fills, each executed once ({fills} counted) with filler 0 stalled"))
}

fn kernel_smoke() -> Option<Outcome> {
    if let Err(e) = KernelSource::open() {
        println!("criterion 10 kernel backend: SKIP ({e})");
        return None;
    }
    let sort = sort_runs(SourceChoice::Kernel).and_then(|runs| Ok(format!("{}; {}", runs.timing, page_size_trend(&runs)?)));
    let source: Arc<dyn FaultSource> = match KernelSource::open() {
        Ok(k) => Arc::new(k),
        Err(e) => return Some(Err(e.to_string())),
    };
    let prefetch = prefetch_efficacy(source);
    Some(match (sort, prefetch) {
        (Ok(a), Ok(b)) => Ok(format!("sort: {a}; prefetch: {b}")),
        (Err(e), _) => Err(format!("sort: {e}")),
        (_, Err(e)) => Err(format!("prefetch: {e}")),
    })
}

fn report(n: u32, name: &str, outcome: Outcome, failed: &mut u32) {
    match outcome {
        Ok(detail) => println!("criterion {n} {name}: PASS ({detail})"),
        Err(why) => {
            *failed += 1;
            println!("criterion {n} {name}: FAIL ({why})");
        }
    }
}

fn main() {
    let mut failed = 0;
    report(1, "ledger oracle equivalence", ledger_oracle(), &mut failed);
    report(2, "end-to-end trace consistency", trace_consistency(), &mut failed);
    match sort_runs(SourceChoice::Simulated) {
        Ok(runs) => {
            report(3, "out-of-core sort", Ok(runs.timing.clone()), &mut failed);
            report(4, "page-size trend", page_size_trend(&runs), &mut failed);
        }
        Err(e) => {
            report(3, "out-of-core sort", Err(e), &mut failed);
            report(4, "page-size trend", Err("no sort results".into()), &mut failed);
        }
    }
    report(5, "BFS correctness", bfs_correctness(), &mut failed);
    report(6, "watermark discipline", watermark_discipline(), &mut failed);
    report(7, "prefetch efficacy", prefetch_efficacy(Arc::new(SimulatedSource::default())), &mut failed);
    report(8, "durability", durability(), &mut failed);
    report(9, "load-balancing liveness", load_balancing(), &mut failed);
    if let Some(outcome) = kernel_smoke() {
        report(10, "kernel backend", outcome, &mut failed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
