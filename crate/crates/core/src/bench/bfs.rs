//! Level-synchronous breadth-first search over a mapped CSR file.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;

use crate::fault_source::MappedMemory;

use super::csr::{self, CsrGraph, HEADER_BYTES};
use super::{BenchError, BenchReport, Result, RunSettings, Session};

/// Level of a vertex the search never reached.
pub const UNREACHED: u64 = u64::MAX;

/// Computes BFS levels from `source` reading the graph through `mem`, which
/// holds a whole CSR file. Frontiers are expanded on the current rayon pool.
pub fn bfs_levels(mem: &dyn MappedMemory, source: u64) -> Result<Vec<u64>> {
    let mut header = [0u8; HEADER_BYTES];
    mem.read(0, &mut header);
    let (num_vertices, num_edges) = csr::parse_header(&header)?;
    if csr::columns_at(num_vertices) + 8 * num_edges as usize > mem.len() {
        return Err(BenchError::InvalidInput("CSR arrays extend past the mapping".into()));
    }
    if source >= num_vertices {
        return Err(BenchError::InvalidInput(format!(
            "source {source} outside {num_vertices} vertices"
        )));
    }
    let rows = csr::row_offsets_at();
    let cols = csr::columns_at(num_vertices);
    let levels: Vec<AtomicU64> = (0..num_vertices).map(|_| AtomicU64::new(UNREACHED)).collect();
    levels[source as usize].store(0, Ordering::Relaxed);
    let mut frontier = vec![source];
    let mut depth = 0;
    while !frontier.is_empty() {
        depth += 1;
        frontier = frontier
            .par_chunks(64)
            .flat_map_iter(|chunk| {
                let mut next = Vec::new();
                let mut span = [0u64; 2];
                let mut adj = Vec::new();
                for &v in chunk {
                    mem.read_u64s(rows + 8 * v as usize, &mut span);
                    adj.resize((span[1] - span[0]) as usize, 0);
                    mem.read_u64s(cols + 8 * span[0] as usize, &mut adj);
                    for &u in &adj {
                        let slot = &levels[u as usize];
                        if slot.load(Ordering::Relaxed) == UNREACHED
                            && slot
                                .compare_exchange(UNREACHED, depth, Ordering::Relaxed, Ordering::Relaxed)
                                .is_ok()
                        {
                            next.push(u);
                        }
                    }
                }
                next
            })
            .collect();
    }
    Ok(levels.into_iter().map(AtomicU64::into_inner).collect())
}

/// Single-threaded queue-based BFS over an in-memory graph.
pub fn oracle_levels(g: &CsrGraph, source: u64) -> Vec<u64> {
    let mut levels = vec![UNREACHED; g.num_vertices as usize];
    levels[source as usize] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        for &u in g.neighbors(v) {
            if levels[u as usize] == UNREACHED {
                levels[u as usize] = levels[v as usize] + 1;
                queue.push_back(u);
            }
        }
    }
    levels
}

/// Runs BFS through the configured backend and compares every level with
/// the oracle run on the file read directly. Returns the levels as well.
pub fn run_bfs_levels(path: &Path, source: u64, settings: &RunSettings) -> Result<(BenchReport, Vec<u64>)> {
    let pool = settings.pool();
    let start = Instant::now();
    let session = Session::open(settings, path, false)?;
    let (source_name, cold) = (session.source_name, session.cache_dropped);
    let levels = pool.install(|| bfs_levels(&*session.memory, source));
    let counts = session.finish()?;
    let levels = levels?;
    let wall_time = start.elapsed().as_secs_f64();
    let mut report = BenchReport::new("bfs", settings, source_name, counts);
    report.wall_time = wall_time;
    report.mark_cache(cold);
    let g = CsrGraph::read_from(path)?;
    let expect = oracle_levels(&g, source);
    report.set_verdict(match levels.iter().zip(&expect).position(|(a, b)| a != b) {
        None if levels.len() == expect.len() => Ok(()),
        None => Err(format!("{} levels for {} vertices", levels.len(), expect.len())),
        Some(v) => Err(format!("vertex {v} at level {}, expected {}", levels[v], expect[v])),
    });
    Ok((report, levels))
}

pub fn run_bfs(path: &Path, source: u64, settings: &RunSettings) -> Result<BenchReport> {
    run_bfs_levels(path, source, settings).map(|(r, _)| r)
}
