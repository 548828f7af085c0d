//! R-MAT edge generator with the Graph500 quadrant probabilities.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::csr::CsrGraph;
use super::{BenchError, Result};

pub const A: f64 = 0.57;
pub const B: f64 = 0.19;
pub const C: f64 = 0.19;
pub const D: f64 = 0.05;

/// `edge_factor << scale` raw edges over `1 << scale` vertices, before
/// self-loop removal and deduplication.
pub fn edges(scale: u32, edge_factor: u64, seed: u64) -> Result<Vec<(u64, u64)>> {
    if !(1..=40).contains(&scale) {
        return Err(BenchError::InvalidInput(format!("scale {scale} outside 1..=40")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = edge_factor << scale;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (mut u, mut v) = (0u64, 0u64);
        for _ in 0..scale {
            let r: f64 = rng.gen();
            let (du, dv) = if r < A {
                (0, 0)
            } else if r < A + B {
                (0, 1)
            } else if r < A + B + C {
                (1, 0)
            } else {
                (1, 1)
            };
            u = (u << 1) | du;
            v = (v << 1) | dv;
        }
        out.push((u, v));
    }
    Ok(out)
}

pub fn graph(scale: u32, edge_factor: u64, seed: u64) -> Result<CsrGraph> {
    CsrGraph::undirected(1 << scale, &edges(scale, edge_factor, seed)?)
}

/// Generates a graph and writes it to `path` in CSR layout.
pub fn gen_rmat_csr(path: &Path, scale: u32, edge_factor: u64, seed: u64) -> Result<CsrGraph> {
    let g = graph(scale, edge_factor, seed)?;
    g.write_to(path)?;
    Ok(g)
}
