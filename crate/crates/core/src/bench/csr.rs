//! Compressed sparse row graphs and their on-disk layout.
//!
//! A file is the 8-byte magic `UPCSR1\0\0`, then `num_vertices` and
//! `num_edges`, then `num_vertices + 1` row offsets, then `num_edges`
//! column indices. Every number is a little-endian `u64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BenchError, Result};

pub const MAGIC: [u8; 8] = *b"UPCSR1\0\0";
pub const HEADER_BYTES: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsrGraph {
    pub num_vertices: u64,
    pub num_edges: u64,
    pub row_offsets: Vec<u64>,
    pub column_indices: Vec<u64>,
}

/// Byte offset of `row_offsets[0]` in a file.
pub fn row_offsets_at() -> usize {
    HEADER_BYTES
}

/// Byte offset of `column_indices[0]` in a file of `num_vertices` vertices.
pub fn columns_at(num_vertices: u64) -> usize {
    HEADER_BYTES + 8 * (num_vertices as usize + 1)
}

impl CsrGraph {
    /// Builds an undirected graph: self-loops are dropped, duplicates
    /// merged, and each remaining edge stored in both directions.
    pub fn undirected(num_vertices: u64, edges: &[(u64, u64)]) -> Result<Self> {
        let mut directed = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            if u >= num_vertices || v >= num_vertices {
                return Err(BenchError::InvalidInput(format!(
                    "edge ({u}, {v}) outside {num_vertices} vertices"
                )));
            }
            if u != v {
                directed.push((u, v));
                directed.push((v, u));
            }
        }
        directed.sort_unstable();
        directed.dedup();
        let mut row_offsets = vec![0u64; num_vertices as usize + 1];
        for &(u, _) in &directed {
            row_offsets[u as usize + 1] += 1;
        }
        for i in 1..row_offsets.len() {
            row_offsets[i] += row_offsets[i - 1];
        }
        Ok(CsrGraph {
            num_vertices,
            num_edges: directed.len() as u64,
            row_offsets,
            column_indices: directed.into_iter().map(|(_, v)| v).collect(),
        })
    }

    pub fn neighbors(&self, v: u64) -> &[u64] {
        let (a, b) = (self.row_offsets[v as usize], self.row_offsets[v as usize + 1]);
        &self.column_indices[a as usize..b as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::InvalidInput(m));
        if self.row_offsets.len() as u64 != self.num_vertices + 1 {
            return bad(format!("{} row offsets for {} vertices", self.row_offsets.len(), self.num_vertices));
        }
        if self.column_indices.len() as u64 != self.num_edges {
            return bad(format!("{} columns for {} edges", self.column_indices.len(), self.num_edges));
        }
        if self.row_offsets[0] != 0 || self.row_offsets[self.num_vertices as usize] != self.num_edges {
            return bad("row offsets do not span the edge array".into());
        }
        if let Some(i) = self.row_offsets.windows(2).position(|w| w[0] > w[1]) {
            return bad(format!("row offsets decrease at {i}"));
        }
        if let Some(c) = self.column_indices.iter().find(|&&c| c >= self.num_vertices) {
            return bad(format!("column index {c} out of range"));
        }
        Ok(())
    }

    pub fn file_size(&self) -> usize {
        columns_at(self.num_vertices) + 8 * self.num_edges as usize
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&self.num_vertices.to_le_bytes())?;
        w.write_all(&self.num_edges.to_le_bytes())?;
        for x in self.row_offsets.iter().chain(&self.column_indices) {
            w.write_all(&x.to_le_bytes())?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; HEADER_BYTES];
        r.read_exact(&mut header)?;
        let (num_vertices, num_edges) = parse_header(&header)?;
        let mut words = |n: u64| -> Result<Vec<u64>> {
            let mut out = Vec::with_capacity(n as usize);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                out.push(u64::from_le_bytes(b));
            }
            Ok(out)
        };
        let row_offsets = words(num_vertices + 1)?;
        let column_indices = words(num_edges)?;
        let g = CsrGraph {
            num_vertices,
            num_edges,
            row_offsets,
            column_indices,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Returns `(num_vertices, num_edges)`.
pub fn parse_header(header: &[u8]) -> Result<(u64, u64)> {
    if header.len() < HEADER_BYTES || header[..8] != MAGIC {
        return Err(BenchError::InvalidInput("not a CSR file".into()));
    }
    let word = |i: usize| u64::from_le_bytes(header[i..i + 8].try_into().expect("8 bytes"));
    Ok((word(8), word(16)))
}
