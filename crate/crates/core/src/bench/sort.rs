//! Out-of-core sort of little-endian `u64` words into descending order.
//!
//! Ranges larger than [`LOCAL_LIMIT`] words are split with a blocked
//! partition that streams [`BLOCK`]-word windows from both ends of the
//! range, and the halves are sorted in parallel. Smaller ranges are copied
//! out, sorted in memory and copied back.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use crate::fault_source::MappedMemory;

use super::{BenchError, BenchReport, Result, RunSettings, Session};

pub const LOCAL_LIMIT: usize = 1 << 16;
pub const INSERTION_CUTOFF: usize = 64;
pub const BLOCK: usize = 4096;

/// Writes `total_bytes / 8` ascending words starting at zero.
pub fn gen_sort_data(path: &Path, total_bytes: u64) -> Result<()> {
    if !total_bytes.is_multiple_of(8) {
        return Err(BenchError::InvalidInput(format!("{total_bytes} bytes is not a whole number of words")));
    }
    let mut w = BufWriter::with_capacity(1 << 20, File::create(path)?);
    for k in 0..total_bytes / 8 {
        w.write_all(&k.to_le_bytes())?;
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

/// Sorts the first `words` words of `mem` into descending order on the
/// current rayon pool.
pub fn sort_descending(mem: &dyn MappedMemory, words: usize) {
    assert!(words * 8 <= mem.len(), "{words} words exceed the mapping");
    sort_range(mem, 0, words);
}

fn sort_range(mem: &dyn MappedMemory, lo: usize, hi: usize) {
    let n = hi - lo;
    if n <= LOCAL_LIMIT {
        if n > 1 {
            let mut v = vec![0u64; n];
            mem.read_u64s(lo * 8, &mut v);
            quicksort_desc(&mut v);
            mem.write_u64s(lo * 8, &v);
        }
        return;
    }
    let pivot = median3(mem.read_u64(lo * 8), mem.read_u64((lo + n / 2) * 8), mem.read_u64((hi - 1) * 8));
    let split = partition(mem, lo, hi, |x| x > pivot);
    let (left_end, right_start) = if split == lo {
        // Nothing exceeds the pivot: set aside the run equal to it.
        (lo, partition(mem, lo, hi, |x| x >= pivot))
    } else {
        (split, split)
    };
    rayon::join(|| sort_range(mem, lo, left_end), || sort_range(mem, right_start, hi));
}

fn median3(a: u64, b: u64, c: u64) -> u64 {
    a.max(b).min(a.min(b).max(c))
}

fn load(mem: &dyn MappedMemory, start: usize, n: usize) -> Vec<u64> {
    let mut v = vec![0u64; n];
    mem.read_u64s(start * 8, &mut v);
    v
}

/// Reorders words `lo..hi` so that those satisfying `left` come first and
/// returns the index of the first one that does not.
fn partition(mem: &dyn MappedMemory, lo: usize, hi: usize, left: impl Fn(u64) -> bool + Copy) -> usize {
    if hi - lo <= 2 * BLOCK {
        return partition_local(mem, lo, hi, left);
    }
    // Words in ml..mr have not been loaded yet.
    let (mut ml, mut mr) = (lo + BLOCK, hi - BLOCK);
    let (mut lstart, mut lbuf, mut i) = (lo, load(mem, lo, BLOCK), 0);
    let (mut rstart, mut rbuf, mut j) = (mr, load(mem, mr, BLOCK), BLOCK);
    loop {
        while i < lbuf.len() && left(lbuf[i]) {
            i += 1;
        }
        while j > 0 && !left(rbuf[j - 1]) {
            j -= 1;
        }
        if i == lbuf.len() {
            mem.write_u64s(lstart * 8, &lbuf);
            if ml == mr {
                mem.write_u64s(rstart * 8, &rbuf);
                return partition_local(mem, rstart, rstart + j, left);
            }
            let n = BLOCK.min(mr - ml);
            (lstart, lbuf, i) = (ml, load(mem, ml, n), 0);
            ml += n;
            continue;
        }
        if j == 0 {
            mem.write_u64s(rstart * 8, &rbuf);
            if ml == mr {
                mem.write_u64s(lstart * 8, &lbuf);
                return partition_local(mem, lstart + i, lstart + lbuf.len(), left);
            }
            let n = BLOCK.min(mr - ml);
            mr -= n;
            (rstart, rbuf, j) = (mr, load(mem, mr, n), n);
            continue;
        }
        std::mem::swap(&mut lbuf[i], &mut rbuf[j - 1]);
        i += 1;
        j -= 1;
    }
}

fn partition_local(mem: &dyn MappedMemory, lo: usize, hi: usize, left: impl Fn(u64) -> bool) -> usize {
    if lo == hi {
        return lo;
    }
    let mut v = load(mem, lo, hi - lo);
    let (mut i, mut j) = (0, v.len());
    loop {
        while i < j && left(v[i]) {
            i += 1;
        }
        while i < j && !left(v[j - 1]) {
            j -= 1;
        }
        if i >= j {
            break;
        }
        v.swap(i, j - 1);
        i += 1;
        j -= 1;
    }
    mem.write_u64s(lo * 8, &v);
    lo + i
}

/// In-memory descending quicksort with a three-way split.
pub fn quicksort_desc(mut v: &mut [u64]) {
    while v.len() > INSERTION_CUTOFF {
        let p = median3(v[0], v[v.len() / 2], v[v.len() - 1]);
        // v[..gt] > p, v[gt..i] == p, v[lt..] < p
        let (mut gt, mut i, mut lt) = (0, 0, v.len());
        while i < lt {
            if v[i] > p {
                v.swap(gt, i);
                gt += 1;
                i += 1;
            } else if v[i] < p {
                lt -= 1;
                v.swap(i, lt);
            } else {
                i += 1;
            }
        }
        let (head, rest) = v.split_at_mut(gt);
        let tail = &mut rest[lt - gt..];
        if head.len() < tail.len() {
            quicksort_desc(head);
            v = tail;
        } else {
            quicksort_desc(tail);
            v = head;
        }
    }
    insertion_desc(v);
}

fn insertion_desc(v: &mut [u64]) {
    for k in 1..v.len() {
        let x = v[k];
        let mut m = k;
        while m > 0 && v[m - 1] < x {
            v[m] = v[m - 1];
            m -= 1;
        }
        v[m] = x;
    }
}

/// Checks that word `k` of the file equals `n - 1 - k`, which holds exactly
/// when the words are strictly descending and form `0..n`.
pub fn verify_descending_file(path: &Path) -> Result<(), String> {
    let len = fs::metadata(path).map_err(|e| e.to_string())?.len();
    let n = len / 8;
    let mut r = BufReader::with_capacity(1 << 20, File::open(path).map_err(|e| e.to_string())?);
    let mut b = [0u8; 8];
    for k in 0..n {
        r.read_exact(&mut b).map_err(|e| e.to_string())?;
        let w = u64::from_le_bytes(b);
        if w != n - 1 - k {
            return Err(format!("word {k} is {w}, expected {}", n - 1 - k));
        }
    }
    Ok(())
}

/// Sorts the file in place through the configured backend, then verifies it
/// by reading the file directly.
pub fn run_sort(path: &Path, settings: &RunSettings) -> Result<BenchReport> {
    let bytes = fs::metadata(path)?.len();
    if bytes == 0 || bytes % 8 != 0 {
        return Err(BenchError::InvalidInput(format!("{bytes} bytes is not a whole number of words")));
    }
    let pool = settings.pool();
    let start = Instant::now();
    let session = Session::open(settings, path, true)?;
    let (source, cold) = (session.source_name, session.cache_dropped);
    pool.install(|| sort_descending(&*session.memory, (bytes / 8) as usize));
    let counts = session.finish()?;
    let wall_time = start.elapsed().as_secs_f64();
    let mut report = BenchReport::new("sort", settings, source, counts);
    report.wall_time = wall_time;
    report.mark_cache(cold);
    report.set_verdict(verify_descending_file(path));
    Ok(report)
}
