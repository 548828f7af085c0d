//! Random-access record churn with self-checking records.
//!
//! The store is an array of 64-byte records: key, version, a 40-byte
//! payload and an FNV-1a checksum of the first 56 bytes. A record is either
//! all zeros (never written) or carries its own index as key and a valid
//! checksum.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fault_source::MappedMemory;

use super::{BenchError, BenchReport, Result, RunSettings, Session};

pub const RECORD_BYTES: usize = 64;
const PAYLOAD_BYTES: usize = 40;
const LOCK_STRIPES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChurnParams {
    pub num_ops: u64,
    pub key_space: u64,
    /// Probability that an operation is a read.
    pub read_fraction: f64,
    pub seed: u64,
}

/// How a run ends before the file is scanned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Finish {
    /// Unmap with full write-back.
    Unmap,
    /// Flush, then drop the mapping without further write-back.
    FlushThenAbandon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordStatus {
    Empty,
    Valid { version: u64 },
    Corrupt,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn encode(key: u64, version: u64, payload: &[u8; PAYLOAD_BYTES]) -> [u8; RECORD_BYTES] {
    let mut r = [0u8; RECORD_BYTES];
    r[..8].copy_from_slice(&key.to_le_bytes());
    r[8..16].copy_from_slice(&version.to_le_bytes());
    r[16..56].copy_from_slice(payload);
    let sum = fnv1a(&r[..56]);
    r[56..].copy_from_slice(&sum.to_le_bytes());
    r
}

pub fn check(record: &[u8], index: u64) -> RecordStatus {
    if record.iter().all(|&b| b == 0) {
        return RecordStatus::Empty;
    }
    let word = |i: usize| u64::from_le_bytes(record[i..i + 8].try_into().expect("8 bytes"));
    if word(0) == index && word(56) == fnv1a(&record[..56]) {
        RecordStatus::Valid { version: word(8) }
    } else {
        RecordStatus::Corrupt
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanSummary {
    pub empty: u64,
    pub valid: u64,
    pub corrupt: u64,
    pub first_corrupt: Option<u64>,
}

/// Reads the first `key_space` records straight from the file.
pub fn scan_file(path: &Path, key_space: u64) -> Result<ScanSummary> {
    let mut r = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut s = ScanSummary::default();
    let mut rec = [0u8; RECORD_BYTES];
    for k in 0..key_space {
        r.read_exact(&mut rec)?;
        match check(&rec, k) {
            RecordStatus::Empty => s.empty += 1,
            RecordStatus::Valid { .. } => s.valid += 1,
            RecordStatus::Corrupt => {
                s.corrupt += 1;
                s.first_corrupt.get_or_insert(k);
            }
        }
    }
    Ok(s)
}

/// Creates `path` or grows it with zeros to hold `key_space` records.
pub fn prepare_store(path: &Path, key_space: u64) -> Result<()> {
    let f = OpenOptions::new().create(true).truncate(false).write(true).open(path)?;
    let need = key_space * RECORD_BYTES as u64;
    if f.metadata()?.len() < need {
        f.set_len(need)?;
    }
    Ok(())
}

/// Issues `params.num_ops` operations from `threads` threads against `mem`.
/// Returns how many reads saw a corrupt record.
pub fn churn(mem: &dyn MappedMemory, params: &ChurnParams, threads: usize) -> u64 {
    let locks: Vec<Mutex<()>> = (0..LOCK_STRIPES).map(|_| Mutex::new(())).collect();
    let bad_reads = AtomicU64::new(0);
    let threads = threads.max(1) as u64;
    std::thread::scope(|s| {
        for t in 0..threads {
            let ops = params.num_ops / threads + u64::from(t < params.num_ops % threads);
            let (locks, bad_reads) = (&locks, &bad_reads);
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ (t << 32));
                let mut rec = [0u8; RECORD_BYTES];
                for _ in 0..ops {
                    let key = rng.gen_range(0..params.key_space);
                    let at = key as usize * RECORD_BYTES;
                    let read = rng.gen_bool(params.read_fraction);
                    let _g = locks[key as usize % LOCK_STRIPES].lock();
                    mem.read(at, &mut rec);
                    let status = check(&rec, key);
                    if status == RecordStatus::Corrupt {
                        bad_reads.fetch_add(1, Ordering::Relaxed);
                    }
                    if !read {
                        let version = match status {
                            RecordStatus::Valid { version } => version + 1,
                            _ => 1,
                        };
                        let mut payload = [0u8; PAYLOAD_BYTES];
                        rng.fill(&mut payload[..]);
                        mem.write(at, &encode(key, version, &payload));
                    }
                }
            });
        }
    });
    bad_reads.into_inner()
}

pub fn run_churn(path: &Path, params: &ChurnParams, settings: &RunSettings) -> Result<BenchReport> {
    run_churn_with(path, params, settings, Finish::Unmap)
}

pub fn run_churn_with(path: &Path, params: &ChurnParams, settings: &RunSettings, finish: Finish) -> Result<BenchReport> {
    if params.key_space == 0 || !(0.0..=1.0).contains(&params.read_fraction) {
        return Err(BenchError::InvalidInput("key_space must be positive and read_fraction within 0..=1".into()));
    }
    prepare_store(path, params.key_space)?;
    let session = Session::open(settings, path, true)?;
    if session.len < params.key_space as usize * RECORD_BYTES {
        return Err(BenchError::InvalidInput("store too small for the key space".into()));
    }
    let (source, cold) = (session.source_name, session.cache_dropped);
    let start = Instant::now();
    let bad_reads = churn(&*session.memory, params, settings.threads);
    let elapsed = start.elapsed().as_secs_f64();
    let counts = match finish {
        Finish::Unmap => session.finish()?,
        Finish::FlushThenAbandon => {
            session.flush()?;
            session.abandon()
        }
    };
    let mut report = BenchReport::new("churn", settings, source, counts);
    report.wall_time = elapsed;
    report.throughput = Some(params.num_ops as f64 / elapsed.max(1e-9));
    report.mark_cache(cold);
    let scan = scan_file(path, params.key_space)?;
    report.set_verdict(if bad_reads > 0 {
        Err(format!("{bad_reads} reads saw a corrupt record"))
    } else if let Some(k) = scan.first_corrupt {
        Err(format!("{} corrupt records, first at key {k}", scan.corrupt))
    } else {
        Ok(())
    });
    Ok(report)
}
