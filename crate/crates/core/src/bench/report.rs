use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::os::fd::AsRawFd;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Counts, RunSettings};

/// One benchmark run. Serialized as a single JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub workload: String,
    pub backend: String,
    /// `sim`, `kernel` or `os`.
    pub fault_source: String,
    /// Seconds spent in the workload proper, excluding verification.
    pub wall_time: f64,
    pub page_size: usize,
    pub buffer_size: usize,
    pub fillers: usize,
    pub evictors: usize,
    pub read_ahead: usize,
    pub threads: usize,
    pub faults_served: u64,
    pub fills: u64,
    pub evictions: u64,
    pub write_backs: u64,
    /// `fills * page_size`.
    pub bytes_transferred: u64,
    /// `cold` when the file's cached pages were released before the run.
    pub cache: String,
    /// Operations per second, for workloads that count operations.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub throughput: Option<f64>,
    pub verified: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<String>,
}

impl BenchReport {
    pub(crate) fn new(workload: &str, settings: &RunSettings, source: &str, counts: Counts) -> Self {
        let c = &settings.config;
        BenchReport {
            workload: workload.to_string(),
            backend: match settings.backend {
                super::Backend::Engine => "engine".into(),
                super::Backend::OsMmap => "os-mmap".into(),
            },
            fault_source: source.to_string(),
            wall_time: 0.0,
            page_size: c.page_size(),
            buffer_size: c.buffer_capacity(),
            fillers: c.num_fillers(),
            evictors: c.num_evictors(),
            read_ahead: c.read_ahead(),
            threads: settings.threads,
            faults_served: counts.faults_served,
            fills: counts.fills,
            evictions: counts.evictions,
            write_backs: counts.write_backs,
            bytes_transferred: counts.fills * c.page_size() as u64,
            cache: "warm".into(),
            throughput: None,
            verified: false,
            detail: None,
        }
    }

    pub(crate) fn mark_cache(&mut self, dropped: bool) {
        self.cache = if dropped { "cold" } else { "warm" }.into();
    }

    pub(crate) fn set_verdict(&mut self, verdict: Result<(), String>) {
        match verdict {
            Ok(()) => self.verified = true,
            Err(why) => {
                self.verified = false;
                self.detail = Some(why);
            }
        }
    }

    /// Turns an unverified report into an error.
    pub fn ensure_verified(self) -> super::Result<Self> {
        if self.verified {
            Ok(self)
        } else {
            Err(super::BenchError::VerificationFailed(
                self.detail.unwrap_or_else(|| self.workload.clone()),
            ))
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Appends the report as one line to `path`.
    pub fn append_to(&self, path: &Path) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", self.to_json_line())
    }
}

/// Asks the OS to drop its cached pages of `path`. Needs no privileges;
/// returns whether the request was accepted.
pub(crate) fn drop_file_cache(path: &Path) -> bool {
    let Ok(f) = File::open(path) else { return false };
    if f.sync_data().is_err() {
        return false;
    }
    // SAFETY: plain syscall on an open descriptor.
    unsafe { libc::posix_fadvise(f.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED) == 0 }
}
