//! Out-of-core workloads that drive the engine end to end and check their
//! own output.
//!
//! Each workload maps a file either through the engine or through a plain
//! OS mapping ([`Backend::OsMmap`]) and returns a [`BenchReport`]. A report
//! whose `verified` flag is false means the output disagreed with the
//! workload's oracle.

mod baseline;
pub mod bfs;
pub mod churn;
pub mod csr;
pub mod report;
pub mod rmat;
pub mod sort;

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::config::RuntimeConfig;
use crate::engine::{Engine, EngineError, MapMode};
use crate::fault_source::{FaultError, FaultSource, KernelSource, MappedMemory, SimulatedSource};
use crate::store::{BackingStore, FileStore, StoreError};

pub use csr::CsrGraph;
pub use report::BenchReport;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Source(#[from] FaultError),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Engine,
    OsMmap,
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "engine" => Ok(Backend::Engine),
            "os-mmap" => Ok(Backend::OsMmap),
            _ => Err(format!("unknown backend {s:?}, expected engine or os-mmap")),
        }
    }
}

/// Where page faults come from when the backend is the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceChoice {
    Simulated,
    Kernel,
    /// The kernel facility when it can be opened, the simulation otherwise.
    Auto,
}

impl FromStr for SourceChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" => Ok(SourceChoice::Simulated),
            "kernel" => Ok(SourceChoice::Kernel),
            "auto" => Ok(SourceChoice::Auto),
            _ => Err(format!("unknown fault source {s:?}, expected sim, kernel or auto")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub config: RuntimeConfig,
    /// Application threads, independent of engine workers.
    pub threads: usize,
    pub backend: Backend,
    pub source: SourceChoice,
}

impl RunSettings {
    pub fn new(config: RuntimeConfig) -> Self {
        RunSettings {
            config,
            threads: 4,
            backend: Backend::Engine,
            source: SourceChoice::Simulated,
        }
    }

    pub fn threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn source(mut self, source: SourceChoice) -> Self {
        self.source = source;
        self
    }

    pub(crate) fn pool(&self) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .expect("thread pool")
    }
}

pub(crate) fn open_source(choice: SourceChoice) -> Result<(Arc<dyn FaultSource>, &'static str)> {
    match choice {
        SourceChoice::Simulated => Ok((Arc::new(SimulatedSource::default()), "sim")),
        SourceChoice::Kernel => Ok((Arc::new(KernelSource::open()?), "kernel")),
        SourceChoice::Auto => match KernelSource::open() {
            Ok(k) => Ok((Arc::new(k), "kernel")),
            Err(e) => {
                log::info!("kernel fault source unavailable ({e}); using the simulation");
                Ok((Arc::new(SimulatedSource::default()), "sim"))
            }
        },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct Counts {
    pub faults_served: u64,
    pub fills: u64,
    pub evictions: u64,
    pub write_backs: u64,
}

enum Mapping {
    Engine { engine: Engine, base: usize },
    Os(Arc<baseline::OsMapping>),
}

/// One file mapped for the duration of a workload.
pub(crate) struct Session {
    mapping: Mapping,
    pub memory: Arc<dyn MappedMemory>,
    pub len: usize,
    pub source_name: &'static str,
    pub cache_dropped: bool,
}

impl Session {
    pub fn open(settings: &RunSettings, path: &Path, writable: bool) -> Result<Self> {
        let cache_dropped = report::drop_file_cache(path);
        match settings.backend {
            Backend::OsMmap => {
                let os = Arc::new(baseline::OsMapping::open(path, writable)?);
                Ok(Session {
                    len: os.len(),
                    memory: os.clone(),
                    mapping: Mapping::Os(os),
                    source_name: "os",
                    cache_dropped,
                })
            }
            Backend::Engine => {
                let store = Arc::new(FileStore::open(path, writable)?);
                let len = store.size() as usize;
                if len == 0 {
                    return Err(BenchError::InvalidInput(format!("{} is empty", path.display())));
                }
                let (source, source_name) = open_source(settings.source)?;
                let engine = Engine::start(settings.config.clone(), source)?;
                let mode = if writable { MapMode::ReadWrite } else { MapMode::ReadOnly };
                let base = engine.umap(len, mode, store, None)?;
                let memory = engine.memory(base)?;
                Ok(Session {
                    mapping: Mapping::Engine { engine, base },
                    memory,
                    len,
                    source_name,
                    cache_dropped,
                })
            }
        }
    }

    pub fn flush(&self) -> Result<()> {
        match &self.mapping {
            Mapping::Engine { engine, base } => Ok(engine.flush(*base)?),
            Mapping::Os(os) => Ok(os.flush()?),
        }
    }

    fn counts(&self) -> Counts {
        match &self.mapping {
            Mapping::Engine { engine, .. } => {
                let s = engine.stats();
                Counts {
                    faults_served: s.faults_served,
                    fills: s.fills,
                    evictions: s.evictions,
                    write_backs: s.write_backs,
                }
            }
            Mapping::Os(_) => Counts::default(),
        }
    }

    /// Unmaps with full write-back and stops the engine.
    pub fn finish(self) -> Result<Counts> {
        let Session { mapping, memory, .. } = self;
        drop(memory);
        match mapping {
            Mapping::Engine { engine, base } => {
                engine.uunmap(base)?;
                engine.shutdown()?;
                let s = engine.stats();
                Ok(Counts {
                    faults_served: s.faults_served,
                    fills: s.fills,
                    evictions: s.evictions,
                    write_backs: s.write_backs,
                })
            }
            Mapping::Os(os) => {
                os.flush()?;
                Ok(Counts::default())
            }
        }
    }

    /// Drops every resident page without write-back.
    pub fn abandon(self) -> Counts {
        let counts = self.counts();
        let Session { mapping, memory, .. } = self;
        drop(memory);
        match mapping {
            Mapping::Engine { engine, .. } => engine.abandon(),
            Mapping::Os(os) => drop(os),
        }
        counts
    }
}
