//! User-space demand paging.
//!
//! A backing store (file, several file slices, memory, or callbacks) is
//! mapped into an address range whose pages are filled on first access,
//! cached in a shared byte-budgeted buffer, tracked for modification and
//! evicted between a high and a low watermark by worker pools.
//!
//! - [`config`]: page size, buffer size, worker counts, watermarks.
//! - [`store`]: backing stores.
//! - [`buffer`]: the page ledger.
//! - [`fault_source`]: where faults come from. [`fault_source::KernelSource`]
//!   uses the kernel user-fault facility; [`fault_source::SimulatedSource`]
//!   is a software MMU for tests.
//! - [`engine`]: the paging runtime.
//! - [`mod@bench`]: self-verifying out-of-core workloads.

pub mod bench;
pub mod buffer;
pub mod config;
pub mod engine;
pub mod fault_source;
pub mod store;
