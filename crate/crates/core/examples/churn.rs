//! Random record updates from several threads, at a few thread counts.

use std::error::Error;

use upager::bench::churn::{run_churn, ChurnParams};
use upager::bench::RunSettings;
use upager::config::RuntimeConfig;

fn main() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let params = ChurnParams {
        num_ops: 100_000,
        key_space: 10_000,
        read_fraction: 0.5,
        seed: 1,
    };
    for threads in [1, 2, 4, 8] {
        let path = dir.path().join(format!("records{threads}"));
        let config = RuntimeConfig::defaults(2, 1 << 30)?
            .set_buffer_capacity(128 << 10)?
            .set_page_size(4096)?;
        let report = run_churn(&path, &params, &RunSettings::new(config).threads(threads))?.ensure_verified()?;
        println!("{threads} threads: {:.0} ops/s", report.throughput.unwrap_or(0.0));
    }
    Ok(())
}
