//! Sort a word file four times larger than the page buffer.

use std::error::Error;

use upager::bench::{sort, RunSettings};
use upager::config::RuntimeConfig;

fn main() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("words");
    sort::gen_sort_data(&path, 32 << 20)?;
    for page in [4096, 64 << 10, 1 << 20] {
        let config = RuntimeConfig::defaults(2, 1 << 30)?
            .set_buffer_capacity(8 << 20)?
            .set_page_size(page)?;
        let report = sort::run_sort(&path, &RunSettings::new(config).threads(4))?.ensure_verified()?;
        println!("{}", report.to_json_line());
    }
    Ok(())
}
