//! Breadth-first search over an R-MAT graph larger than the page buffer.

use std::error::Error;

use upager::bench::{bfs, rmat, RunSettings};
use upager::config::RuntimeConfig;

fn main() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("graph.csr");
    let g = rmat::gen_rmat_csr(&path, 12, 16, 42)?;
    println!("{} vertices, {} directed edges, {} bytes", g.num_vertices, g.num_edges, g.file_size());

    let config = RuntimeConfig::defaults(2, 1 << 30)?
        .set_buffer_capacity(g.file_size() / 4 / 4096 * 4096)?
        .set_page_size(4096)?;
    let (report, levels) = bfs::run_bfs_levels(&path, 0, &RunSettings::new(config).threads(4))?;
    let report = report.ensure_verified()?;
    let depth = levels.iter().filter(|&&l| l != bfs::UNREACHED).max().unwrap_or(&0);
    println!("depth {depth}, {}", report.to_json_line());
    Ok(())
}
