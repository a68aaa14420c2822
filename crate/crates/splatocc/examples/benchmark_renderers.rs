//! Times voxel-vertex splatting against ray-marched volume rendering on a
//! full-size grid at two image resolutions and prints the speedup table.
//!
//! Run with: cargo run --release --example benchmark_renderers

use splatocc::pipeline::bench::{run_bench, BenchConfig};

fn main() -> anyhow::Result<()> {
    let cfg = BenchConfig::default();
    let report = run_bench(&cfg, Some(std::path::Path::new("out/bench")))?;
    print!("{}", report.table());
    println!(
        "resolution scaling: splat {:.2}x, volume {:.2}x",
        report.splat_growth, report.volume_growth
    );
    Ok(())
}
