//! Fits a voxel occupancy grid against oracle depth/semantic supervision
//! with the splat backend and reports mIoU against the voxelized scene.
//!
//! Run with: cargo run --release --example fit_stage2

use splatocc::pipeline::stage2::{fit_stage2, Stage2Config};
use splatocc::scene::Difficulty;

fn main() -> anyhow::Result<()> {
    let cfg = Stage2Config { seed: 1, difficulty: Difficulty::Simple, ..Stage2Config::default() };
    let t = std::time::Instant::now();
    let result = fit_stage2(&cfg, Some(std::path::Path::new("out/stage2")))?;
    let m = &result.metrics;
    println!("fit {} iters in {:.1} s", cfg.iters, t.elapsed().as_secs_f64());
    println!("mIoU {:.4} (per class: {:?})", m.iou.miou, m.iou.per_class);
    println!(
        "depth abs_rel {:.4}, rmse {:.4} m | losses: depth {:.5}, semantic {:.5}, tv {:.5}",
        m.depth.abs_rel, m.depth.rmse, m.final_depth_loss, m.final_semantic_loss, m.final_tv_loss
    );
    println!("grid written to out/stage2/grid.voxg");
    Ok(())
}
