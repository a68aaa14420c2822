//! Generates a synthetic scene, voxelizes it, and renders depth + classes
//! with both the voxel-vertex splatter and the ray-marched volume baseline.
//!
//! Run with: cargo run --release --example render_scene

use splatocc::pipeline::stage2::{render_view, Backend};
use splatocc::pipeline::RigLayout;
use splatocc::scene::{generate_scene, raycast_gt, voxelize, Difficulty};
use splatocc::splat::RenderOptions;
use splatocc::volume::RaySamplingConfig;
use splatocc::voxel::{DEFAULT_BOUNDS_MAX, DEFAULT_BOUNDS_MIN, DEFAULT_DIMS};

fn main() -> anyhow::Result<()> {
    let scene = generate_scene(3, Difficulty::Cluttered);
    let grid = voxelize(&scene, DEFAULT_BOUNDS_MIN, DEFAULT_BOUNDS_MAX, DEFAULT_DIMS)?;
    println!("scene with {} primitives voxelized to {:?}", scene.primitives.len(), grid.dims);

    let layout = RigLayout { width: 320, height: 240, ..RigLayout::default() };
    let cam = &layout.build().cameras[0];
    let opts = RenderOptions { normalize_depth: true, ..RenderOptions::default() };
    let samples = RaySamplingConfig::default();

    let out_dir = std::path::Path::new("out/render_scene");
    std::fs::create_dir_all(out_dir)?;

    let (gt_depth, _) = raycast_gt(&scene, cam, layout.width, layout.height);
    splatocc::io::write_depth_pfm(&out_dir.join("depth_gt.pfm"), &gt_depth)?;

    for (backend, name) in [(Backend::Splat, "splat"), (Backend::Volume, "volume")] {
        let t = std::time::Instant::now();
        let rendered = render_view(&grid, cam, layout.width, layout.height, backend, 0.1, &samples, &opts)?;
        let dt = t.elapsed().as_secs_f64();
        let depth = rendered.depth_map(0.5);
        let mut err = 0.0;
        let mut n = 0usize;
        for i in 0..depth.values.len() {
            if depth.valid[i] && gt_depth.valid[i] {
                err += (depth.values[i] - gt_depth.values[i]).abs();
                n += 1;
            }
        }
        println!("{name}: {dt:.3} s, mean |depth err| {:.3} m over {n} px", err / n.max(1) as f64);
        splatocc::io::write_depth_pfm(&out_dir.join(format!("depth_{name}.pfm")), &depth)?;
    }
    println!("outputs written to {}", out_dir.display());
    Ok(())
}
