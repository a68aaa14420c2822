use splatocc::pipeline::bench::BenchConfig;
use splatocc::scene::{generate_scene, voxelize, Difficulty};
use splatocc::splat::{splat_render, voxel_to_gaussians, RenderOptions};
use splatocc::gaussians::GaussianSet;
use splatocc::geometry::{Camera, Intrinsics, Pose};
use std::time::Instant;

fn cam(w: usize, h: usize) -> Camera {
    let fx = w as f64 / (2.0 * 40f64.to_radians().tan());
    let intr = Intrinsics::new(fx, fx, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
    let pose = Pose::new(
        nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
            nalgebra::Vector3::new(0.0, -1.0, 0.0),
            nalgebra::Vector3::new(0.0, 0.0, -1.0),
            nalgebra::Vector3::new(1.0, 0.0, 0.0),
        ])),
        nalgebra::Vector3::new(0.0, 0.0, 0.3),
    );
    Camera::new(intr, pose)
}

fn main() -> anyhow::Result<()> {
    let cfg = BenchConfig::default();
    let scene = generate_scene(cfg.seed, Difficulty::Cluttered);
    let grid = voxelize(&scene, cfg.bounds_min, cfg.bounds_max, cfg.grid_dims)?;
    let set = voxel_to_gaussians(&grid, cfg.gsv_scale)?;
    let opts = RenderOptions::default();

    let occ: Vec<usize> = (0..set.len()).filter(|&i| set.opacities[i] >= opts.alpha_cutoff).collect();
    println!("total {} occupied {}", set.len(), occ.len());
    let mut dense = GaussianSet::with_feature_dim(set.feature_dim);
    for &i in &occ {
        dense.means.push(set.means[i]);
        dense.scales.push(set.scales[i]);
        dense.rotations.push(set.rotations[i]);
        dense.opacities.push(set.opacities[i]);
        dense.features.extend_from_slice(&set.features[i * set.feature_dim..(i + 1) * set.feature_dim]);
    }

    for (w, h) in [(320usize, 180usize), (640, 360)] {
        let c = cam(w, h);
        for (tag, s) in [("full", &set), ("dense", &dense)] {
            let _ = splat_render(s, &c, w, h, &opts);
            let mut ts = vec![];
            for _ in 0..3 {
                let t = Instant::now();
                let out = splat_render(s, &c, w, h, &opts);
                ts.push(t.elapsed().as_secs_f64());
                std::hint::black_box(&out.accum);
            }
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            println!("{w}x{h} {tag}: {:.4}s", ts[1]);
        }
    }
    Ok(())
}
