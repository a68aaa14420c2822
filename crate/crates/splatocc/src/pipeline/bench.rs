//! Wall-clock comparison of voxel-vertex splatting against the ray-marched
//! volume baseline on a full-size occupancy grid, across output resolutions.

use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

use crate::error::Result;
use crate::geometry::{Camera, Intrinsics, Pose};
use crate::pipeline::Manifest;
use crate::scene::{generate_scene, voxelize, Difficulty};
use crate::splat::{splat_render, voxel_to_gaussians, RenderOptions};
use crate::volume::{volume_forward, ActivatedGrid, RaySamplingConfig};
use crate::voxel::VoxelGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seed: u64,
    pub grid_dims: [usize; 3],
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    /// (width, height) pairs, benchmarked in order.
    pub resolutions: Vec<(usize, usize)>,
    pub reps: usize,
    pub gsv_scale: f64,
    pub samples: RaySamplingConfig,
    pub fov_x_deg: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            // full-size grid: 320*320*24 = 2,457,600 vertices
            grid_dims: [320, 320, 24],
            bounds_min: crate::voxel::DEFAULT_BOUNDS_MIN,
            bounds_max: crate::voxel::DEFAULT_BOUNDS_MAX,
            resolutions: vec![(320, 180), (640, 360)],
            reps: 5,
            gsv_scale: 0.05,
            samples: RaySamplingConfig::default(),
            fov_x_deg: 80.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchEntry {
    pub width: usize,
    pub height: usize,
    pub splat_median_s: f64,
    pub volume_median_s: f64,
    /// volume time / splat time at this resolution.
    pub speedup: f64,
    /// rays * samples marched by the volume renderer.
    pub volume_samples: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_vertices: usize,
    /// f64 storage for activated opacity + semantics, bytes.
    pub grid_memory_bytes: usize,
    pub entries: Vec<BenchEntry>,
    /// time(last resolution) / time(first resolution), per renderer.
    pub splat_growth: f64,
    pub volume_growth: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "grid vertices: {}  (~{:.1} MiB activated)\n",
            self.n_vertices,
            self.grid_memory_bytes as f64 / (1024.0 * 1024.0)
        ));
        s.push_str("resolution   splat [s]   volume [s]   speedup\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{:>5}x{:<5}  {:>9.4}  {:>10.4}  {:>7.2}x\n",
                e.width, e.height, e.splat_median_s, e.volume_median_s, e.speedup
            ));
        }
        s.push_str(&format!(
            "growth first->last resolution: splat {:.2}x, volume {:.2}x\n",
            self.splat_growth, self.volume_growth
        ));
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn bench_camera(cfg: &BenchConfig, width: usize, height: usize) -> Result<Camera> {
    let fov = cfg.fov_x_deg.to_radians();
    let fx = width as f64 / (2.0 * (fov / 2.0).tan());
    let intr = Intrinsics::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height)?;
    // camera at the ring height looking along +x, same convention as the rig
    let pose = Pose::new(
        nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
            nalgebra::Vector3::new(0.0, -1.0, 0.0),
            nalgebra::Vector3::new(0.0, 0.0, -1.0),
            nalgebra::Vector3::new(1.0, 0.0, 0.0),
        ])),
        nalgebra::Vector3::new(0.0, 0.0, 0.3),
    );
    Ok(Camera::new(intr, pose))
}

pub fn run_bench(cfg: &BenchConfig, out_dir: Option<&Path>) -> Result<BenchReport> {
    let scene = generate_scene(cfg.seed, Difficulty::Cluttered);
    let grid: VoxelGrid = voxelize(&scene, cfg.bounds_min, cfg.bounds_max, cfg.grid_dims)?;
    let opts = RenderOptions::default();

    let set = voxel_to_gaussians(&grid, cfg.gsv_scale)?;
    let act = ActivatedGrid::from_grid(&grid);

    let mut entries = Vec::new();
    for &(w, h) in &cfg.resolutions {
        let cam = bench_camera(cfg, w, h)?;
        // one warm-up per renderer, then timed reps
        let _ = splat_render(&set, &cam, w, h, &opts);
        let mut splat_times = Vec::with_capacity(cfg.reps);
        for _ in 0..cfg.reps {
            let t = Instant::now();
            let out = splat_render(&set, &cam, w, h, &opts);
            splat_times.push(t.elapsed().as_secs_f64());
            std::hint::black_box(&out.accum);
        }
        let _ = volume_forward(&act, &cam, w, h, &cfg.samples, &opts)?;
        let mut vol_times = Vec::with_capacity(cfg.reps);
        for _ in 0..cfg.reps {
            let t = Instant::now();
            let out = volume_forward(&act, &cam, w, h, &cfg.samples, &opts)?;
            vol_times.push(t.elapsed().as_secs_f64());
            std::hint::black_box(&out.accum);
        }
        let sm = median(splat_times);
        let vm = median(vol_times);
        entries.push(BenchEntry {
            width: w,
            height: h,
            splat_median_s: sm,
            volume_median_s: vm,
            speedup: vm / sm,
            volume_samples: (w * h * cfg.samples.samples_per_ray) as u64,
        });
    }

    let n_vertices = grid.vertex_count();
    let report = BenchReport {
        n_vertices,
        grid_memory_bytes: (act.opacity.len() + act.semantics.len()) * std::mem::size_of::<f64>(),
        splat_growth: entries.last().unwrap().splat_median_s / entries[0].splat_median_s,
        volume_growth: entries.last().unwrap().volume_median_s / entries[0].volume_median_s,
        entries,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        crate::io::write_json(&dir.join("bench.json"), &report)?;
        // manifest covers the configuration only; timings stay out of it
        Manifest::new("bench", cfg.seed, cfg, &serde_json::json!({}))?.write(&dir.join("manifest.json"))?;
    }
    Ok(report)
}
