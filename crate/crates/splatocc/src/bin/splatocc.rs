//! Command-line front-end: depth/pose fitting, occupancy fitting, rendering,
//! overlap masks, the renderer benchmark and grid evaluation.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use splatocc::error::{Error, Result};
use splatocc::geometry::{Camera, Intrinsics, Pose};
use splatocc::masks::gsp_selection_masks;
use splatocc::pipeline::bench::{run_bench, BenchConfig};
use splatocc::pipeline::stage1::{fit_stage1, Stage1Config};
use splatocc::pipeline::stage2::{fit_stage2, render_view, Backend, Stage2Config};
use splatocc::pipeline::{Manifest, RigLayout};
use splatocc::scene::{generate_scene, raycast_gt, voxelize, Difficulty};
use splatocc::splat::RenderOptions;
use splatocc::volume::RaySamplingConfig;

#[derive(Parser)]
#[command(name = "splatocc", about = "Differentiable Gaussian splatting toolkit for occupancy fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Splat,
    Volume,
}

#[derive(Clone, Copy, ValueEnum)]
enum DifficultyArg {
    Simple,
    Cluttered,
}

impl From<DifficultyArg> for Difficulty {
    fn from(d: DifficultyArg) -> Self {
        match d {
            DifficultyArg::Simple => Difficulty::Simple,
            DifficultyArg::Cluttered => Difficulty::Cluttered,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-camera depth and ego-motion from two synthetic frames.
    FitStage1 {
        /// JSON config (defaults are used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a voxel occupancy grid against depth/semantic supervision.
    FitStage2 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a fitted occupancy grid (VOXG) from a ring camera.
    Render {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, value_enum, default_value = "splat")]
        backend: BackendArg,
        #[arg(long, default_value_t = 320)]
        width: usize,
        #[arg(long, default_value_t = 240)]
        height: usize,
        /// Camera heading in degrees (about the vertical axis).
        #[arg(long, default_value_t = 0.0)]
        yaw_deg: f64,
        #[arg(long, default_value_t = 0.3)]
        cam_height: f64,
        #[arg(long, default_value_t = 80.0)]
        fov_x_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the cross-view selection masks for a rig layout.
    Mask {
        /// JSON rig layout (defaults are used when omitted).
        #[arg(long)]
        rig: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark splat vs volume rendering on a full-size grid.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a fitted grid against the generating scene.
    Eval {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "cluttered")]
        difficulty: DifficultyArg,
        #[arg(long, value_enum, default_value = "splat")]
        backend: BackendArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn ring_camera(yaw_deg: f64, cam_height: f64, fov_x_deg: f64, width: usize, height: usize) -> Result<Camera> {
    let yaw = yaw_deg.to_radians();
    let fov = fov_x_deg.to_radians();
    let fx = width as f64 / (2.0 * (fov / 2.0).tan());
    let intr = Intrinsics::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height)?;
    let forward = nalgebra::Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let right = nalgebra::Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
    let down = nalgebra::Vector3::new(0.0, 0.0, -1.0);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[right, down, forward]));
    Ok(Camera::new(intr, Pose::new(rot, nalgebra::Vector3::new(0.0, 0.0, cam_height))))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitStage1 { config, out } => {
            let cfg: Stage1Config = load_config(&config)?;
            let result = fit_stage1(&cfg, Some(&out))?;
            println!(
                "stage 1 done: abs_rel {:.4}, median rel err {:.4}, pose err {:.4} m",
                result.metrics.final_.abs_rel,
                result.metrics.median_rel_err,
                result.metrics.pose_translation_err
            );
        }
        Command::FitStage2 { config, out } => {
            let cfg: Stage2Config = load_config(&config)?;
            let result = fit_stage2(&cfg, Some(&out))?;
            println!(
                "stage 2 done: mIoU {:.4}, depth abs_rel {:.4}",
                result.metrics.iou.miou, result.metrics.depth.abs_rel
            );
        }
        Command::Render { grid, backend, width, height, yaw_deg, cam_height, fov_x_deg, out } => {
            let g = splatocc::io::read_voxg(&grid)?;
            let cam = ring_camera(yaw_deg, cam_height, fov_x_deg, width, height)?;
            let backend = match backend {
                BackendArg::Splat => Backend::Splat,
                BackendArg::Volume => Backend::Volume,
            };
            let opts = RenderOptions { normalize_depth: true, ..RenderOptions::default() };
            let rendered = render_view(&g, &cam, width, height, backend, 0.1, &RaySamplingConfig::default(), &opts)?;
            std::fs::create_dir_all(&out)?;
            splatocc::io::write_depth_pfm(&out.join("depth.pfm"), &rendered.depth_map(0.5))?;
            let probs = rendered.feature_image();
            let labels: Vec<usize> = (0..width * height)
                .map(|i| {
                    let row = &probs.data[i * probs.channels..(i + 1) * probs.channels];
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(c, _)| c)
                        .unwrap_or(0)
                })
                .collect();
            let gray: Vec<f64> = labels
                .iter()
                .map(|&l| l as f64 / (g.classes.max(2) - 1) as f64)
                .collect();
            splatocc::io::write_pgm_gray(
                &out.join("classes.pgm"),
                &splatocc::image::Image { width, height, channels: 1, data: gray },
            )?;
            println!("rendered {}x{} to {}", width, height, out.display());
        }
        Command::Mask { rig, out } => {
            let layout: RigLayout = load_config(&rig)?;
            let built = layout.build();
            let masks = gsp_selection_masks(&built, &splatocc::masks::OverlapConfig::default())?;
            std::fs::create_dir_all(&out)?;
            for (c, m) in masks.iter().enumerate() {
                splatocc::io::write_pgm_mask(&out.join(format!("keep_cam{c}.pgm")), m)?;
            }
            Manifest::new("mask", 0, &layout, &serde_json::json!({}))?.write(&out.join("manifest.json"))?;
            println!("wrote {} masks to {}", masks.len(), out.display());
        }
        Command::Bench { config, out } => {
            let cfg: BenchConfig = load_config(&config)?;
            let report = run_bench(&cfg, Some(&out))?;
            print!("{}", report.table());
        }
        Command::Eval { grid, seed, difficulty, backend, out } => {
            let g = splatocc::io::read_voxg(&grid)?;
            let scene = generate_scene(seed, difficulty.into());
            let gt = voxelize(&scene, g.bounds_min, g.bounds_max, g.dims)?;
            let iou = splatocc::metrics::miou(&g.hard_classes(), &gt.hard_classes(), g.classes)?;
            let backend = match backend {
                BackendArg::Splat => Backend::Splat,
                BackendArg::Volume => Backend::Volume,
            };
            // rendered-depth accuracy from a small camera ring
            let layout = RigLayout::default();
            let rig = layout.build();
            let opts = RenderOptions { normalize_depth: true, ..RenderOptions::default() };
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for cam in &rig.cameras {
                let rendered = render_view(
                    &g,
                    cam,
                    layout.width,
                    layout.height,
                    backend,
                    0.1,
                    &RaySamplingConfig::default(),
                    &opts,
                )?;
                preds.push(rendered.depth_map(0.5));
                gts.push(raycast_gt(&scene, cam, layout.width, layout.height).0);
            }
            let depth = splatocc::pipeline::pooled_depth_metrics(&preds, &gts, 0.1, 12.0)?;
            std::fs::create_dir_all(&out)?;
            let report = serde_json::json!({ "iou": iou, "depth": depth });
            splatocc::io::write_json(&out.join("eval.json"), &report)?;
            println!("mIoU {:.4}, depth abs_rel {:.4}", iou.miou, depth.abs_rel);
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
