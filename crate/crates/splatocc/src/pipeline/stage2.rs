//! Stage 2: fits the voxel-vertex occupancy grid (opacity + semantic logits)
//! against per-view depth and semantic supervision, rendered either by
//! voxel-vertex splatting or by the ray-marched volume baseline.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::adam::Adam;
use crate::error::Result;
use crate::geometry::{Camera, Pose};
use crate::image::DepthMap;
use crate::losses::{depth_l1_loss, tv_loss, SEMANTIC_PROB_FLOOR};
use crate::metrics::{miou, DepthMetrics, IouReport};
use crate::pipeline::stage1::{fit_stage1, Stage1Config};
use crate::pipeline::{pooled_depth_metrics, Manifest, RigLayout};
use crate::scene::{generate_scene, raycast_gt, voxelize, Difficulty};
use crate::splat::{splat_backward, splat_forward, voxel_to_gaussians, OutputGradient, RenderOptions, RenderOutput};
use crate::volume::{volume_backward, volume_forward, ActivatedGrid, RaySamplingConfig};
use crate::voxel::{sigmoid_derivative, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Splat,
    Volume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Exact ray-cast depth.
    Oracle,
    /// Depth maps fitted by stage 1 at the first rig placement.
    Stage1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub rig: RigLayout,
    /// Rig placements on a small circle around the origin; more placements
    /// give better grid coverage.
    pub n_ego_poses: usize,
    pub ego_ring_radius: f64,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub grid_dims: [usize; 3],
    pub classes: usize,
    pub backend: Backend,
    pub supervision: Supervision,
    /// Stage-1 settings used when `supervision` is `Stage1` (seed and rig
    /// layout are overridden to match this config).
    pub stage1: Stage1Config,
    /// Isotropic Gaussian scale per grid vertex, meters.
    pub gsv_scale: f64,
    pub samples: RaySamplingConfig,
    pub splat: RenderOptions,
    pub init_opacity_logit: f64,
    pub w_depth: f64,
    pub w_semantic: f64,
    pub tv_weight: f64,
    pub lr: f64,
    pub iters: usize,
    pub views_per_iter: usize,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            seed: 0,
            difficulty: Difficulty::Cluttered,
            rig: RigLayout::default(),
            n_ego_poses: 3,
            ego_ring_radius: 1.0,
            bounds_min: crate::voxel::DEFAULT_BOUNDS_MIN,
            bounds_max: crate::voxel::DEFAULT_BOUNDS_MAX,
            // coarser than the render-quality default: fitting cost scales
            // with vertex count and a 0.4 m cell is enough for desk scenes
            grid_dims: [40, 40, 10],
            classes: crate::voxel::DEFAULT_CLASSES,
            backend: Backend::Splat,
            supervision: Supervision::Oracle,
            stage1: Stage1Config::default(),
            gsv_scale: 0.15,
            samples: RaySamplingConfig { samples_per_ray: 64, ..RaySamplingConfig::default() },
            splat: RenderOptions { normalize_depth: true, ..RenderOptions::default() },
            init_opacity_logit: -4.0,
            w_depth: 1.0,
            w_semantic: 1.0,
            tv_weight: 1e-2,
            lr: 3e-2,
            iters: 600,
            views_per_iter: 1,
            // below ~one voxel edge the grid cannot represent the surface,
            // so depth evaluation starts at 0.5 m
            min_depth: 0.5,
            max_depth: 12.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Metrics {
    pub iou: IouReport,
    pub depth: DepthMetrics,
    pub final_depth_loss: f64,
    pub final_semantic_loss: f64,
    pub final_tv_loss: f64,
}

pub struct Stage2Result {
    pub grid: VoxelGrid,
    pub metrics: Stage2Metrics,
    pub manifest: Manifest,
}

/// One training/eval view: a camera plus its depth and label supervision.
struct View {
    camera: Camera,
    sup_depth: DepthMap,
    gt_depth: DepthMap,
    labels: Vec<usize>,
}

fn build_views(cfg: &Stage2Config, scene: &crate::scene::SceneSpec) -> Result<Vec<View>> {
    let (w, h) = (cfg.rig.width, cfg.rig.height);
    let base = cfg.rig.build();
    let mut views = Vec::new();
    let placements = match cfg.supervision {
        Supervision::Oracle => cfg.n_ego_poses.max(1),
        Supervision::Stage1 => 1,
    };

    let stage1_depths = if cfg.supervision == Supervision::Stage1 {
        let mut s1 = cfg.stage1.clone();
        s1.seed = cfg.seed;
        s1.difficulty = cfg.difficulty;
        s1.rig = cfg.rig;
        Some(fit_stage1(&s1, None)?.depth_maps)
    } else {
        None
    };

    for e in 0..placements {
        let angle = std::f64::consts::TAU * e as f64 / placements as f64;
        let ego = Pose::new(
            nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), angle),
            nalgebra::Vector3::new(
                cfg.ego_ring_radius * angle.cos(),
                cfg.ego_ring_radius * angle.sin(),
                0.0,
            ),
        );
        let rig = if e == 0 { base.clone() } else { base.at_ego(&ego) };
        for (c, cam) in rig.cameras.iter().enumerate() {
            let (gt_depth, labels) = raycast_gt(scene, cam, w, h);
            let sup_depth = match &stage1_depths {
                Some(d) => d[c].clone(),
                None => gt_depth.clone(),
            };
            views.push(View { camera: *cam, sup_depth, gt_depth, labels });
        }
    }
    Ok(views)
}

/// Semantic NLL where the free-space class absorbs the residual
/// transmittance: for label 0 the likelihood is p_0 + (1 - accum), so fully
/// transparent rays are perfectly "free". Gradients are accumulated into
/// `og` scaled by `weight`.
fn semantic_background_loss(
    out: &RenderOutput,
    labels: &[usize],
    weight: f64,
    og: &mut OutputGradient,
) -> f64 {
    let n_pix = out.width * out.height;
    let channels = out.channels;
    let norm = weight / n_pix as f64;
    let mut loss = 0.0;
    for i in 0..n_pix {
        let c = labels[i];
        let p = if c == 0 {
            out.feature[i * channels] + (1.0 - out.accum[i])
        } else {
            out.feature[i * channels + c]
        };
        if p >= SEMANTIC_PROB_FLOOR {
            loss += -norm * p.ln();
            let dp = -norm / p;
            og.d_feature[i * channels + c] += dp;
            if c == 0 {
                og.d_accum[i] -= dp;
            }
        } else {
            loss += -norm * SEMANTIC_PROB_FLOOR.ln();
        }
    }
    loss
}

/// Renders a view with the configured backend.
pub fn render_view(
    grid: &VoxelGrid,
    camera: &Camera,
    width: usize,
    height: usize,
    backend: Backend,
    gsv_scale: f64,
    samples: &RaySamplingConfig,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    match backend {
        Backend::Splat => {
            let set = voxel_to_gaussians(grid, gsv_scale)?;
            Ok(crate::splat::splat_render(&set, camera, width, height, opts))
        }
        Backend::Volume => {
            let act = ActivatedGrid::from_grid(grid);
            volume_forward(&act, camera, width, height, samples, opts)
        }
    }
}

/// Chain gradients w.r.t. activated opacity/probabilities back to the logits.
fn chain_to_logits(
    grid: &VoxelGrid,
    d_opacity_act: &[f64],
    d_probs: &[f64],
    probs: &[f64],
    d_op_logits: &mut [f64],
    d_sem_logits: &mut [f64],
) {
    let classes = grid.classes;
    for v in 0..grid.vertex_count() {
        if d_opacity_act[v] != 0.0 {
            d_op_logits[v] += d_opacity_act[v] * sigmoid_derivative(grid.opacity_logits[v]);
        }
        let dp = &d_probs[v * classes..(v + 1) * classes];
        if dp.iter().any(|&g| g != 0.0) {
            let p = &probs[v * classes..(v + 1) * classes];
            let dot: f64 = dp.iter().zip(p).map(|(g, pv)| g * pv).sum();
            for c in 0..classes {
                d_sem_logits[v * classes + c] += p[c] * (dp[c] - dot);
            }
        }
    }
}

pub fn fit_stage2(cfg: &Stage2Config, out_dir: Option<&Path>) -> Result<Stage2Result> {
    let (w, h) = (cfg.rig.width, cfg.rig.height);
    let scene = generate_scene(cfg.seed, cfg.difficulty);
    let views = build_views(cfg, &scene)?;

    let mut grid = VoxelGrid::new(cfg.bounds_min, cfg.bounds_max, cfg.grid_dims, cfg.classes)?;
    grid.opacity_logits.iter_mut().for_each(|l| *l = cfg.init_opacity_logit);
    let n_op = grid.opacity_logits.len();
    let n_sem = grid.semantic_logits.len();
    let mut opt = Adam::new(n_op + n_sem, cfg.lr);

    let mut last = (0.0, 0.0, 0.0);
    for iter in 0..cfg.iters {
        let mut d_op = vec![0.0; n_op];
        let mut d_sem = vec![0.0; n_sem];
        let mut depth_loss_acc = 0.0;
        let mut sem_loss_acc = 0.0;

        // activations and backend state are rebuilt once per iteration
        let probs = grid.activated_semantics();
        let splat_set = match cfg.backend {
            Backend::Splat => Some(voxel_to_gaussians(&grid, cfg.gsv_scale)?),
            Backend::Volume => None,
        };
        let act_grid = match cfg.backend {
            Backend::Volume => Some(ActivatedGrid::from_grid(&grid)),
            Backend::Splat => None,
        };

        for k in 0..cfg.views_per_iter {
            let view = &views[(iter * cfg.views_per_iter + k) % views.len()];
            let mut og = OutputGradient::zeros(w, h, cfg.classes);

            let (out, splat_ctx) = match cfg.backend {
                Backend::Splat => {
                    let (out, ctx) = splat_forward(splat_set.as_ref().unwrap(), &view.camera, w, h, &cfg.splat);
                    (out, Some(ctx))
                }
                Backend::Volume => {
                    let out = volume_forward(act_grid.as_ref().unwrap(), &view.camera, w, h, &cfg.samples, &cfg.splat)?;
                    (out, None)
                }
            };

            if cfg.w_depth > 0.0 {
                let pred = out.depth_map(0.5);
                match depth_l1_loss(&pred, &view.sup_depth) {
                    Ok((l, g)) => {
                        depth_loss_acc += cfg.w_depth * l;
                        for (o, gv) in og.d_depth.iter_mut().zip(&g) {
                            *o += cfg.w_depth * gv;
                        }
                    }
                    Err(crate::error::Error::DegenerateInput(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if cfg.w_semantic > 0.0 {
                sem_loss_acc += semantic_background_loss(&out, &view.labels, cfg.w_semantic, &mut og);
            }

            match cfg.backend {
                Backend::Splat => {
                    let set = splat_set.as_ref().unwrap();
                    let g = splat_backward(&splat_ctx.unwrap(), set, &view.camera, &og)?;
                    chain_to_logits(&grid, &g.d_opacity, &g.d_feature, &probs, &mut d_op, &mut d_sem);
                }
                Backend::Volume => {
                    let g = volume_backward(act_grid.as_ref().unwrap(), &view.camera, w, h, &cfg.samples, &cfg.splat, &og)?;
                    chain_to_logits(&grid, &g.d_opacity, &g.d_semantics, &probs, &mut d_op, &mut d_sem);
                }
            }
        }

        let (tv, d_tv) = tv_loss(&grid);
        for (o, g) in d_op.iter_mut().zip(&d_tv) {
            *o += cfg.tv_weight * g;
        }
        last = (depth_loss_acc, sem_loss_acc, cfg.tv_weight * tv);

        let mut params: Vec<f64> = Vec::with_capacity(n_op + n_sem);
        params.extend_from_slice(&grid.opacity_logits);
        params.extend_from_slice(&grid.semantic_logits);
        let mut grads = d_op;
        grads.extend_from_slice(&d_sem);
        opt.step(&mut params, &grads);
        grid.opacity_logits.copy_from_slice(&params[..n_op]);
        grid.semantic_logits.copy_from_slice(&params[n_op..]);
    }

    // --- evaluation ---
    let gt_grid = voxelize(&scene, cfg.bounds_min, cfg.bounds_max, cfg.grid_dims)?;
    let iou = miou(&grid.hard_classes(), &gt_grid.hard_classes(), cfg.classes)?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for view in &views {
        let out = render_view(&grid, &view.camera, w, h, cfg.backend, cfg.gsv_scale, &cfg.samples, &cfg.splat)?;
        preds.push(out.depth_map(0.5));
        gts.push(view.gt_depth.clone());
    }
    let depth = pooled_depth_metrics(&preds, &gts, cfg.min_depth, cfg.max_depth)?;
    let metrics = Stage2Metrics {
        iou,
        depth,
        final_depth_loss: last.0,
        final_semantic_loss: last.1,
        final_tv_loss: last.2,
    };
    let manifest = Manifest::new("fit-stage2", cfg.seed, cfg, &metrics)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        crate::io::write_voxg(&dir.join("grid.voxg"), &grid)?;
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(Stage2Result { grid, metrics, manifest })
}
