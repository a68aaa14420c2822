//! Stage 1: self-supervised depth and ego-motion from two frames of a
//! surround rig. A temporal photometric loss warps the second frame into the
//! first through the current depth and ego-motion estimates; a cross-view
//! splatting loss renders the union of all cameras' (mask-purified) Gaussian
//! clouds into every camera. Because the rig baselines are known and metric,
//! the cross-view term pins the absolute scale that the temporal term alone
//! cannot observe.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_sample, bilinear_sample_grad_coords, cross_view_reproject, projection_jacobian,
    se3_step, Camera, CameraRig, Pose,
};
use crate::image::{DepthMap, Image, Mask};
use crate::losses::photometric_loss;
use crate::masks::{gsp_selection_masks, OverlapConfig};
use crate::metrics::DepthMetrics;
use crate::pipeline::{median_rel_error, pooled_depth_metrics, synthesize_frame, Manifest, ParamGrid, RigLayout};
use crate::scene::{generate_scene, Difficulty};
use crate::splat::{depth_map_to_gaussians, splat_backward, splat_forward, OutputGradient, RenderOptions, ScaleMap};

/// How the per-camera depth fields are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthInit {
    /// Constant depth in meters.
    Constant(f64),
    /// Ground-truth depth times a factor; diagnostic initialization used to
    /// probe scale recovery from a consistently mis-scaled starting point.
    ScaledGroundTruth(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub rig: RigLayout,
    /// Depth parameters live on a grid this many times coarser than pixels.
    pub depth_grid_downsample: usize,
    pub depth_init: DepthInit,
    /// Ground-truth ego motion between the frames: rotation vector then
    /// translation, applied as an exponential-map step from identity.
    pub ego_motion: [f64; 6],
    /// The initial ego-motion guess scales the true translation by this
    /// factor (1.0 = start at the truth).
    pub ego_init_scale: f64,
    /// Purify and drop one side of each overlap pair before building the
    /// cross-view clouds. Disabling this removes the metric-scale signal.
    pub use_masks: bool,
    pub overlap: OverlapConfig,
    pub beta: f64,
    pub w_temporal: f64,
    pub w_cross: f64,
    pub lr_depth: f64,
    /// Depth learning rate decays linearly to this value over the joint
    /// phase; the refine phase keeps the final value.
    pub lr_depth_final: f64,
    pub lr_pose: f64,
    /// Pose learning rate decays linearly to this value over the joint phase,
    /// so the final iterations settle instead of jittering around the
    /// optimum (Adam with a constant step oscillates at convergence).
    pub lr_pose_final: f64,
    pub iters_joint: usize,
    pub iters_refine: usize,
    /// Projected footprint (pixels) targeted by the per-pixel scale map of the
    /// unprojected clouds; the 3D scale grows with depth up to the 0.02 m cap.
    pub gsp_pixel_sigma: f64,
    pub splat: RenderOptions,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            seed: 0,
            difficulty: Difficulty::Simple,
            // 128x96: the finer absolute depth grid and larger focal length
            // push the median relative depth error below the grid's
            // representation floor at 96x72
            rig: RigLayout { width: 128, height: 96, ..RigLayout::default() },
            depth_grid_downsample: 4,
            depth_init: DepthInit::Constant(2.5),
            ego_motion: [0.0, 0.0, 0.06, 0.22, 0.10, 0.0],
            ego_init_scale: 1.0,
            use_masks: true,
            overlap: OverlapConfig::default(),
            beta: crate::losses::DEFAULT_PHOTOMETRIC_BETA,
            w_temporal: 1.0,
            w_cross: 1.0,
            lr_depth: 4e-2,
            lr_depth_final: 5e-3,
            lr_pose: 1e-2,
            lr_pose_final: 1e-3,
            iters_joint: 400,
            iters_refine: 150,
            gsp_pixel_sigma: 0.15,
            splat: RenderOptions::default(),
            min_depth: 0.1,
            max_depth: 12.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Metrics {
    pub init: DepthMetrics,
    pub after_joint: DepthMetrics,
    pub final_: DepthMetrics,
    pub median_rel_err_init: f64,
    pub median_rel_err: f64,
    pub pose_translation_err_init: f64,
    pub pose_translation_err: f64,
    pub final_temporal_loss: f64,
    pub final_cross_loss: f64,
}

pub struct Stage1Result {
    pub metrics: Stage1Metrics,
    pub depth_maps: Vec<DepthMap>,
    pub ego_estimate: Pose,
    pub keep_masks: Vec<Mask>,
    pub manifest: Manifest,
}

/// Log-depth clamp so Adam excursions cannot push depths out of the
/// renderable range.
const LOG_DEPTH_MIN: f64 = -3.0; // ~0.05 m
const LOG_DEPTH_MAX: f64 = 4.0; // ~55 m

struct TemporalGrads {
    /// Per camera, per pixel: dL/d(log depth).
    depth: Vec<Vec<f64>>,
}

/// Temporal photometric loss over all cameras; optionally also its analytic
/// gradient w.r.t. the per-pixel log-depths.
fn temporal_loss(
    rig: &CameraRig,
    images_t: &[Image],
    images_s: &[Image],
    ego_est: &Pose,
    depths: &[Vec<f64>],
    beta: f64,
    want_grads: bool,
) -> Result<(f64, Option<TemporalGrads>)> {
    let (w, h) = (rig.cameras[0].width(), rig.cameras[0].height());
    let mut total = 0.0;
    let mut grads = want_grads.then(|| TemporalGrads { depth: vec![vec![0.0; w * h]; rig.cameras.len()] });
    for (c, cam_t) in rig.cameras.iter().enumerate() {
        let cam_s = Camera::new(cam_t.intrinsics, ego_est.compose(&cam_t.pose));
        let depth_map = DepthMap {
            width: w,
            height: h,
            values: depths[c].clone(),
            valid: vec![true; w * h],
        };
        let flow = cross_view_reproject(cam_t, &cam_s, &depth_map)?;
        let (warped, valid) = bilinear_sample(&images_s[c], &flow);
        let (loss, d_warped) = match photometric_loss(&warped, &images_t[c], beta, Some(&valid)) {
            Ok(v) => v,
            Err(Error::DegenerateInput(_)) => continue,
            Err(e) => return Err(e),
        };
        total += loss;
        if let Some(g) = grads.as_mut() {
            let d_coords = bilinear_sample_grad_coords(&images_s[c], &flow, &d_warped);
            // p_cam_s = A (D k) + b with A = R_s^-1 R_t
            let a_mat = cam_s.pose.rotation.inverse().matrix() * cam_t.pose.rotation.matrix();
            let b_vec = cam_s
                .pose
                .rotation
                .inverse()
                .matrix()
                * (cam_t.pose.translation - cam_s.pose.translation);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let gc = d_coords[i];
                    if gc == Vector2::zeros() {
                        continue;
                    }
                    let k = cam_t.intrinsics.ray_dir(Vector2::new(x as f64, y as f64));
                    let d = depths[c][i];
                    let p_cam_s: Vector3<f64> = a_mat * (k * d) + b_vec;
                    if p_cam_s.z <= 1e-6 {
                        continue;
                    }
                    let jac = projection_jacobian(&cam_s.intrinsics, p_cam_s);
                    let dflow_dd: Vector2<f64> = jac * (a_mat * k);
                    // chain through depth = exp(log depth)
                    g.depth[c][i] += gc.dot(&dflow_dd) * d;
                }
            }
        }
    }
    Ok((total, grads))
}

struct CrossCloud {
    set: crate::gaussians::GaussianSet,
    /// (camera index, source pixel) per Gaussian.
    sources: Vec<(usize, u32)>,
}

fn build_cross_cloud(
    rig: &CameraRig,
    images: &[Image],
    depths: &[Vec<f64>],
    keeps: &[Mask],
    gsp_pixel_sigma: f64,
) -> Result<CrossCloud> {
    let (w, h) = (rig.cameras[0].width(), rig.cameras[0].height());
    let mut set = crate::gaussians::GaussianSet::with_feature_dim(3);
    let mut sources = Vec::new();
    for (c, cam) in rig.cameras.iter().enumerate() {
        let depth_map = DepthMap { width: w, height: h, values: depths[c].clone(), valid: vec![true; w * h] };
        // Scale map: keep the projected footprint near gsp_pixel_sigma pixels
        // regardless of depth so the photometric loss cannot trade scale for
        // sharpness (the 0.02 m cap comes from the splat module).
        let fx = cam.intrinsics.fx;
        let scales: Vec<Vector3<f64>> = depths[c]
            .iter()
            .map(|&d| {
                let s = (gsp_pixel_sigma * d / fx).max(1e-5);
                Vector3::new(s, s, s)
            })
            .collect();
        let (part, pixels) = match depth_map_to_gaussians(
            cam,
            &depth_map,
            &ScaleMap::PerPixel(scales),
            &images[c],
            Some(&keeps[c]),
        ) {
            Ok(v) => v,
            Err(Error::DegenerateInput(_)) => continue,
            Err(e) => return Err(e),
        };
        sources.extend(pixels.iter().map(|&p| (c, p)));
        set.extend(&part);
    }
    if set.is_empty() {
        return Err(Error::DegenerateInput("cross-view cloud is empty".into()));
    }
    Ok(CrossCloud { set, sources })
}

/// Cross-view loss: splat the union cloud into every camera, compare the
/// accumulation-normalized features against the real images where coverage
/// exceeds 0.5, and back-propagate to the per-pixel log-depths.
///
/// When keep masks are supplied the comparison is restricted to each camera's
/// *dropped* pixels. A camera's own kept cloud re-renders into itself at any
/// depth scale (a point unprojected along a ray re-splats onto the same
/// pixel), so self-covered pixels carry no metric signal — only the regions
/// re-synthesized from neighboring cameras do.
fn cross_loss(
    rig: &CameraRig,
    images: &[Image],
    depths: &[Vec<f64>],
    cloud: &CrossCloud,
    keeps: Option<&[Mask]>,
    beta: f64,
    weight: f64,
    opts: &RenderOptions,
    grads_out: &mut [Vec<f64>],
) -> Result<f64> {
    let (w, h) = (rig.cameras[0].width(), rig.cameras[0].height());
    let mut total = 0.0;
    for (c, cam) in rig.cameras.iter().enumerate() {
        let (out, ctx) = splat_forward(&cloud.set, cam, w, h, opts);
        let valid: Vec<bool> = match keeps {
            Some(ks) => out
                .accum
                .iter()
                .zip(&ks[c].data)
                .map(|(&a, &kept)| a > 0.5 && !kept)
                .collect(),
            None => out.accum.iter().map(|&a| a > 0.5).collect(),
        };
        let mut pred = Image::zeros(w, h, 3);
        for i in 0..w * h {
            if valid[i] {
                for ch in 0..3 {
                    pred.data[i * 3 + ch] = out.feature[i * 3 + ch] / out.accum[i];
                }
            }
        }
        let (loss, g_pred) = match photometric_loss(&pred, &images[c], beta, Some(&valid)) {
            Ok(v) => v,
            Err(Error::DegenerateInput(_)) => continue,
            Err(e) => return Err(e),
        };
        total += weight * loss;

        let mut og = OutputGradient::zeros(w, h, 3);
        for i in 0..w * h {
            if !valid[i] {
                continue;
            }
            let a = out.accum[i];
            let mut dot = 0.0;
            for ch in 0..3 {
                let gf = weight * g_pred.data[i * 3 + ch];
                og.d_feature[i * 3 + ch] = gf / a;
                dot += gf * pred.data[i * 3 + ch];
            }
            og.d_accum[i] = -dot / a;
        }
        let g = splat_backward(&ctx, &cloud.set, cam, &og)?;
        for (gi, &(src_cam, pix)) in cloud.sources.iter().enumerate() {
            let d_mean = g.d_mean[gi];
            if d_mean == Vector3::zeros() {
                continue;
            }
            let src = &rig.cameras[src_cam];
            let pix = pix as usize;
            let (x, y) = (pix % w, pix / w);
            let k = src.intrinsics.ray_dir(Vector2::new(x as f64, y as f64));
            let dir_world = src.pose.rotation * k;
            let d = depths[src_cam][pix];
            // mean = t_src + D * dir_world; chain through D = exp(log D)
            grads_out[src_cam][pix] += d_mean.dot(&dir_world) * d;
        }
    }
    Ok(total)
}

fn pose_from_delta(delta: &[f64; 6]) -> Pose {
    se3_step(&Pose::identity(), delta)
}

/// Diagnostic: the cross-view loss evaluated with ground-truth depth scaled
/// by each factor. A working metric anchor is minimized near scale 1.
pub fn cross_scale_curve(cfg: &Stage1Config, scales: &[f64]) -> Result<Vec<f64>> {
    let (w, h) = (cfg.rig.width, cfg.rig.height);
    let scene = generate_scene(cfg.seed, cfg.difficulty);
    let rig = cfg.rig.build();
    let frame = synthesize_frame(&scene, &rig, w, h);
    let keeps: Vec<Mask> = if cfg.use_masks {
        gsp_selection_masks(&rig, &cfg.overlap)?
    } else {
        rig.cameras.iter().map(|_| Mask::filled(w, h, true)).collect()
    };
    let mut out = Vec::new();
    for &s in scales {
        let depths: Vec<Vec<f64>> = frame
            .gt_depth
            .iter()
            .map(|d| {
                d.values
                    .iter()
                    .zip(&d.valid)
                    .map(|(&v, &ok)| if ok { v * s } else { 8.0 * s })
                    .collect()
            })
            .collect();
        let cloud = build_cross_cloud(&rig, &frame.images, &depths, &keeps, cfg.gsp_pixel_sigma)?;
        let mut sink: Vec<Vec<f64>> = vec![vec![0.0; w * h]; rig.cameras.len()];
        let keep_ref = cfg.use_masks.then_some(keeps.as_slice());
        out.push(cross_loss(&rig, &frame.images, &depths, &cloud, keep_ref, cfg.beta, 1.0, &cfg.splat, &mut sink)?);
    }
    Ok(out)
}

pub fn fit_stage1(cfg: &Stage1Config, out_dir: Option<&Path>) -> Result<Stage1Result> {
    let layout = &cfg.rig;
    let (w, h) = (layout.width, layout.height);
    let scene = generate_scene(cfg.seed, cfg.difficulty);
    let rig = layout.build();
    let ego_gt = pose_from_delta(&cfg.ego_motion);
    let rig_s = rig.at_ego(&ego_gt);
    let frame_t = synthesize_frame(&scene, &rig, w, h);
    let frame_s = synthesize_frame(&scene, &rig_s, w, h);

    let keeps: Vec<Mask> = if cfg.use_masks {
        gsp_selection_masks(&rig, &cfg.overlap)?
    } else {
        rig.cameras.iter().map(|_| Mask::filled(w, h, true)).collect()
    };

    // --- parameters ---
    let mut grids: Vec<ParamGrid> = rig
        .cameras
        .iter()
        .enumerate()
        .map(|(c, _)| {
            let mut g = ParamGrid::new(w, h, cfg.depth_grid_downsample, 0.0);
            match cfg.depth_init {
                DepthInit::Constant(d) => {
                    g.values.iter_mut().for_each(|v| *v = d.ln());
                }
                DepthInit::ScaledGroundTruth(s) => {
                    let gt = &frame_t.gt_depth[c];
                    for gy in 0..g.gh {
                        for gx in 0..g.gw {
                            let px = (gx * (w - 1)) / (g.gw - 1).max(1);
                            let py = (gy * (h - 1)) / (g.gh - 1).max(1);
                            let d = gt.get(px, py).unwrap_or(6.0);
                            g.values[gy * g.gw + gx] = (d * s).ln();
                        }
                    }
                }
            }
            g
        })
        .collect();
    let n_depth_params: usize = grids.iter().map(|g| g.values.len()).sum();

    let ego_init = {
        let mut d = cfg.ego_motion;
        d[3] *= cfg.ego_init_scale;
        d[4] *= cfg.ego_init_scale;
        d[5] *= cfg.ego_init_scale;
        pose_from_delta(&d)
    };
    let mut pose_params = [0.0f64; 6];

    let mut opt_depth = Adam::new(n_depth_params, cfg.lr_depth);
    let mut opt_pose = Adam::new(6, cfg.lr_pose);

    let decode_all = |grids: &[ParamGrid]| -> Vec<Vec<f64>> {
        grids
            .iter()
            .map(|g| g.decode().iter().map(|&l| l.exp()).collect())
            .collect()
    };
    let to_depth_maps = |depths: &[Vec<f64>]| -> Vec<DepthMap> {
        depths
            .iter()
            .map(|d| DepthMap { width: w, height: h, values: d.clone(), valid: vec![true; w * h] })
            .collect()
    };

    let depths0 = decode_all(&grids);
    let maps0 = to_depth_maps(&depths0);
    let metrics_init = pooled_depth_metrics(&maps0, &frame_t.gt_depth, cfg.min_depth, cfg.max_depth)?;
    let median_init = median_rel_error(&maps0, &frame_t.gt_depth)?;
    let pose_err_init = (ego_init.translation - ego_gt.translation).norm();

    let mut metrics_joint = metrics_init;
    let mut last_temporal = 0.0;
    let mut last_cross = 0.0;
    let fd_step = 1e-4;

    for iter in 0..cfg.iters_joint + cfg.iters_refine {
        let refine = iter >= cfg.iters_joint;
        let frac = (iter as f64 / cfg.iters_joint.max(1) as f64).min(1.0);
        opt_depth.lr = cfg.lr_depth + frac * (cfg.lr_depth_final - cfg.lr_depth);
        opt_pose.lr = cfg.lr_pose + frac * (cfg.lr_pose_final - cfg.lr_pose);
        let depths = decode_all(&grids);
        let ego_est = se3_step(&ego_init, &pose_params);

        let mut pixel_grads: Vec<Vec<f64>> = vec![vec![0.0; w * h]; rig.cameras.len()];

        // temporal term: analytic depth gradients
        if cfg.w_temporal > 0.0 {
            let (lt, tg) = temporal_loss(&rig, &frame_t.images, &frame_s.images, &ego_est, &depths, cfg.beta, true)?;
            last_temporal = lt;
            let tg = tg.expect("gradients requested");
            for (acc, g) in pixel_grads.iter_mut().zip(&tg.depth) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += cfg.w_temporal * v;
                }
            }
        }

        // pose gradients by central finite differences over the 6 increment
        // components (the temporal term is the only pose-dependent one)
        if !refine && cfg.w_temporal > 0.0 {
            let mut pose_grad = [0.0f64; 6];
            for k in 0..6 {
                let mut p = pose_params;
                p[k] += fd_step;
                let (lp, _) = temporal_loss(
                    &rig,
                    &frame_t.images,
                    &frame_s.images,
                    &se3_step(&ego_init, &p),
                    &depths,
                    cfg.beta,
                    false,
                )?;
                p[k] -= 2.0 * fd_step;
                let (lm, _) = temporal_loss(
                    &rig,
                    &frame_t.images,
                    &frame_s.images,
                    &se3_step(&ego_init, &p),
                    &depths,
                    cfg.beta,
                    false,
                )?;
                pose_grad[k] = cfg.w_temporal * (lp - lm) / (2.0 * fd_step);
            }
            opt_pose.step(&mut pose_params, &pose_grad);
        }

        // cross-view term: metric anchor from the rig baselines
        if !refine && cfg.w_cross > 0.0 {
            let cloud = build_cross_cloud(&rig, &frame_t.images, &depths, &keeps, cfg.gsp_pixel_sigma)?;
            last_cross = cross_loss(
                &rig,
                &frame_t.images,
                &depths,
                &cloud,
                cfg.use_masks.then_some(keeps.as_slice()),
                cfg.beta,
                cfg.w_cross,
                &cfg.splat,
                &mut pixel_grads,
            )?;
        }

        // scatter pixel-space gradients to the parameter grids and step
        let mut grad_flat = vec![0.0; n_depth_params];
        let mut offset = 0;
        for (g, pg) in grids.iter().zip(&pixel_grads) {
            g.scatter(pg, &mut grad_flat[offset..offset + g.values.len()]);
            offset += g.values.len();
        }
        let mut param_flat: Vec<f64> = grids.iter().flat_map(|g| g.values.iter().copied()).collect();
        opt_depth.step(&mut param_flat, &grad_flat);
        let mut offset = 0;
        for g in grids.iter_mut() {
            let n = g.values.len();
            for (v, p) in g.values.iter_mut().zip(&param_flat[offset..offset + n]) {
                *v = p.clamp(LOG_DEPTH_MIN, LOG_DEPTH_MAX);
            }
            offset += n;
        }

        if iter + 1 == cfg.iters_joint {
            let depths = decode_all(&grids);
            let maps = to_depth_maps(&depths);
            metrics_joint = pooled_depth_metrics(&maps, &frame_t.gt_depth, cfg.min_depth, cfg.max_depth)?;
        }
    }

    let depths = decode_all(&grids);
    let depth_maps = to_depth_maps(&depths);
    let ego_estimate = se3_step(&ego_init, &pose_params);
    let metrics_final = pooled_depth_metrics(&depth_maps, &frame_t.gt_depth, cfg.min_depth, cfg.max_depth)?;
    let median_final = median_rel_error(&depth_maps, &frame_t.gt_depth)?;
    let metrics = Stage1Metrics {
        init: metrics_init,
        after_joint: metrics_joint,
        final_: metrics_final,
        median_rel_err_init: median_init,
        median_rel_err: median_final,
        pose_translation_err_init: pose_err_init,
        pose_translation_err: (ego_estimate.translation - ego_gt.translation).norm(),
        final_temporal_loss: last_temporal,
        final_cross_loss: last_cross,
    };
    let manifest = Manifest::new("fit-stage1", cfg.seed, cfg, &metrics)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (c, dm) in depth_maps.iter().enumerate() {
            crate::io::write_depth_pfm(&dir.join(format!("depth_cam{c}.pfm")), dm)?;
        }
        for (c, m) in keeps.iter().enumerate() {
            crate::io::write_pgm_mask(&dir.join(format!("keep_cam{c}.pgm")), m)?;
        }
        manifest.write(&dir.join("manifest.json"))?;
    }

    Ok(Stage1Result { metrics, depth_maps, ego_estimate, keep_masks: keeps, manifest })
}
