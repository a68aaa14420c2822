//! End-to-end fitting pipelines: self-supervised depth + pose (stage 1),
//! occupancy grid fitting (stage 2), and the renderer benchmark.

pub mod bench;
pub mod stage1;
pub mod stage2;

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::Result;
use crate::geometry::CameraRig;
use crate::image::{DepthMap, Image};
use crate::io::{config_hash, write_json};
use crate::scene::{raycast_gt, shaded_image, SceneSpec};

/// Geometry of the synthetic capture rig shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigLayout {
    pub n_cameras: usize,
    pub ring_radius: f64,
    pub cam_height: f64,
    pub fov_x_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for RigLayout {
    fn default() -> Self {
        Self { n_cameras: 6, ring_radius: 0.3, cam_height: 0.3, fov_x_deg: 80.0, width: 96, height: 72 }
    }
}

impl RigLayout {
    pub fn build(&self) -> CameraRig {
        CameraRig::surround(
            self.n_cameras,
            self.ring_radius,
            self.cam_height,
            self.fov_x_deg,
            self.width,
            self.height,
        )
    }
}

/// Ray-cast images, ground-truth depth and labels for every camera of a rig.
pub struct FrameData {
    pub images: Vec<Image>,
    pub gt_depth: Vec<DepthMap>,
    pub gt_labels: Vec<Vec<usize>>,
}

pub fn synthesize_frame(scene: &SceneSpec, rig: &CameraRig, width: usize, height: usize) -> FrameData {
    let mut images = Vec::with_capacity(rig.cameras.len());
    let mut gt_depth = Vec::with_capacity(rig.cameras.len());
    let mut gt_labels = Vec::with_capacity(rig.cameras.len());
    for cam in &rig.cameras {
        images.push(shaded_image(scene, cam, width, height));
        let (d, l) = raycast_gt(scene, cam, width, height);
        gt_depth.push(d);
        gt_labels.push(l);
    }
    FrameData { images, gt_depth, gt_labels }
}

/// Coarse parameter grid decoded to full resolution by bilinear upsampling.
/// Used for per-camera log-depth fields so one parameter controls a patch of
/// pixels.
#[derive(Debug, Clone)]
pub struct ParamGrid {
    pub gw: usize,
    pub gh: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ParamGrid {
    pub fn new(width: usize, height: usize, downsample: usize, init: f64) -> Self {
        let ds = downsample.max(1);
        let gw = (width.div_ceil(ds)).max(2);
        let gh = (height.div_ceil(ds)).max(2);
        Self { gw, gh, width, height, values: vec![init; gw * gh] }
    }

    /// (node indices, bilinear weights) for an output pixel.
    #[inline]
    fn taps(&self, x: usize, y: usize) -> ([usize; 4], [f64; 4]) {
        let u = x as f64 * (self.gw - 1) as f64 / (self.width - 1).max(1) as f64;
        let v = y as f64 * (self.gh - 1) as f64 / (self.height - 1).max(1) as f64;
        let i = (u.floor() as usize).min(self.gw - 2);
        let j = (v.floor() as usize).min(self.gh - 2);
        let (fu, fv) = (u - i as f64, v - j as f64);
        let base = j * self.gw + i;
        (
            [base, base + 1, base + self.gw, base + self.gw + 1],
            [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        )
    }

    /// Full-resolution bilinear decode.
    pub fn decode(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                let (idx, w) = self.taps(x, y);
                out[y * self.width + x] = idx.iter().zip(&w).map(|(&i, &wv)| wv * self.values[i]).sum();
            }
        }
        out
    }

    /// Transpose of `decode`: accumulates full-resolution gradients into
    /// parameter-space gradients.
    pub fn scatter(&self, pixel_grads: &[f64], out: &mut [f64]) {
        assert_eq!(pixel_grads.len(), self.width * self.height);
        assert_eq!(out.len(), self.values.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let g = pixel_grads[y * self.width + x];
                if g == 0.0 {
                    continue;
                }
                let (idx, w) = self.taps(x, y);
                for (&i, &wv) in idx.iter().zip(&w) {
                    out[i] += wv * g;
                }
            }
        }
    }
}

/// Run manifest tying outputs to the exact configuration. Contains no wall
/// times so repeated runs of the same configuration are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub metrics: serde_json::Value,
}

impl Manifest {
    pub fn new<C: Serialize, M: Serialize>(kind: &str, seed: u64, config: &C, metrics: &M) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            seed,
            config_hash: config_hash(config)?,
            config: serde_json::to_value(config)?,
            metrics: serde_json::to_value(metrics)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Pooled depth metrics across several views (pixels concatenated).
pub fn pooled_depth_metrics(
    preds: &[DepthMap],
    gts: &[DepthMap],
    min_depth: f64,
    max_depth: f64,
) -> Result<crate::metrics::DepthMetrics> {
    let mut values = Vec::new();
    let mut valid = Vec::new();
    let mut gvalues = Vec::new();
    let mut gvalid = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        values.extend_from_slice(&p.values);
        valid.extend_from_slice(&p.valid);
        gvalues.extend_from_slice(&g.values);
        gvalid.extend_from_slice(&g.valid);
    }
    let n = values.len();
    let pred = DepthMap { width: n, height: 1, values, valid };
    let gt = DepthMap { width: n, height: 1, values: gvalues, valid: gvalid };
    crate::metrics::depth_metrics(&pred, &gt, min_depth, max_depth)
}

/// Median over all jointly-valid pixels of |pred - gt| / gt.
pub fn median_rel_error(preds: &[DepthMap], gts: &[DepthMap]) -> Result<f64> {
    let mut errs = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        for i in 0..p.values.len() {
            if p.valid[i] && g.valid[i] {
                errs.push((p.values[i] - g.values[i]).abs() / g.values[i]);
            }
        }
    }
    if errs.is_empty() {
        return Err(crate::error::Error::DegenerateInput("no jointly-valid pixels".into()));
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(errs[errs.len() / 2])
}
