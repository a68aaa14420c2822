//! Pinhole cameras, SE(3) poses and cross-view reprojection.
//!
//! Conventions (fixed for the whole crate): right-handed frames, +z forward
//! in camera coordinates, pixel origin at the top-left with pixel centers at
//! integer coordinates, extrinsics stored camera-to-world.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Config("principal point must lie inside the image".into()));
        }
        Ok(())
    }

    /// Intrinsics for a given horizontal field of view, principal point at
    /// the image center, square pixels.
    pub fn from_fov(fov_x_deg: f64, width: usize, height: usize) -> Self {
        let f = width as f64 / (2.0 * (fov_x_deg.to_radians() / 2.0).tan());
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    /// Camera-frame ray direction through a pixel, z-component normalized to 1.
    #[inline]
    pub fn ray_dir(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from a row-major 3×3 rotation and translation, checking
    /// orthonormality.
    pub fn from_matrix(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self> {
        let r = Matrix3::new(
            rotation[0], rotation[1], rotation[2],
            rotation[3], rotation[4], rotation[5],
            rotation[6], rotation[7], rotation[8],
        );
        let rtr = r.transpose() * r;
        if (rtr - Matrix3::identity()).norm() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("rotation matrix is not orthonormal with det +1".into()));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(r),
            translation: Vector3::new(translation[0], translation[1], translation[2]),
        })
    }

    /// Camera coordinates -> world coordinates.
    #[inline]
    pub fn transform(&self, p_cam: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    /// World coordinates -> camera coordinates.
    #[inline]
    pub fn inverse_transform(&self, p_world: Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p_world - self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose { rotation: rinv, translation: -(rinv * self.translation) }
    }

    /// Composition: `(a.compose(b))(x) = a(b(x))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn yaw(angle_rad: f64) -> Self {
        Self { rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), angle_rad), translation: Vector3::zeros() }
    }
}

/// Exponential-map update with 3 rotation then 3 translation parameters:
/// `R' = exp([w]x) R`, `t' = t + v`.
pub fn se3_step(pose: &Pose, delta: &[f64; 6]) -> Pose {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    let dr = if w.norm() > 0.0 {
        Rotation3::from_scaled_axis(w)
    } else {
        Rotation3::identity()
    };
    Pose { rotation: dr * pose.rotation, translation: pose.translation + v }
}

/// A camera: intrinsics plus camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// World-space ray through a pixel: (origin, direction). The direction is
    /// scaled so a step of `depth` lands at camera-frame z = depth.
    #[inline]
    pub fn pixel_ray(&self, pixel: Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let dir = self.pose.rotation * self.intrinsics.ray_dir(pixel);
        (self.pose.translation, dir)
    }
}

/// Result of projecting a world point: pixel coordinates and camera-frame z.
/// Points at or behind the camera are invalid (never clamped).
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

impl Projection {
    #[inline]
    pub fn is_valid(&self) -> bool {
        self.depth > 0.0 && self.pixel.x.is_finite() && self.pixel.y.is_finite()
    }

    #[inline]
    pub fn in_bounds(&self, intr: &Intrinsics) -> bool {
        self.is_valid()
            && self.pixel.x >= 0.0
            && self.pixel.x < intr.width as f64
            && self.pixel.y >= 0.0
            && self.pixel.y < intr.height as f64
    }
}

/// Perspective projection of a world point into a camera.
pub fn project(camera: &Camera, point_world: Vector3<f64>) -> Projection {
    let p = camera.pose.inverse_transform(point_world);
    let depth = p.z;
    if depth <= 0.0 {
        return Projection { pixel: Vector2::new(f64::NAN, f64::NAN), depth };
    }
    let intr = &camera.intrinsics;
    Projection {
        pixel: Vector2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy),
        depth,
    }
}

/// Inverse of [`project`] for a given metric depth (camera-frame z).
pub fn unproject(camera: &Camera, pixel: Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::Precondition(format!("unproject requires depth > 0, got {depth}")));
    }
    let p_cam = camera.intrinsics.ray_dir(pixel) * depth;
    Ok(camera.pose.transform(p_cam))
}

/// 2×3 Jacobian of the pinhole projection at a camera-frame point.
#[inline]
pub fn projection_jacobian(intr: &Intrinsics, p_cam: Vector3<f64>) -> Matrix2x3<f64> {
    let z = p_cam.z;
    let z2 = z * z;
    Matrix2x3::new(
        intr.fx / z, 0.0, -intr.fx * p_cam.x / z2,
        0.0, intr.fy / z, -intr.fy * p_cam.y / z2,
    )
}

/// Per-pixel reprojection targets in another camera.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub targets: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn identity(width: usize, height: usize) -> Self {
        let mut targets = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                targets.push(Vector2::new(x as f64, y as f64));
            }
        }
        Self { width, height, targets, valid: vec![true; width * height] }
    }
}

/// Reprojects every valid pixel of camera i's depth map into camera j.
/// Pixels landing outside j's image bounds or behind j are marked invalid.
pub fn cross_view_reproject(cam_i: &Camera, cam_j: &Camera, depth_map_i: &DepthMap) -> Result<FlowField> {
    if depth_map_i.width != cam_i.width() || depth_map_i.height != cam_i.height() {
        return Err(Error::Config(format!(
            "depth map {}x{} does not match camera {}x{}",
            depth_map_i.width,
            depth_map_i.height,
            cam_i.width(),
            cam_i.height()
        )));
    }
    let (w, h) = (depth_map_i.width, depth_map_i.height);
    let mut targets = vec![Vector2::new(f64::NAN, f64::NAN); w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some(d) = depth_map_i.get(x, y) else { continue };
            let world = unproject(cam_i, Vector2::new(x as f64, y as f64), d)?;
            let proj = project(cam_j, world);
            if proj.in_bounds(&cam_j.intrinsics) {
                targets[i] = proj.pixel;
                valid[i] = true;
            }
        }
    }
    Ok(FlowField { width: w, height: h, targets, valid })
}

/// How far outside the valid sample domain a coordinate may fall before the
/// sample is invalidated rather than clamped.
const SAMPLE_CLAMP_SLACK: f64 = 0.5;

#[inline]
fn clamp_coord(v: f64, max_idx: f64) -> Option<f64> {
    if v < -SAMPLE_CLAMP_SLACK || v > max_idx + SAMPLE_CLAMP_SLACK {
        None
    } else {
        Some(v.clamp(0.0, max_idx))
    }
}

/// Bilinear interpolation of `src` at the flow targets. Coordinates within
/// half a pixel outside the bounds clamp; farther out invalidate the sample.
pub fn bilinear_sample(src: &Image, flow: &FlowField) -> (Image, Vec<bool>) {
    let mut out = Image::zeros(flow.width, flow.height, src.channels);
    let mut valid = vec![false; flow.width * flow.height];
    let max_x = src.width as f64 - 1.0;
    let max_y = src.height as f64 - 1.0;
    for i in 0..flow.targets.len() {
        if !flow.valid[i] {
            continue;
        }
        let t = flow.targets[i];
        let (Some(x), Some(y)) = (clamp_coord(t.x, max_x), clamp_coord(t.y, max_y)) else {
            continue;
        };
        valid[i] = true;
        let x0 = (x.floor() as usize).min(src.width - 1);
        let y0 = (y.floor() as usize).min(src.height - 1);
        let x1 = (x0 + 1).min(src.width - 1);
        let y1 = (y0 + 1).min(src.height - 1);
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        for c in 0..src.channels {
            let v00 = src.get(x0, y0, c);
            let v10 = src.get(x1, y0, c);
            let v01 = src.get(x0, y1, c);
            let v11 = src.get(x1, y1, c);
            let v = v00 * (1.0 - ax) * (1.0 - ay)
                + v10 * ax * (1.0 - ay)
                + v01 * (1.0 - ax) * ay
                + v11 * ax * ay;
            out.data[i * src.channels + c] = v;
        }
    }
    (out, valid)
}

/// Back-propagates a gradient w.r.t. the sampled image onto the sample
/// coordinates: returns dL/d(coord) per output pixel. Invalid samples get a
/// zero gradient; clamped coordinates are treated as interior (piecewise
/// constant beyond the clamp).
pub fn bilinear_sample_grad_coords(src: &Image, flow: &FlowField, upstream: &Image) -> Vec<Vector2<f64>> {
    assert_eq!(upstream.channels, src.channels);
    let mut grads = vec![Vector2::zeros(); flow.targets.len()];
    let max_x = src.width as f64 - 1.0;
    let max_y = src.height as f64 - 1.0;
    for i in 0..flow.targets.len() {
        if !flow.valid[i] {
            continue;
        }
        let t = flow.targets[i];
        let (Some(x), Some(y)) = (clamp_coord(t.x, max_x), clamp_coord(t.y, max_y)) else {
            continue;
        };
        // At a clamped coordinate the sample no longer varies with the
        // coordinate, so its derivative is zero along that axis.
        let free_x = t.x > 0.0 && t.x < max_x;
        let free_y = t.y > 0.0 && t.y < max_y;
        let x0 = (x.floor() as usize).min(src.width - 1);
        let y0 = (y.floor() as usize).min(src.height - 1);
        let x1 = (x0 + 1).min(src.width - 1);
        let y1 = (y0 + 1).min(src.height - 1);
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for c in 0..src.channels {
            let g = upstream.data[i * src.channels + c];
            if g == 0.0 {
                continue;
            }
            let v00 = src.get(x0, y0, c);
            let v10 = src.get(x1, y0, c);
            let v01 = src.get(x0, y1, c);
            let v11 = src.get(x1, y1, c);
            gx += g * ((v10 - v00) * (1.0 - ay) + (v11 - v01) * ay);
            gy += g * ((v01 - v00) * (1.0 - ax) + (v11 - v10) * ax);
        }
        grads[i] = Vector2::new(if free_x { gx } else { 0.0 }, if free_y { gy } else { 0.0 });
    }
    grads
}

/// Multi-camera rig: cameras in rig-local coordinates plus the ordered
/// adjacency pairs expected to share frustum overlap.
#[derive(Debug, Clone)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub adjacency: Vec<(usize, usize)>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, adjacency: Vec<(usize, usize)>) -> Result<Self> {
        let rig = Self { cameras, adjacency };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.adjacency.is_empty() && self.cameras.len() < 2 {
            return Err(Error::Config("cross-view operations need at least 2 cameras".into()));
        }
        for &(i, j) in &self.adjacency {
            if i >= self.cameras.len() || j >= self.cameras.len() || i == j {
                return Err(Error::Config(format!("invalid adjacency pair ({i}, {j})")));
            }
        }
        Ok(())
    }

    /// Surround rig: `n` cameras on a horizontal ring of the given radius,
    /// evenly yawed, all sharing one intrinsics block; adjacency links ring
    /// neighbors.
    pub fn surround(n: usize, ring_radius: f64, height: f64, fov_x_deg: f64, width: usize, h_px: usize) -> Self {
        let intr = Intrinsics::from_fov(fov_x_deg, width, h_px);
        let mut cameras = Vec::with_capacity(n);
        for k in 0..n {
            let yaw = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            // Camera +z (forward) points outward along the ring direction;
            // +y points down so the image is upright in a z-up world.
            let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
            // right x down = forward keeps the camera frame right-handed
            let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
            let down = Vector3::new(0.0, 0.0, -1.0);
            let rot = Matrix3::from_columns(&[right, down, forward]);
            let pose = Pose {
                rotation: Rotation3::from_matrix_unchecked(rot),
                translation: forward * ring_radius + Vector3::new(0.0, 0.0, height),
            };
            cameras.push(Camera::new(intr, pose));
        }
        let mut adjacency = Vec::new();
        for k in 0..n {
            adjacency.push((k, (k + 1) % n));
        }
        Self { cameras, adjacency }
    }

    /// The rig transformed by an ego (rig-to-world) pose.
    pub fn at_ego(&self, ego: &Pose) -> CameraRig {
        CameraRig {
            cameras: self
                .cameras
                .iter()
                .map(|c| Camera::new(c.intrinsics, ego.compose(&c.pose)))
                .collect(),
            adjacency: self.adjacency.clone(),
        }
    }
}
