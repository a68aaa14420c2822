//! Analytic synthetic scenes and their exact ray-cast oracle.
//!
//! Scenes are lists of labeled primitives (spheres, yawed boxes, a ground
//! plane). They supply ground-truth depth, semantics, occupancy and textured
//! images for fitting experiments.

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::{DepthMap, Image};
use crate::voxel::VoxelGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3], yaw: f64 },
    GroundPlane { height: f64 },
}

impl Primitive {
    /// Penetration depth of a point: positive inside, negative outside,
    /// zero on the surface.
    pub fn penetration(&self, p: Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => {
                radius - (p - Vector3::from(*center)).norm()
            }
            Primitive::Box { center, half_extents, yaw } => {
                let local = Rotation3::from_axis_angle(&Vector3::z_axis(), -yaw)
                    * (p - Vector3::from(*center));
                let h = Vector3::from(*half_extents);
                (h.x - local.x.abs()).min(h.y - local.y.abs()).min(h.z - local.z.abs())
            }
            Primitive::GroundPlane { height } => height - p.z,
        }
    }

    pub fn contains(&self, p: Vector3<f64>) -> bool {
        self.penetration(p) >= -1e-9
    }

    /// Smallest positive ray parameter `t` with `origin + t * dir` on the
    /// primitive surface, if any.
    pub fn ray_intersect(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Sphere { center, radius } => {
                let oc = origin - Vector3::from(*center);
                let a = dir.dot(&dir);
                let b = 2.0 * oc.dot(&dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                if t0 > 1e-9 {
                    Some(t0)
                } else if t1 > 1e-9 {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::Box { center, half_extents, yaw } => {
                let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), -yaw);
                let o = rot * (origin - Vector3::from(*center));
                let d = rot * dir;
                let h = Vector3::from(*half_extents);
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a].abs() > h[a] {
                            return None;
                        }
                    } else {
                        let mut ta = (-h[a] - o[a]) / d[a];
                        let mut tb = (h[a] - o[a]) / d[a];
                        if ta > tb {
                            std::mem::swap(&mut ta, &mut tb);
                        }
                        t_near = t_near.max(ta);
                        t_far = t_far.min(tb);
                    }
                }
                if t_near > t_far {
                    return None;
                }
                if t_near > 1e-9 {
                    Some(t_near)
                } else if t_far > 1e-9 {
                    Some(t_far)
                } else {
                    None
                }
            }
            Primitive::GroundPlane { height } => {
                if dir.z.abs() < 1e-15 {
                    return None;
                }
                let t = (height - origin.z) / dir.z;
                if t > 1e-9 {
                    Some(t)
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrimitive {
    pub primitive: Primitive,
    /// Class in [1, classes); class 0 is reserved for free space.
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<LabeledPrimitive>,
    pub classes: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("scene needs free space plus at least one class".into()));
        }
        for p in &self.primitives {
            if p.class == 0 || p.class >= self.classes {
                return Err(Error::Config(format!("primitive class {} out of range", p.class)));
            }
            match &p.primitive {
                Primitive::Sphere { center, radius } => {
                    if !(radius.is_finite() && *radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
                        return Err(Error::Config("sphere parameters must be finite and positive".into()));
                    }
                }
                Primitive::Box { center, half_extents, yaw } => {
                    if half_extents.iter().any(|h| !(h.is_finite() && *h > 0.0))
                        || center.iter().any(|c| !c.is_finite())
                        || !yaw.is_finite()
                    {
                        return Err(Error::Config("box parameters must be finite and positive".into()));
                    }
                }
                Primitive::GroundPlane { height } => {
                    if !height.is_finite() {
                        return Err(Error::Config("plane height must be finite".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Simple,
    Cluttered,
}

/// Deterministic scene generator. Primitives stay inside the default
/// desk-scale bounds and away from the rig origin.
pub fn generate_scene(seed: u64, difficulty: Difficulty) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = Vec::new();
    let ground = rng.gen_range(-0.8..-0.3);
    primitives.push(LabeledPrimitive { primitive: Primitive::GroundPlane { height: ground }, class: 1 });

    let count = match difficulty {
        Difficulty::Simple => rng.gen_range(1..=3),
        Difficulty::Cluttered => rng.gen_range(8..=15),
    };
    for _ in 0..count {
        let class = rng.gen_range(2..4usize);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let dist = rng.gen_range(1.4..4.0);
        let cx = angle.cos() * dist;
        let cy = angle.sin() * dist;
        if rng.gen_bool(0.5) {
            let radius: f64 = rng.gen_range(0.4..1.0);
            let cz = rng.gen_range((-1.0 + radius)..(3.0 - radius).max(-1.0 + radius + 1e-6));
            primitives.push(LabeledPrimitive {
                primitive: Primitive::Sphere { center: [cx, cy, cz], radius },
                class,
            });
        } else {
            let hx = rng.gen_range(0.3..0.9);
            let hy = rng.gen_range(0.3..0.9);
            let hz: f64 = rng.gen_range(0.4..0.9);
            let cz = rng.gen_range((-1.0 + hz)..(3.0 - hz).max(-1.0 + hz + 1e-6));
            let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
            primitives.push(LabeledPrimitive {
                primitive: Primitive::Box { center: [cx, cy, cz], half_extents: [hx, hy, hz], yaw },
                class,
            });
        }
    }
    SceneSpec { primitives, classes: crate::voxel::DEFAULT_CLASSES }
}

/// Exact analytic ray-cast: nearest hit per pixel. Misses get an invalid
/// depth and the free-space label.
pub fn raycast_gt(scene: &SceneSpec, camera: &Camera, width: usize, height: usize) -> (DepthMap, Vec<usize>) {
    let mut depth = DepthMap::invalid(width, height);
    let mut labels = vec![0usize; width * height];
    for y in 0..height {
        for x in 0..width {
            let (origin, dir) = camera.pixel_ray(Vector2::new(x as f64, y as f64));
            let mut best: Option<(f64, usize)> = None;
            for p in &scene.primitives {
                if let Some(t) = p.primitive.ray_intersect(origin, dir) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, p.class));
                    }
                }
            }
            if let Some((t, class)) = best {
                // dir has camera-frame z = 1, so t is the camera-frame depth
                depth.set(x, y, t);
                labels[y * width + x] = class;
            }
        }
    }
    (depth, labels)
}

/// Per-class base colors used by the textured oracle renderer.
fn class_tint(class: usize) -> Vector3<f64> {
    match class {
        1 => Vector3::new(0.45, 0.80, 0.45),
        2 => Vector3::new(0.90, 0.45, 0.30),
        3 => Vector3::new(0.35, 0.55, 0.90),
        _ => Vector3::new(0.02, 0.02, 0.05),
    }
}

/// Procedural world-space albedo. Multi-frequency so photometric losses have
/// both a wide convergence basin and a sharp minimum.
pub fn world_texture(p: Vector3<f64>) -> f64 {
    let low = (0.9 * p.x + 0.7 * p.y - 0.5 * p.z).sin();
    let mid = (2.7 * p.x - 1.9 * p.y + 2.3 * p.z + 1.3).sin();
    let high = (6.1 * p.x + 5.3 * p.y - 4.7 * p.z + 0.7).sin();
    let fine = (12.9 * p.x - 11.3 * p.y + 8.7 * p.z + 2.1).sin();
    0.55 + 0.23 * low + 0.13 * mid + 0.06 * high + 0.05 * fine
}

/// Renders an RGB image of the scene by ray casting: class tint modulated by
/// the procedural world texture. Misses render as near-black background.
pub fn shaded_image(scene: &SceneSpec, camera: &Camera, width: usize, height: usize) -> Image {
    let mut img = Image::zeros(width, height, 3);
    for y in 0..height {
        for x in 0..width {
            let (origin, dir) = camera.pixel_ray(Vector2::new(x as f64, y as f64));
            let mut best: Option<(f64, usize)> = None;
            for p in &scene.primitives {
                if let Some(t) = p.primitive.ray_intersect(origin, dir) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, p.class));
                    }
                }
            }
            let color = match best {
                Some((t, class)) => {
                    let hit = origin + dir * t;
                    class_tint(class) * world_texture(hit)
                }
                None => class_tint(0),
            };
            for c in 0..3 {
                img.set(x, y, c, color[c].clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Ground-truth voxelization: +10 opacity logit inside any primitive, -10
/// outside; semantics one-hot for the innermost containing primitive
/// (greatest penetration depth, list order breaks ties).
pub fn voxelize(scene: &SceneSpec, bounds_min: [f64; 3], bounds_max: [f64; 3], dims: [usize; 3]) -> Result<VoxelGrid> {
    scene.validate()?;
    let mut grid = VoxelGrid::new(bounds_min, bounds_max, dims, scene.classes)?;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let v = grid.vertex_index(i, j, k);
                let p = grid.vertex_position(i, j, k);
                let mut best: Option<(f64, usize)> = None;
                for lp in &scene.primitives {
                    let pen = lp.primitive.penetration(p);
                    if pen >= -1e-9 && best.map_or(true, |(bp, _)| pen > bp) {
                        best = Some((pen, lp.class));
                    }
                }
                let (logit, class) = match best {
                    Some((_, class)) => (10.0, class),
                    None => (-10.0, 0),
                };
                grid.opacity_logits[v] = logit;
                for c in 0..grid.classes {
                    grid.semantic_logits[v * grid.classes + c] = if c == class { 10.0 } else { -10.0 };
                }
            }
        }
    }
    Ok(grid)
}
