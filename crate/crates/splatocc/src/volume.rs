//! Ray-marched volume renderer over the voxel-vertex grid. Shares the
//! compositing contract of the splat renderer (front-to-back over blending,
//! alpha-blended camera-frame depth, accumulated opacity) so the two paths
//! are directly comparable.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::splat::{OutputGradient, RenderOptions, RenderOutput};
use crate::voxel::VoxelGrid;

/// Scale turning activated opacity into an extinction coefficient, 1/m.
pub const EXTINCTION_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RaySamplingConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    /// Jitter each sample uniformly within its bin (seeded, deterministic).
    pub stratified: bool,
    pub seed: u64,
}

impl Default for RaySamplingConfig {
    fn default() -> Self {
        Self { samples_per_ray: 128, near: 0.05, far: 12.0, stratified: false, seed: 0 }
    }
}

impl RaySamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray == 0 {
            return Err(Error::Config("samples_per_ray must be positive".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Config("require 0 < near < far".into()));
        }
        Ok(())
    }
}

/// Voxel grid with activations already applied: per-vertex opacity in (0,1)
/// and per-vertex class probabilities. Precomputed once per render so the
/// sampler stays cheap.
#[derive(Debug, Clone)]
pub struct ActivatedGrid {
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub dims: [usize; 3],
    pub classes: usize,
    pub opacity: Vec<f64>,
    /// N×C, vertex-major.
    pub semantics: Vec<f64>,
    spacing: Vector3<f64>,
}

impl ActivatedGrid {
    pub fn from_grid(grid: &VoxelGrid) -> Self {
        Self {
            bounds_min: grid.bounds_min,
            bounds_max: grid.bounds_max,
            dims: grid.dims,
            classes: grid.classes,
            opacity: grid.activated_opacity(),
            semantics: grid.activated_semantics(),
            spacing: grid.spacing(),
        }
    }

    /// Directly from activated values; used by tests and the backward chain.
    pub fn from_values(
        bounds_min: [f64; 3],
        bounds_max: [f64; 3],
        dims: [usize; 3],
        classes: usize,
        opacity: Vec<f64>,
        semantics: Vec<f64>,
    ) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if opacity.len() != n || semantics.len() != n * classes {
            return Err(Error::Contract("activated value lengths do not match dims".into()));
        }
        let spacing = Vector3::new(
            (bounds_max[0] - bounds_min[0]) / (dims[0] - 1) as f64,
            (bounds_max[1] - bounds_min[1]) / (dims[1] - 1) as f64,
            (bounds_max[2] - bounds_min[2]) / (dims[2] - 1) as f64,
        );
        Ok(Self { bounds_min, bounds_max, dims, classes, opacity, semantics, spacing })
    }

    pub fn vertex_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Corner vertex indices and trilinear weights for a point, or `None`
    /// outside the bounds (treated as empty space).
    #[inline]
    pub fn trilinear_weights(&self, p: Vector3<f64>) -> Option<([usize; 8], [f64; 8])> {
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let u = (p[a] - self.bounds_min[a]) / self.spacing[a];
            if u < 0.0 || u > (self.dims[a] - 1) as f64 {
                return None;
            }
            let i = (u.floor() as usize).min(self.dims[a] - 2);
            cell[a] = i;
            frac[a] = u - i as f64;
        }
        let (nx, ny) = (self.dims[0], self.dims[1]);
        let base = (cell[2] * ny + cell[1]) * nx + cell[0];
        let dz = nx * ny;
        let idx = [
            base,
            base + 1,
            base + nx,
            base + nx + 1,
            base + dz,
            base + dz + 1,
            base + dz + nx,
            base + dz + nx + 1,
        ];
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let w = [
            (1.0 - fx) * (1.0 - fy) * (1.0 - fz),
            fx * (1.0 - fy) * (1.0 - fz),
            (1.0 - fx) * fy * (1.0 - fz),
            fx * fy * (1.0 - fz),
            (1.0 - fx) * (1.0 - fy) * fz,
            fx * (1.0 - fy) * fz,
            (1.0 - fx) * fy * fz,
            fx * fy * fz,
        ];
        Some((idx, w))
    }

    /// Trilinearly interpolated activated opacity; zero outside the bounds.
    /// Fills `probs` with interpolated class probabilities.
    #[inline]
    pub fn sample(&self, p: Vector3<f64>, probs: &mut [f64]) -> f64 {
        probs.iter_mut().for_each(|v| *v = 0.0);
        let Some((idx, w)) = self.trilinear_weights(p) else {
            return 0.0;
        };
        let mut sigma = 0.0;
        for (&v, &wv) in idx.iter().zip(&w) {
            sigma += wv * self.opacity[v];
            let row = &self.semantics[v * self.classes..(v + 1) * self.classes];
            for (o, s) in probs.iter_mut().zip(row) {
                *o += wv * s;
            }
        }
        sigma
    }
}

#[inline]
fn sample_depths(cfg: &RaySamplingConfig, ray_index: u64, out: &mut [f64]) {
    let delta = (cfg.far - cfg.near) / cfg.samples_per_ray as f64;
    if cfg.stratified {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(ray_index));
        for (i, t) in out.iter_mut().enumerate() {
            *t = cfg.near + (i as f64 + rng.gen::<f64>()) * delta;
        }
    } else {
        for (i, t) in out.iter_mut().enumerate() {
            *t = cfg.near + (i as f64 + 0.5) * delta;
        }
    }
}

/// Ray-marched forward render with the same output contract as
/// [`crate::splat::splat_forward`]. `alpha_cutoff` skips per-sample alphas
/// below the threshold and `transmittance_floor` terminates rays early.
pub fn volume_forward(
    grid: &ActivatedGrid,
    camera: &Camera,
    width: usize,
    height: usize,
    cfg: &RaySamplingConfig,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    cfg.validate()?;
    let channels = grid.classes;
    let delta = (cfg.far - cfg.near) / cfg.samples_per_ray as f64;

    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut feat = vec![0.0; width * channels];
            let mut depth = vec![0.0; width];
            let mut accum = vec![0.0; width];
            let mut probs = vec![0.0; channels];
            let mut ts = vec![0.0; cfg.samples_per_ray];
            for x in 0..width {
                let (origin, dir) = camera.pixel_ray(Vector2::new(x as f64, y as f64));
                let delta_len = delta * dir.norm();
                sample_depths(cfg, (y * width + x) as u64, &mut ts);
                let mut transmittance = 1.0;
                for &t in ts.iter() {
                    let sigma = grid.sample(origin + dir * t, &mut probs);
                    if sigma <= 0.0 {
                        continue;
                    }
                    let alpha = 1.0 - (-EXTINCTION_SCALE * sigma * delta_len).exp();
                    if alpha < opts.alpha_cutoff {
                        continue;
                    }
                    let w = alpha * transmittance;
                    for (o, p) in feat[x * channels..(x + 1) * channels].iter_mut().zip(&probs) {
                        *o += w * p;
                    }
                    depth[x] += w * t;
                    accum[x] += w;
                    transmittance *= 1.0 - alpha;
                    if transmittance < opts.transmittance_floor {
                        break;
                    }
                }
                if opts.normalize_depth && accum[x] > 0.0 {
                    depth[x] /= accum[x];
                }
            }
            (feat, depth, accum)
        })
        .collect();

    let mut out = RenderOutput {
        width,
        height,
        channels,
        feature: Vec::with_capacity(width * height * channels),
        depth: Vec::with_capacity(width * height),
        accum: Vec::with_capacity(width * height),
    };
    for (feat, depth, accum) in rows {
        out.feature.extend(feat);
        out.depth.extend(depth);
        out.accum.extend(accum);
    }
    Ok(out)
}

/// Gradients w.r.t. the per-vertex ACTIVATED values (opacity in (0,1) and
/// class probabilities). Chaining through sigmoid/softmax is the caller's
/// responsibility, mirroring the splat backward contract.
#[derive(Debug, Clone)]
pub struct VolumeGradients {
    pub d_opacity: Vec<f64>,
    pub d_semantics: Vec<f64>,
}

/// Replays the rays sequentially (deterministic accumulation order) and
/// back-propagates the upstream output gradient to the grid vertices.
pub fn volume_backward(
    grid: &ActivatedGrid,
    camera: &Camera,
    width: usize,
    height: usize,
    cfg: &RaySamplingConfig,
    opts: &RenderOptions,
    grad_out: &OutputGradient,
) -> Result<VolumeGradients> {
    cfg.validate()?;
    let channels = grid.classes;
    if grad_out.d_feature.len() != width * height * channels
        || grad_out.d_depth.len() != width * height
        || grad_out.d_accum.len() != width * height
    {
        return Err(Error::Contract("output gradient shape mismatch".into()));
    }
    let delta = (cfg.far - cfg.near) / cfg.samples_per_ray as f64;
    let mut grads = VolumeGradients {
        d_opacity: vec![0.0; grid.vertex_count()],
        d_semantics: vec![0.0; grid.vertex_count() * channels],
    };

    // Per-sample replay buffers.
    struct SampleRec {
        t: f64,
        alpha: f64,
        w: f64,
        sigma: f64,
        delta_len: f64,
        corners: [usize; 8],
        cw: [f64; 8],
        probs: Vec<f64>,
    }

    let mut probs = vec![0.0; channels];
    let mut ts = vec![0.0; cfg.samples_per_ray];
    let mut recs: Vec<SampleRec> = Vec::with_capacity(cfg.samples_per_ray);
    for y in 0..height {
        for x in 0..width {
            let pix = y * width + x;
            let g_feature = &grad_out.d_feature[pix * channels..(pix + 1) * channels];
            let mut g_depth = grad_out.d_depth[pix];
            let mut g_accum = grad_out.d_accum[pix];
            if g_depth == 0.0 && g_accum == 0.0 && g_feature.iter().all(|g| *g == 0.0) {
                continue;
            }

            // forward replay
            recs.clear();
            let (origin, dir) = camera.pixel_ray(Vector2::new(x as f64, y as f64));
            let delta_len = delta * dir.norm();
            sample_depths(cfg, (y * width + x) as u64, &mut ts);
            let mut transmittance = 1.0;
            for &t in ts.iter() {
                let p = origin + dir * t;
                let Some((corners, cw)) = grid.trilinear_weights(p) else {
                    continue;
                };
                let mut sigma = 0.0;
                probs.iter_mut().for_each(|v| *v = 0.0);
                for (&v, &wv) in corners.iter().zip(&cw) {
                    sigma += wv * grid.opacity[v];
                    let row = &grid.semantics[v * channels..(v + 1) * channels];
                    for (o, s) in probs.iter_mut().zip(row) {
                        *o += wv * s;
                    }
                }
                if sigma <= 0.0 {
                    continue;
                }
                let alpha = 1.0 - (-EXTINCTION_SCALE * sigma * delta_len).exp();
                if alpha < opts.alpha_cutoff {
                    continue;
                }
                let w = alpha * transmittance;
                recs.push(SampleRec { t, alpha, w, sigma, delta_len, corners, cw, probs: probs.clone() });
                transmittance *= 1.0 - alpha;
                if transmittance < opts.transmittance_floor {
                    break;
                }
            }
            if recs.is_empty() {
                continue;
            }
            if opts.normalize_depth {
                let accum: f64 = recs.iter().map(|r| r.w).sum();
                if accum > 0.0 {
                    let depth_un: f64 = recs.iter().map(|r| r.w * r.t).sum();
                    let gd = g_depth;
                    g_depth = gd / accum;
                    g_accum -= gd * depth_un / (accum * accum);
                }
            }

            // back-to-front suffix pass, same recurrence as the splat path
            let mut suffix = 0.0f64;
            for r in recs.iter().rev() {
                let t_before = r.w / r.alpha;
                let mut s_i = g_accum + g_depth * r.t;
                for (gf, c) in g_feature.iter().zip(&r.probs) {
                    s_i += gf * c;
                }
                let mut d_alpha = t_before * s_i;
                if suffix != 0.0 {
                    d_alpha -= suffix / (1.0 - r.alpha);
                }
                suffix += r.w * s_i;

                // d alpha / d sigma = k * delta_len * exp(-k sigma delta_len)
                let d_sigma = d_alpha
                    * EXTINCTION_SCALE
                    * r.delta_len
                    * (-EXTINCTION_SCALE * r.sigma * r.delta_len).exp();
                for (&v, &wv) in r.corners.iter().zip(&r.cw) {
                    grads.d_opacity[v] += wv * d_sigma;
                    let row = &mut grads.d_semantics[v * channels..(v + 1) * channels];
                    for (o, gf) in row.iter_mut().zip(g_feature) {
                        *o += wv * gf * r.w;
                    }
                }
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn unit_grid(dims: [usize; 3], classes: usize) -> VoxelGrid {
        VoxelGrid::new([0.0; 3], [1.0, 1.0, 1.0], dims, classes).unwrap()
    }

    #[test]
    fn trilinear_exact_at_vertices() {
        let mut g = unit_grid([3, 3, 3], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for l in g.opacity_logits.iter_mut() {
            *l = rng.gen_range(-2.0..2.0);
        }
        for l in g.semantic_logits.iter_mut() {
            *l = rng.gen_range(-2.0..2.0);
        }
        let a = ActivatedGrid::from_grid(&g);
        let mut probs = vec![0.0; 2];
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    let v = g.vertex_index(i, j, k);
                    let sigma = a.sample(g.vertex_position(i, j, k), &mut probs);
                    assert_relative_eq!(sigma, a.opacity[v], epsilon = 1e-12);
                    assert_relative_eq!(probs[0], a.semantics[v * 2], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn trilinear_cell_center_is_corner_mean() {
        let mut g = unit_grid([2, 2, 2], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for l in g.opacity_logits.iter_mut() {
            *l = rng.gen_range(-2.0..2.0);
        }
        let a = ActivatedGrid::from_grid(&g);
        let mut probs = vec![0.0; 2];
        let sigma = a.sample(Vector3::new(0.5, 0.5, 0.5), &mut probs);
        let mean: f64 = a.opacity.iter().sum::<f64>() / 8.0;
        assert_relative_eq!(sigma, mean, epsilon = 1e-12);
    }

    #[test]
    fn trilinear_matches_scalar_oracle() {
        let mut g = unit_grid([4, 3, 5], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in g.opacity_logits.iter_mut() {
            *l = rng.gen_range(-2.0..2.0);
        }
        let a = ActivatedGrid::from_grid(&g);
        let mut probs = vec![0.0; 2];
        for _ in 0..200 {
            let p = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let got = a.sample(p, &mut probs);
            // straightforward nested-lerp oracle
            let u = [p.x * 3.0, p.y * 2.0, p.z * 4.0];
            let c = [
                (u[0].floor() as usize).min(2),
                (u[1].floor() as usize).min(1),
                (u[2].floor() as usize).min(3),
            ];
            let f = [u[0] - c[0] as f64, u[1] - c[1] as f64, u[2] - c[2] as f64];
            let at = |di: usize, dj: usize, dk: usize| a.opacity[g.vertex_index(c[0] + di, c[1] + dj, c[2] + dk)];
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let want = lerp(
                lerp(lerp(at(0, 0, 0), at(1, 0, 0), f[0]), lerp(at(0, 1, 0), at(1, 1, 0), f[0]), f[1]),
                lerp(lerp(at(0, 0, 1), at(1, 0, 1), f[0]), lerp(at(0, 1, 1), at(1, 1, 1), f[0]), f[1]),
                f[2],
            );
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn outside_bounds_is_empty() {
        let g = unit_grid([2, 2, 2], 2);
        let a = ActivatedGrid::from_grid(&g);
        let mut probs = vec![0.0; 2];
        assert_eq!(a.sample(Vector3::new(-0.1, 0.5, 0.5), &mut probs), 0.0);
        assert_eq!(a.sample(Vector3::new(0.5, 0.5, 1.1), &mut probs), 0.0);
        assert!(probs.iter().all(|&p| p == 0.0));
    }

    fn look_forward_camera(w: usize, h: usize) -> Camera {
        let intr = Intrinsics::from_fov(60.0, w, h);
        Camera::new(intr, Pose::identity())
    }

    #[test]
    fn homogeneous_slab_matches_beer_lambert() {
        // camera inside a big constant-density grid; every sample lands inside
        let mut g = VoxelGrid::new([-20.0, -20.0, -20.0], [20.0, 20.0, 20.0], [5, 5, 5], 2).unwrap();
        let logit = 0.7f64;
        for l in g.opacity_logits.iter_mut() {
            *l = logit;
        }
        let a = ActivatedGrid::from_grid(&g);
        let cam = look_forward_camera(9, 9);
        let cfg = RaySamplingConfig { samples_per_ray: 64, near: 0.1, far: 5.0, stratified: false, seed: 0 };
        let opts = RenderOptions { alpha_cutoff: 0.0, transmittance_floor: 0.0, ..Default::default() };
        let out = volume_forward(&a, &cam, 9, 9, &cfg, &opts).unwrap();
        let sigma = crate::voxel::sigmoid(logit);
        for y in 0..9 {
            for x in 0..9 {
                let (_, dir) = cam.pixel_ray(Vector2::new(x as f64, y as f64));
                let want = 1.0 - (-EXTINCTION_SCALE * sigma * (cfg.far - cfg.near) * dir.norm()).exp();
                assert_relative_eq!(out.accum[y * 9 + x], want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn empty_grid_renders_nothing() {
        let mut g = VoxelGrid::new([-5.0; 3], [5.0; 3], [4, 4, 4], 3).unwrap();
        for l in g.opacity_logits.iter_mut() {
            *l = -20.0;
        }
        let a = ActivatedGrid::from_grid(&g);
        let cam = look_forward_camera(8, 8);
        let out = volume_forward(&a, &cam, 8, 8, &RaySamplingConfig::default(), &RenderOptions::default()).unwrap();
        assert!(out.accum.iter().all(|&v| v < 1e-6));
    }

    #[test]
    fn accum_bounded_and_deterministic() {
        let mut g = VoxelGrid::new([-3.0; 3], [3.0; 3], [6, 6, 6], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in g.opacity_logits.iter_mut() {
            *l = rng.gen_range(-3.0..3.0);
        }
        let a = ActivatedGrid::from_grid(&g);
        let cam = look_forward_camera(16, 12);
        let cfg = RaySamplingConfig { stratified: true, seed: 7, ..Default::default() };
        let o1 = volume_forward(&a, &cam, 16, 12, &cfg, &RenderOptions::default()).unwrap();
        let o2 = volume_forward(&a, &cam, 16, 12, &cfg, &RenderOptions::default()).unwrap();
        assert_eq!(o1, o2);
        assert!(o1.accum.iter().all(|&v| (0.0..=1.0 + 1e-9).contains(&v)));
    }

    #[test]
    fn sharp_boundary_depth_converges_with_refinement() {
        // opaque half-space z >= 2 sampled on a fine grid; blended depth of
        // the center ray should approach 2 as sampling refines
        let mut g = VoxelGrid::new([-4.0, -4.0, 0.0], [4.0, 4.0, 4.0], [5, 5, 81], 2).unwrap();
        for k in 0..81 {
            let z = k as f64 * 0.05;
            for j in 0..5 {
                for i in 0..5 {
                    let v = g.vertex_index(i, j, k);
                    g.opacity_logits[v] = if z >= 2.0 { 30.0 } else { -30.0 };
                }
            }
        }
        let a = ActivatedGrid::from_grid(&g);
        let cam = look_forward_camera(5, 5);
        let center = 2 * 5 + 2;
        let opts = RenderOptions { normalize_depth: true, ..Default::default() };
        let render = |s: usize| {
            let cfg = RaySamplingConfig { samples_per_ray: s, near: 0.1, far: 4.0, stratified: false, seed: 0 };
            volume_forward(&a, &cam, 5, 5, &cfg, &opts).unwrap().depth[center]
        };
        let reference = render(8192);
        let errs: Vec<f64> = [32usize, 128, 512].iter().map(|&s| (render(s) - reference).abs()).collect();
        assert!(errs[2] < errs[0], "refinement did not converge: {errs:?}");
        // quadrature error is first-order in the step (~7.6mm at 512 samples)
        assert!(errs[2] < 0.03, "refined depth error {} too large", errs[2]);
        // the converged blended depth sits at the boundary, within the
        // extinction decay length past z = 2
        assert!(reference > 1.95 && reference < 2.25, "reference depth {reference}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut g = VoxelGrid::new([-1.0; 3], [1.0; 3], [3, 3, 3], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for l in g.opacity_logits.iter_mut() {
            *l = rng.gen_range(-1.0..1.0);
        }
        for l in g.semantic_logits.iter_mut() {
            *l = rng.gen_range(-1.0..1.0);
        }
        let a = ActivatedGrid::from_grid(&g);
        let (w, h) = (6, 5);
        let cam = look_forward_camera(w, h);
        let cfg = RaySamplingConfig { samples_per_ray: 24, near: 0.2, far: 2.5, stratified: false, seed: 0 };
        let opts = RenderOptions::smooth();

        let mut grad = OutputGradient::zeros(w, h, 2);
        for v in grad.d_feature.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in grad.d_depth.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in grad.d_accum.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let loss = |a: &ActivatedGrid| -> f64 {
            let out = volume_forward(a, &cam, w, h, &cfg, &opts).unwrap();
            let mut l = 0.0;
            for i in 0..out.feature.len() {
                l += out.feature[i] * grad.d_feature[i];
            }
            for i in 0..out.depth.len() {
                l += out.depth[i] * grad.d_depth[i] + out.accum[i] * grad.d_accum[i];
            }
            l
        };
        let grads = volume_backward(&a, &cam, w, h, &cfg, &opts, &grad).unwrap();
        let step = 1e-5;
        let check = |analytic: f64, fd: f64| {
            let denom = analytic.abs().max(fd.abs());
            if denom < 1e-6 {
                assert!((analytic - fd).abs() <= 1e-6);
            } else {
                assert!((analytic - fd).abs() / denom <= 1e-3, "mismatch {analytic} vs {fd}");
            }
        };
        for v in 0..a.vertex_count() {
            let mut p = a.clone();
            p.opacity[v] += step;
            let mut m = a.clone();
            m.opacity[v] -= step;
            check(grads.d_opacity[v], (loss(&p) - loss(&m)) / (2.0 * step));
            for c in 0..2 {
                let mut p = a.clone();
                p.semantics[v * 2 + c] += step;
                let mut m = a.clone();
                m.semantics[v * 2 + c] -= step;
                check(grads.d_semantics[v * 2 + c], (loss(&p) - loss(&m)) / (2.0 * step));
            }
        }
    }
}
