//! Forward alpha-blend splatting of a Gaussian set into a camera, plus the
//! analytic backward pass for the parameters the toolkit optimizes (opacity,
//! feature, 3D mean).
//!
//! Two rasterization paths share the same math: a 16x16-tile path that
//! carries the performance story, and a naive every-Gaussian-vs-every-pixel
//! reference kept as the correctness oracle.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::{build_covariance, GaussianSet, ProjectedGaussian};
use crate::geometry::{projection_jacobian, unproject, Camera, Intrinsics};
use crate::image::{DepthMap, Image, Mask};
use crate::voxel::VoxelGrid;

pub const TILE_SIZE: usize = 16;
/// Upper bound on GSP per-Gaussian scale in meters.
pub const MAX_GSP_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderOptions {
    /// Near-plane cull distance for Gaussian means.
    pub near: f64,
    /// Contributions with effective alpha below this are skipped.
    pub alpha_cutoff: f64,
    /// Early per-pixel termination once transmittance drops below this.
    pub transmittance_floor: f64,
    /// Added to the diagonal of the 2D covariance before inversion, in px^2.
    pub cov_reg: f64,
    /// Divide blended depth by accumulated opacity where accum > 0.
    pub normalize_depth: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            near: 0.05,
            alpha_cutoff: 1.0 / 255.0,
            transmittance_floor: 1e-4,
            cov_reg: 0.3,
            normalize_depth: false,
        }
    }
}

impl RenderOptions {
    /// Disables the discrete cutoffs; used by gradient checks so the forward
    /// map is smooth in every parameter.
    pub fn smooth() -> Self {
        Self { alpha_cutoff: 0.0, transmittance_floor: 0.0, ..Self::default() }
    }
}

/// Rendered feature / depth / accumulated-opacity images.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// H×W×C blended features.
    pub feature: Vec<f64>,
    /// H×W blended camera-frame depth.
    pub depth: Vec<f64>,
    /// H×W accumulated opacity.
    pub accum: Vec<f64>,
}

impl RenderOutput {
    fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            feature: vec![0.0; width * height * channels],
            depth: vec![0.0; width * height],
            accum: vec![0.0; width * height],
        }
    }

    pub fn feature_image(&self) -> Image {
        Image { width: self.width, height: self.height, channels: self.channels, data: self.feature.clone() }
    }

    pub fn depth_map(&self, min_accum: f64) -> DepthMap {
        let valid: Vec<bool> = self.accum.iter().map(|&a| a > min_accum).collect();
        DepthMap { width: self.width, height: self.height, values: self.depth.clone(), valid }
    }
}

/// Per-pixel ordered contribution lists retained for the backward pass.
#[derive(Debug, Clone)]
pub struct RenderContext {
    pub width: usize,
    pub height: usize,
    pub n_gaussians: usize,
    pub options: RenderOptions,
    /// Per pixel: (gaussian index, blend weight) in compositing order.
    pub contributions: Vec<Vec<(u32, f64)>>,
}

/// Gradients w.r.t. the optimized per-Gaussian parameters.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub d_opacity: Vec<f64>,
    /// N×C, row per Gaussian.
    pub d_feature: Vec<f64>,
    pub d_mean: Vec<Vector3<f64>>,
}

impl GradientSet {
    pub fn zeros(n: usize, channels: usize) -> Self {
        Self { d_opacity: vec![0.0; n], d_feature: vec![0.0; n * channels], d_mean: vec![Vector3::zeros(); n] }
    }
}

/// Upstream gradients w.r.t. a [`RenderOutput`].
#[derive(Debug, Clone)]
pub struct OutputGradient {
    pub d_feature: Vec<f64>,
    pub d_depth: Vec<f64>,
    pub d_accum: Vec<f64>,
}

impl OutputGradient {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            d_feature: vec![0.0; width * height * channels],
            d_depth: vec![0.0; width * height],
            d_accum: vec![0.0; width * height],
        }
    }
}

/// Screen-space data for one surviving Gaussian.
#[derive(Debug, Clone, Copy)]
struct Splat {
    id: u32,
    mean2d: Vector2<f64>,
    /// Inverse of the regularized 2D covariance.
    inv_cov: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    /// Mahalanobis bound above which alpha falls under the cutoff; lets the
    /// compositor skip the exp for fringe pixels.
    q_cut: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Projection linearization with the EWA frustum clamp applied.
struct JacClamp {
    j: Matrix2x3<f64>,
    clamp_x: bool,
    clamp_y: bool,
    /// Clamped view-plane coordinates x/z, y/z.
    tx: f64,
    ty: f64,
}

/// Projection Jacobian with the EWA frustum clamp: x/z and y/z are limited to
/// 1.3x the frustum half-extent before linearizing, so Gaussians far outside
/// the view cone cannot blow up into image-wide screen-space covariances.
fn clamped_jacobian(intr: &Intrinsics, p_cam: Vector3<f64>) -> JacClamp {
    let w = intr.width as f64;
    let h = intr.height as f64;
    let lim_x = 1.3 * (intr.cx.max(w - intr.cx)) / intr.fx;
    let lim_y = 1.3 * (intr.cy.max(h - intr.cy)) / intr.fy;
    let tx = (p_cam.x / p_cam.z).clamp(-lim_x, lim_x);
    let ty = (p_cam.y / p_cam.z).clamp(-lim_y, lim_y);
    let p = Vector3::new(tx * p_cam.z, ty * p_cam.z, p_cam.z);
    JacClamp {
        j: projection_jacobian(intr, p),
        clamp_x: tx != p_cam.x / p_cam.z,
        clamp_y: ty != p_cam.y / p_cam.z,
        tx,
        ty,
    }
}

fn regularize(cov2: Matrix2<f64>, reg: f64) -> Matrix2<f64> {
    cov2 + Matrix2::identity() * reg
}

fn invert2(m: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if det <= 0.0 {
        return None;
    }
    Some(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

/// Projects, culls and sorts the set front-to-back (ties broken by index).
fn prepare(
    gaussians: &GaussianSet,
    camera: &Camera,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> Vec<Splat> {
    let w_rot = camera.pose.rotation.inverse().matrix().clone_owned();
    let cam_t = camera.pose.translation;
    let intr = camera.intrinsics;
    let mut splats: Vec<Splat> = (0..gaussians.len())
        .into_par_iter()
        .filter_map(|i| {
            let opacity = gaussians.opacities[i];
            if opts.alpha_cutoff > 0.0 && opacity < opts.alpha_cutoff {
                return None;
            }
            let p_cam = w_rot * (gaussians.means[i] - cam_t);
            if p_cam.z <= opts.near {
                return None;
            }
            let scale = gaussians.scales[i];
            let j = clamped_jacobian(&intr, p_cam).j;
            let cov2 = if scale.x > 0.0 && scale.x == scale.y && scale.x == scale.z {
                // isotropic: R S Sᵀ Rᵀ = s²I for any rotation, so the world
                // and view rotations cancel and Σ' = s² J Jᵀ
                regularize((j * j.transpose()) * (scale.x * scale.x), opts.cov_reg)
            } else {
                let cov3 = build_covariance(scale, &gaussians.rotations[i].into_inner()).ok()?;
                regularize(j * (w_rot * cov3 * w_rot.transpose()) * j.transpose(), opts.cov_reg)
            };
            let inv_cov = invert2(&cov2)?;
            let mean2d = Vector2::new(
                intr.fx * p_cam.x / p_cam.z + intr.cx,
                intr.fy * p_cam.y / p_cam.z + intr.cy,
            );
            // Radius beyond which alpha provably falls under the cutoff, so
            // the tiled and reference paths stay bit-compatible.
            let (x0, x1, y0, y1) = if opts.alpha_cutoff > 0.0 {
                let a = cov2[(0, 0)];
                let b = cov2[(0, 1)];
                let c = cov2[(1, 1)];
                let mid = 0.5 * (a + c);
                let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                let lambda_max = mid + disc;
                let r = (2.0 * (opacity / opts.alpha_cutoff).ln() * lambda_max).max(0.0).sqrt() + 1.0;
                let x0 = (mean2d.x - r).floor().max(0.0) as usize;
                let y0 = (mean2d.y - r).floor().max(0.0) as usize;
                if mean2d.x + r < 0.0 || mean2d.y + r < 0.0 || x0 >= width || y0 >= height {
                    return None;
                }
                let x1 = ((mean2d.x + r).ceil() as usize).min(width - 1);
                let y1 = ((mean2d.y + r).ceil() as usize).min(height - 1);
                (x0, x1, y0, y1)
            } else {
                (0, width - 1, 0, height - 1)
            };
            let q_cut = if opts.alpha_cutoff > 0.0 {
                2.0 * (opacity / opts.alpha_cutoff).ln()
            } else {
                f64::INFINITY
            };
            Some(Splat { id: i as u32, mean2d, inv_cov, depth: p_cam.z, opacity, q_cut, x0, x1, y0, y1 })
        })
        .collect();
    // (depth, id) is a unique total key, so the unstable sort is deterministic
    splats.sort_unstable_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.id.cmp(&b.id)));
    splats
}

#[inline]
fn mahalanobis(s: &Splat, px: f64, py: f64) -> f64 {
    let d = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
    s.inv_cov[(0, 0)] * d.x * d.x + 2.0 * s.inv_cov[(0, 1)] * d.x * d.y + s.inv_cov[(1, 1)] * d.y * d.y
}

#[inline]
fn effective_alpha(s: &Splat, px: f64, py: f64) -> f64 {
    s.opacity * (-0.5 * mahalanobis(s, px, py)).exp()
}

struct PixelAccum<'a> {
    feature: &'a mut [f64],
    depth: &'a mut f64,
    accum: &'a mut f64,
    transmittance: f64,
}

#[inline]
fn composite_pixel<'s>(
    splats: impl IntoIterator<Item = &'s Splat>,
    features: &[f64],
    channels: usize,
    px: f64,
    py: f64,
    opts: &RenderOptions,
    out: &mut PixelAccum,
    mut record: impl FnMut(u32, f64),
) {
    for s in splats {
        let q = mahalanobis(s, px, py);
        if q > s.q_cut {
            continue;
        }
        let alpha = s.opacity * (-0.5 * q).exp();
        if alpha < opts.alpha_cutoff || alpha <= 0.0 {
            continue;
        }
        let w = alpha * out.transmittance;
        let f = &features[s.id as usize * channels..(s.id as usize + 1) * channels];
        for (o, v) in out.feature.iter_mut().zip(f) {
            *o += w * v;
        }
        *out.depth += w * s.depth;
        *out.accum += w;
        record(s.id, w);
        out.transmittance *= 1.0 - alpha;
        if out.transmittance < opts.transmittance_floor {
            break;
        }
    }
}

fn finalize_depth(out: &mut RenderOutput, opts: &RenderOptions) {
    if opts.normalize_depth {
        for (d, a) in out.depth.iter_mut().zip(&out.accum) {
            if *a > 0.0 {
                *d /= *a;
            }
        }
    }
}

/// Tiled forward splatting. Returns the rendered images plus the context
/// needed by [`splat_backward`].
pub fn splat_forward(
    gaussians: &GaussianSet,
    camera: &Camera,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> (RenderOutput, RenderContext) {
    let (out, ctx) = forward_tiled(gaussians, camera, width, height, opts, true);
    (out, ctx.expect("context requested"))
}

/// Tiled forward splatting without recording a backward context.
pub fn splat_render(
    gaussians: &GaussianSet,
    camera: &Camera,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> RenderOutput {
    forward_tiled(gaussians, camera, width, height, opts, false).0
}

fn forward_tiled(
    gaussians: &GaussianSet,
    camera: &Camera,
    width: usize,
    height: usize,
    opts: &RenderOptions,
    record_ctx: bool,
) -> (RenderOutput, Option<RenderContext>) {
    let channels = gaussians.feature_dim;
    let trace = std::env::var_os("SPLAT_TIMING").is_some();
    let t0 = std::time::Instant::now();
    let splats = prepare(gaussians, camera, width, height, opts);
    if trace {
        eprintln!("prepare: {:.4}s ({} splats)", t0.elapsed().as_secs_f64(), splats.len());
    }
    let t0 = std::time::Instant::now();

    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    // Bin in sorted order so each tile list stays front-to-back. Entries
    // carry the bounding box so per-pixel rejection scans compact,
    // sequential memory instead of dereferencing whole splats.
    struct BinEntry {
        si: u32,
        x0: u16,
        x1: u16,
        y0: u16,
        y1: u16,
    }
    let mut bins: Vec<Vec<BinEntry>> = Vec::new();
    bins.resize_with(tiles_x * tiles_y, Vec::new);
    for (si, s) in splats.iter().enumerate() {
        let tx0 = s.x0 / TILE_SIZE;
        let tx1 = s.x1 / TILE_SIZE;
        let ty0 = s.y0 / TILE_SIZE;
        let ty1 = s.y1 / TILE_SIZE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(BinEntry {
                    si: si as u32,
                    x0: s.x0 as u16,
                    x1: s.x1 as u16,
                    y0: s.y0 as u16,
                    y1: s.y1 as u16,
                });
            }
        }
    }

    if trace {
        let entries: usize = bins.iter().map(|b| b.len()).sum();
        eprintln!("binning: {:.4}s ({} entries, {} tiles)", t0.elapsed().as_secs_f64(), entries, bins.len());
    }
    let t0 = std::time::Instant::now();

    struct TileResult {
        feature: Vec<f64>,
        depth: Vec<f64>,
        accum: Vec<f64>,
        contributions: Option<Vec<Vec<(u32, f64)>>>,
    }

    let tile_results: Vec<TileResult> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let x_lo = tx * TILE_SIZE;
            let y_lo = ty * TILE_SIZE;
            let tw = (width - x_lo).min(TILE_SIZE);
            let th = (height - y_lo).min(TILE_SIZE);
            let mut feature = vec![0.0; tw * th * channels];
            let mut depth = vec![0.0; tw * th];
            let mut accum = vec![0.0; tw * th];
            let mut contributions = record_ctx.then(|| vec![Vec::new(); tw * th]);
            let list = &bins[tile];
            for ly in 0..th {
                for lx in 0..tw {
                    let i = ly * tw + lx;
                    let (ix, iy) = (x_lo + lx, y_lo + ly);
                    let px = ix as f64;
                    let py = iy as f64;
                    let (ix, iy) = (ix as u16, iy as u16);
                    // bounding-box rejection: outside [x0,x1]x[y0,y1] alpha
                    // provably falls under the cutoff
                    let visible = list
                        .iter()
                        .filter(|e| ix >= e.x0 && ix <= e.x1 && iy >= e.y0 && iy <= e.y1)
                        .map(|e| &splats[e.si as usize]);
                    let mut acc = PixelAccum {
                        feature: &mut feature[i * channels..(i + 1) * channels],
                        depth: &mut depth[i],
                        accum: &mut accum[i],
                        transmittance: 1.0,
                    };
                    match contributions.as_mut() {
                        Some(c) => {
                            let list_ref = &mut c[i];
                            composite_pixel(visible, &gaussians.features, channels, px, py, opts, &mut acc, |id, w| {
                                list_ref.push((id, w))
                            });
                        }
                        None => {
                            composite_pixel(visible, &gaussians.features, channels, px, py, opts, &mut acc, |_, _| {});
                        }
                    }
                }
            }
            TileResult { feature, depth, accum, contributions }
        })
        .collect();

    if trace {
        eprintln!("composite: {:.4}s", t0.elapsed().as_secs_f64());
    }
    // Deterministic merge in fixed tile order.
    let mut out = RenderOutput::zeros(width, height, channels);
    let mut ctx = record_ctx.then(|| RenderContext {
        width,
        height,
        n_gaussians: gaussians.len(),
        options: *opts,
        contributions: vec![Vec::new(); width * height],
    });
    for (tile, tr) in tile_results.into_iter().enumerate() {
        let tx = tile % tiles_x;
        let ty = tile / tiles_x;
        let x_lo = tx * TILE_SIZE;
        let y_lo = ty * TILE_SIZE;
        let tw = (width - x_lo).min(TILE_SIZE);
        let th = (height - y_lo).min(TILE_SIZE);
        for ly in 0..th {
            for lx in 0..tw {
                let src = ly * tw + lx;
                let dst = (y_lo + ly) * width + (x_lo + lx);
                out.feature[dst * channels..(dst + 1) * channels]
                    .copy_from_slice(&tr.feature[src * channels..(src + 1) * channels]);
                out.depth[dst] = tr.depth[src];
                out.accum[dst] = tr.accum[src];
            }
        }
        if let (Some(ctx), Some(contribs)) = (ctx.as_mut(), tr.contributions) {
            for (ly, row) in contribs.chunks(tw).enumerate() {
                for (lx, list) in row.iter().enumerate() {
                    ctx.contributions[(y_lo + ly) * width + (x_lo + lx)] = list.clone();
                }
            }
        }
    }
    finalize_depth(&mut out, opts);
    (out, ctx)
}

/// Naive reference renderer: every Gaussian against every pixel, full sort,
/// no tiling. Kept as the correctness oracle for the tiled path.
pub fn splat_forward_reference(
    gaussians: &GaussianSet,
    camera: &Camera,
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> RenderOutput {
    let channels = gaussians.feature_dim;
    let splats = prepare(gaussians, camera, width, height, opts);
    let mut out = RenderOutput::zeros(width, height, channels);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let mut acc = PixelAccum {
                feature: &mut out.feature[i * channels..(i + 1) * channels],
                depth: &mut out.depth[i],
                accum: &mut out.accum[i],
                transmittance: 1.0,
            };
            composite_pixel(&splats, &gaussians.features, channels, x as f64, y as f64, opts, &mut acc, |_, _| {});
        }
    }
    finalize_depth(&mut out, opts);
    out
}

/// Analytic gradients of (feature, depth, accum) w.r.t. per-Gaussian opacity,
/// feature and 3D mean. The mean gradient flows through the projected mean,
/// the projected covariance and the blended depth. Chaining through
/// sigmoid/softmax activations is the caller's responsibility.
pub fn splat_backward(
    ctx: &RenderContext,
    gaussians: &GaussianSet,
    camera: &Camera,
    grad_out: &OutputGradient,
) -> Result<GradientSet> {
    if ctx.n_gaussians != gaussians.len() {
        return Err(Error::Contract(format!(
            "render context built for {} gaussians, got {}",
            ctx.n_gaussians,
            gaussians.len()
        )));
    }
    let channels = gaussians.feature_dim;
    let (width, height) = (ctx.width, ctx.height);
    if grad_out.d_feature.len() != width * height * channels
        || grad_out.d_depth.len() != width * height
        || grad_out.d_accum.len() != width * height
    {
        return Err(Error::Contract("output gradient shape mismatch".into()));
    }
    let opts = &ctx.options;
    let splats = prepare(gaussians, camera, width, height, opts);
    let mut by_id: Vec<Option<u32>> = vec![None; gaussians.len()];
    for (si, s) in splats.iter().enumerate() {
        by_id[s.id as usize] = Some(si as u32);
    }

    let mut grads = GradientSet::zeros(gaussians.len(), channels);
    // screen-space accumulators per gaussian
    let mut d_mean2d = vec![Vector2::<f64>::zeros(); gaussians.len()];
    let mut d_depth_cam = vec![0.0f64; gaussians.len()];
    let mut d_cov2 = vec![Matrix2::<f64>::zeros(); gaussians.len()];

    let row_results: Vec<_> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut r_opacity: Vec<(u32, f64)> = Vec::new();
            let mut r_feature: Vec<(u32, Vec<f64>)> = Vec::new();
            let mut r_mean2d: Vec<(u32, Vector2<f64>)> = Vec::new();
            let mut r_depth: Vec<(u32, f64)> = Vec::new();
            let mut r_cov2: Vec<(u32, Matrix2<f64>)> = Vec::new();
            for x in 0..width {
                let pix = y * width + x;
                let contribs = &ctx.contributions[pix];
                if contribs.is_empty() {
                    continue;
                }
                let g_feature = &grad_out.d_feature[pix * channels..(pix + 1) * channels];
                let mut g_depth = grad_out.d_depth[pix];
                let mut g_accum = grad_out.d_accum[pix];
                if opts.normalize_depth {
                    // forward emitted depth / accum; pull the gradient back
                    // to the unnormalized blended depth
                    let accum: f64 = contribs.iter().map(|&(_, w)| w).sum();
                    if accum > 0.0 {
                        let depth_un: f64 = contribs
                            .iter()
                            .map(|&(id, w)| w * splats[by_id[id as usize].unwrap() as usize].depth)
                            .sum();
                        let gd = g_depth;
                        g_depth = gd / accum;
                        g_accum -= gd * depth_un / (accum * accum);
                    }
                }
                let px = x as f64;
                let py = y as f64;
                // back-to-front suffix pass
                let mut suffix = 0.0f64;
                for &(id, w) in contribs.iter().rev() {
                    let s = &splats[by_id[id as usize].expect("contributor survived culling") as usize];
                    let alpha = effective_alpha(s, px, py);
                    if alpha <= 0.0 {
                        continue;
                    }
                    let t_before = w / alpha;
                    let f = gaussians.feature(id as usize);
                    let mut s_i = g_accum + g_depth * s.depth;
                    for (gf, fv) in g_feature.iter().zip(f) {
                        s_i += gf * fv;
                    }
                    let mut d_alpha = t_before * s_i;
                    if suffix != 0.0 {
                        d_alpha -= suffix / (1.0 - alpha);
                    }
                    suffix += w * s_i;

                    let g_val = alpha / s.opacity;
                    r_opacity.push((id, d_alpha * g_val));
                    let d_g = d_alpha * s.opacity;
                    let d = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
                    let ad = s.inv_cov * d;
                    r_mean2d.push((id, ad * (d_g * g_val)));
                    r_cov2.push((id, (ad * ad.transpose()) * (0.5 * d_g * g_val)));
                    r_depth.push((id, g_depth * w));
                    if g_feature.iter().any(|g| *g != 0.0) {
                        r_feature.push((id, g_feature.iter().map(|g| g * w).collect()));
                    }
                }
            }
            (r_opacity, r_feature, r_mean2d, r_depth, r_cov2)
        })
        .collect();

    // deterministic merge in row order
    for (r_opacity, r_feature, r_mean2d, r_depth, r_cov2) in row_results {
        for (id, v) in r_opacity {
            grads.d_opacity[id as usize] += v;
        }
        for (id, v) in r_feature {
            let row = &mut grads.d_feature[id as usize * channels..(id as usize + 1) * channels];
            for (o, g) in row.iter_mut().zip(v) {
                *o += g;
            }
        }
        for (id, v) in r_mean2d {
            d_mean2d[id as usize] += v;
        }
        for (id, v) in r_depth {
            d_depth_cam[id as usize] += v;
        }
        for (id, v) in r_cov2 {
            d_cov2[id as usize] += v;
        }
    }

    // Chain screen-space gradients back to world-space means.
    let w_rot = camera.pose.rotation.inverse().matrix().clone_owned();
    let cam_t = camera.pose.translation;
    let intr = camera.intrinsics;
    for s in &splats {
        let i = s.id as usize;
        let gm = d_mean2d[i];
        let gz = d_depth_cam[i];
        let gc = d_cov2[i];
        if gm == Vector2::zeros() && gz == 0.0 && gc == Matrix2::zeros() {
            continue;
        }
        let p_cam = w_rot * (gaussians.means[i] - cam_t);
        let jc = clamped_jacobian(&intr, p_cam);
        let j = jc.j;
        // mean2d is the exact (unclamped) projection; only the covariance
        // linearization uses the clamped Jacobian.
        let j_mean: Matrix2x3<f64> = projection_jacobian(&intr, p_cam);
        let mut d_t = j_mean.transpose() * gm + Vector3::new(0.0, 0.0, gz);

        if gc != Matrix2::zeros() {
            let cov3 = build_covariance(gaussians.scales[i], &gaussians.rotations[i].into_inner())
                .expect("contributor has valid covariance");
            let cov_cam: Matrix3<f64> = w_rot * cov3 * w_rot.transpose();
            // G3 = (Sigma_cam J^T) * M; d Sigma'/d t_k traced against M gives
            // 2 * sum_ab dJ_k[a][b] * G3[b][a]
            let p_mat = cov_cam * j.transpose();
            let g3 = p_mat * gc;
            let (x, y_, z) = (p_cam.x, p_cam.y, p_cam.z);
            let z2 = z * z;
            let z3 = z2 * z;
            // Where the frustum clamp is active, J[0][2] = -fx*tx/z with tx
            // constant, so the x-derivative vanishes and the z-derivative is
            // fx*tx/z^2 (similarly for y).
            let djx = if jc.clamp_x { 0.0 } else { -intr.fx / z2 * g3[(2, 0)] };
            let djy = if jc.clamp_y { 0.0 } else { -intr.fy / z2 * g3[(2, 1)] };
            let mut djz = (-intr.fx / z2) * g3[(0, 0)] + (-intr.fy / z2) * g3[(1, 1)];
            djz += if jc.clamp_x {
                intr.fx * jc.tx / z2 * g3[(2, 0)]
            } else {
                2.0 * intr.fx * x / z3 * g3[(2, 0)]
            };
            djz += if jc.clamp_y {
                intr.fy * jc.ty / z2 * g3[(2, 1)]
            } else {
                2.0 * intr.fy * y_ / z3 * g3[(2, 1)]
            };
            d_t += 2.0 * Vector3::new(djx, djy, djz);
        }
        grads.d_mean[i] = w_rot.transpose() * d_t;
    }
    Ok(grads)
}

/// How GSP per-pixel scales are specified.
#[derive(Debug, Clone)]
pub enum ScaleMap {
    Uniform(f64),
    PerPixel(Vec<Vector3<f64>>),
}

/// Unprojects a depth map into one Gaussian per valid (and selected) pixel:
/// opacity 1, identity rotation, feature = source pixel, scale clamped to
/// (0, 0.02] m. Returns the set plus each Gaussian's source pixel index.
pub fn depth_map_to_gaussians(
    camera: &Camera,
    depth_map: &DepthMap,
    scale_map: &ScaleMap,
    source_image: &Image,
    selection: Option<&Mask>,
) -> Result<(GaussianSet, Vec<u32>)> {
    let (w, h) = (depth_map.width, depth_map.height);
    if w != camera.width() || h != camera.height() || source_image.width != w || source_image.height != h {
        return Err(Error::Config("depth map, image and camera dimensions must agree".into()));
    }
    if let Some(sel) = selection {
        if sel.width != w || sel.height != h {
            return Err(Error::Config("selection mask dimensions must agree".into()));
        }
    }
    if let ScaleMap::PerPixel(v) = scale_map {
        if v.len() != w * h {
            return Err(Error::Config("per-pixel scale map dimensions must agree".into()));
        }
    }
    let clamp_scale = |s: Vector3<f64>| -> Result<Vector3<f64>> {
        if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) {
            return Err(Error::Precondition("gaussian scale must be positive".into()));
        }
        Ok(Vector3::new(s.x.min(MAX_GSP_SCALE), s.y.min(MAX_GSP_SCALE), s.z.min(MAX_GSP_SCALE)))
    };

    let mut set = GaussianSet::with_feature_dim(source_image.channels);
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth_map.valid[i] {
                continue;
            }
            if let Some(sel) = selection {
                if !sel.data[i] {
                    continue;
                }
            }
            let depth = depth_map.values[i];
            let mean = unproject(camera, Vector2::new(x as f64, y as f64), depth)?;
            let scale = match scale_map {
                ScaleMap::Uniform(s) => clamp_scale(Vector3::new(*s, *s, *s))?,
                ScaleMap::PerPixel(v) => clamp_scale(v[i])?,
            };
            set.push(crate::gaussians::Gaussian3D {
                mean,
                scale,
                rotation: nalgebra::UnitQuaternion::identity(),
                opacity: 1.0,
                feature: source_image.pixel(x, y).to_vec(),
            });
            pixels.push(i as u32);
        }
    }
    if set.is_empty() {
        return Err(Error::DegenerateInput("depth map has no valid pixels to unproject".into()));
    }
    Ok((set, pixels))
}

/// Treats every voxel-grid vertex as an isotropic Gaussian: fixed scale `s`,
/// identity rotation, sigmoid opacity, softmax semantic feature.
pub fn voxel_to_gaussians(grid: &VoxelGrid, s: f64) -> Result<GaussianSet> {
    if !(s > 0.0) {
        return Err(Error::Precondition("voxel gaussian scale must be positive".into()));
    }
    let n = grid.vertex_count();
    let opacities = grid.activated_opacity();
    let features = grid.activated_semantics();
    let mut means = Vec::with_capacity(n);
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                means.push(grid.vertex_position(i, j, k));
            }
        }
    }
    Ok(GaussianSet {
        means,
        scales: vec![Vector3::new(s, s, s); n],
        rotations: vec![nalgebra::UnitQuaternion::identity(); n],
        opacities,
        features,
        feature_dim: grid.classes,
    })
}

/// Reusable helper for projecting a single gaussian with the renderer's
/// regularization applied; exposed for diagnostics.
pub fn project_regularized(g: &crate::gaussians::Gaussian3D, camera: &Camera, opts: &RenderOptions) -> Option<ProjectedGaussian> {
    crate::gaussians::project_covariance(g, camera, opts.near).map(|mut p| {
        p.cov2 = regularize(p.cov2, opts.cov_reg);
        p
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Gaussian3D;
    use crate::geometry::{Intrinsics, Pose};
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simple_camera(w: usize, h: usize) -> Camera {
        let intr = Intrinsics {
            fx: 40.0,
            fy: 40.0,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            width: w,
            height: h,
        };
        Camera::new(intr, Pose::identity())
    }

    fn single_gaussian_at_pixel(cam: &Camera, px: f64, py: f64, z: f64, opacity: f64, feature: Vec<f64>) -> Gaussian3D {
        let mean = unproject(cam, Vector2::new(px, py), z).unwrap();
        Gaussian3D {
            mean,
            scale: Vector3::new(0.05, 0.05, 0.05),
            rotation: nalgebra::UnitQuaternion::identity(),
            opacity,
            feature,
        }
    }

    #[test]
    fn single_opaque_gaussian() {
        let cam = simple_camera(17, 17);
        let mut set = GaussianSet::with_feature_dim(2);
        set.push(single_gaussian_at_pixel(&cam, 8.0, 8.0, 2.0, 1.0, vec![0.7, 0.2]));
        let (out, ctx) = splat_forward(&set, &cam, 17, 17, &RenderOptions::default());
        let i = 8 * 17 + 8;
        assert_relative_eq!(out.accum[i], 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.depth[i], 2.0, epsilon = 1e-12);
        assert_relative_eq!(out.feature[i * 2], 0.7, epsilon = 1e-12);
        assert_relative_eq!(out.feature[i * 2 + 1], 0.2, epsilon = 1e-12);
        assert_eq!(ctx.contributions[i].len(), 1);
    }

    #[test]
    fn two_coincident_half_opacity() {
        let cam = simple_camera(17, 17);
        let mut set = GaussianSet::with_feature_dim(1);
        set.push(single_gaussian_at_pixel(&cam, 8.0, 8.0, 2.0, 0.5, vec![1.0]));
        set.push(single_gaussian_at_pixel(&cam, 8.0, 8.0, 3.0, 0.5, vec![2.0]));
        let (out, _) = splat_forward(&set, &cam, 17, 17, &RenderOptions::default());
        let i = 8 * 17 + 8;
        // w1 = 0.5, w2 = 0.5 * 0.5
        assert_relative_eq!(out.feature[i], 0.5 * 1.0 + 0.25 * 2.0, epsilon = 1e-12);
        assert_relative_eq!(out.accum[i], 0.75, epsilon = 1e-12);
        assert_relative_eq!(out.depth[i], 0.5 * 2.0 + 0.25 * 3.0, epsilon = 1e-12);
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, channels: usize) -> GaussianSet {
        let mut set = GaussianSet::with_feature_dim(channels);
        for _ in 0..n {
            set.push(Gaussian3D {
                mean: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(1.0..6.0)),
                scale: Vector3::new(
                    rng.gen_range(0.05..0.4),
                    rng.gen_range(0.05..0.4),
                    rng.gen_range(0.05..0.4),
                ),
                rotation: nalgebra::UnitQuaternion::from_euler_angles(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                opacity: rng.gen_range(0.2..0.95),
                feature: (0..channels).map(|_| rng.gen::<f64>()).collect(),
            });
        }
        set
    }

    #[test]
    fn tiled_matches_reference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let set = random_set(&mut rng, 50, 3);
            let cam = simple_camera(16, 16);
            let opts = RenderOptions::default();
            let (tiled, _) = splat_forward(&set, &cam, 16, 16, &opts);
            let reference = splat_forward_reference(&set, &cam, 16, 16, &opts);
            for i in 0..tiled.depth.len() {
                assert!((tiled.depth[i] - reference.depth[i]).abs() <= 1e-6);
                assert!((tiled.accum[i] - reference.accum[i]).abs() <= 1e-6);
            }
            for i in 0..tiled.feature.len() {
                assert!((tiled.feature[i] - reference.feature[i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn weights_sum_to_accum_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = random_set(&mut rng, 80, 2);
        let cam = simple_camera(32, 24);
        let (out, ctx) = splat_forward(&set, &cam, 32, 24, &RenderOptions::default());
        for (i, list) in ctx.contributions.iter().enumerate() {
            let sum: f64 = list.iter().map(|&(_, w)| w).sum();
            assert!(list.iter().all(|&(_, w)| w >= 0.0));
            assert!((sum - out.accum[i]).abs() <= 1e-6);
            assert!(out.accum[i] <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn zero_opacity_renders_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut set = random_set(&mut rng, 30, 2);
        for o in set.opacities.iter_mut() {
            *o = 0.0;
        }
        let cam = simple_camera(16, 16);
        let (out, _) = splat_forward(&set, &cam, 16, 16, &RenderOptions::default());
        assert!(out.accum.iter().all(|&a| a == 0.0));
        assert!(out.feature.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn rigid_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let set = random_set(&mut rng, 40, 2);
        let cam = simple_camera(24, 24);
        let opts = RenderOptions::default();
        let (a, _) = splat_forward(&set, &cam, 24, 24, &opts);

        let g = Pose::new(
            Rotation3::from_euler_angles(0.3, -0.5, 1.1),
            Vector3::new(2.0, -1.0, 0.5),
        );
        let mut set2 = set.clone();
        for (m, r) in set2.means.iter_mut().zip(set2.rotations.iter_mut()) {
            *m = g.transform(*m);
            *r = nalgebra::UnitQuaternion::from_rotation_matrix(&g.rotation) * *r;
        }
        let cam2 = Camera::new(cam.intrinsics, g.compose(&cam.pose));
        let (b, _) = splat_forward(&set2, &cam2, 24, 24, &opts);
        for i in 0..a.depth.len() {
            assert!((a.depth[i] - b.depth[i]).abs() <= 1e-5);
            assert!((a.accum[i] - b.accum[i]).abs() <= 1e-5);
        }
        for i in 0..a.feature.len() {
            assert!((a.feature[i] - b.feature[i]).abs() <= 1e-5);
        }
    }

    #[test]
    fn renders_are_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let set = random_set(&mut rng, 60, 3);
        let cam = simple_camera(33, 25);
        let opts = RenderOptions::default();
        let (a, _) = splat_forward(&set, &cam, 33, 25, &opts);
        let (b, _) = splat_forward(&set, &cam, 33, 25, &opts);
        assert_eq!(a, b);
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let set = random_set(&mut rng, 20, 2);
        let cam = simple_camera(16, 16);
        let (_, ctx) = splat_forward(&set, &cam, 16, 16, &RenderOptions::default());
        let grads = splat_backward(&ctx, &set, &cam, &OutputGradient::zeros(16, 16, 2)).unwrap();
        assert!(grads.d_opacity.iter().all(|&g| g == 0.0));
        assert!(grads.d_feature.iter().all(|&g| g == 0.0));
        assert!(grads.d_mean.iter().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn backward_feature_linearity() {
        let cam = simple_camera(17, 17);
        let mut set = GaussianSet::with_feature_dim(1);
        set.push(single_gaussian_at_pixel(&cam, 8.0, 8.0, 2.0, 0.6, vec![0.4]));
        let (out, ctx) = splat_forward(&set, &cam, 17, 17, &RenderOptions::default());
        let i = 8 * 17 + 8;
        let mut grad = OutputGradient::zeros(17, 17, 1);
        grad.d_feature[i] = 1.0;
        let grads = splat_backward(&ctx, &set, &cam, &grad).unwrap();
        // d feature = w1 at that pixel
        let w1 = ctx.contributions[i][0].1;
        assert_relative_eq!(grads.d_feature[0], w1, epsilon = 1e-12);
        assert!(out.accum[i] > 0.0);
    }

    #[test]
    fn backward_stale_context_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let set = random_set(&mut rng, 10, 1);
        let cam = simple_camera(8, 8);
        let (_, ctx) = splat_forward(&set, &cam, 8, 8, &RenderOptions::default());
        let other = random_set(&mut rng, 11, 1);
        assert!(matches!(
            splat_backward(&ctx, &other, &cam, &OutputGradient::zeros(8, 8, 1)),
            Err(Error::Contract(_))
        ));
    }

    /// Central finite differences against the smooth forward map.
    fn fd_check(seed: u64, n: usize, channels: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, n, channels);
        let (w, h) = (12, 10);
        let cam = simple_camera(w, h);
        let opts = RenderOptions::smooth();
        let mut grad = OutputGradient::zeros(w, h, channels);
        for v in grad.d_feature.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in grad.d_depth.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in grad.d_accum.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let loss = |set: &GaussianSet| -> f64 {
            let out = splat_forward_reference(set, &cam, w, h, &opts);
            let mut l = 0.0;
            for i in 0..out.feature.len() {
                l += out.feature[i] * grad.d_feature[i];
            }
            for i in 0..out.depth.len() {
                l += out.depth[i] * grad.d_depth[i] + out.accum[i] * grad.d_accum[i];
            }
            l
        };
        let (_, ctx) = splat_forward(&set, &cam, w, h, &opts);
        let grads = splat_backward(&ctx, &set, &cam, &grad).unwrap();

        let step = 1e-4;
        let check = |analytic: f64, fd: f64| {
            let denom = analytic.abs().max(fd.abs());
            if denom < 1e-6 {
                assert!((analytic - fd).abs() <= 1e-6, "near-zero mismatch {analytic} vs {fd}");
            } else {
                assert!((analytic - fd).abs() / denom <= 1e-3, "rel mismatch {analytic} vs {fd}");
            }
        };
        for i in 0..set.len() {
            // opacity
            let mut p = set.clone();
            p.opacities[i] += step;
            let mut m = set.clone();
            m.opacities[i] -= step;
            check(grads.d_opacity[i], (loss(&p) - loss(&m)) / (2.0 * step));
            // feature channel 0
            let mut p = set.clone();
            p.features[i * channels] += step;
            let mut m = set.clone();
            m.features[i * channels] -= step;
            check(grads.d_feature[i * channels], (loss(&p) - loss(&m)) / (2.0 * step));
            // mean components
            for k in 0..3 {
                let mut p = set.clone();
                p.means[i][k] += step;
                let mut m = set.clone();
                m.means[i][k] -= step;
                check(grads.d_mean[i][k], (loss(&p) - loss(&m)) / (2.0 * step));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_small() {
        for seed in 0..5 {
            fd_check(100 + seed, 8, 2);
        }
    }

    #[test]
    fn depth_map_to_gaussians_roundtrip() {
        let cam = simple_camera(2, 2);
        let depth = DepthMap::constant(2, 2, 1.0);
        let img = Image::from_fn(2, 2, 3, |x, y, c| (x + y + c) as f64 * 0.1);
        let (set, pixels) = depth_map_to_gaussians(&cam, &depth, &ScaleMap::Uniform(0.01), &img, None).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(pixels, vec![0, 1, 2, 3]);
        for (i, &pix) in pixels.iter().enumerate() {
            let (x, y) = (pix as usize % 2, pix as usize / 2);
            let proj = crate::geometry::project(&cam, set.means[i]);
            assert!((proj.pixel - Vector2::new(x as f64, y as f64)).norm() <= 1e-6);
            assert!((proj.depth - 1.0).abs() <= 1e-9);
            assert_eq!(set.feature(i), img.pixel(x, y));
            assert_eq!(set.opacities[i], 1.0);
        }
    }

    #[test]
    fn depth_map_scale_clamped() {
        let cam = simple_camera(2, 2);
        let depth = DepthMap::constant(2, 2, 1.0);
        let img = Image::zeros(2, 2, 1);
        let (set, _) = depth_map_to_gaussians(&cam, &depth, &ScaleMap::Uniform(0.05), &img, None).unwrap();
        assert!(set.scales.iter().all(|s| s.x == MAX_GSP_SCALE));
    }

    #[test]
    fn depth_map_counts_valid_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cam = simple_camera(9, 7);
        let mut depth = DepthMap::invalid(9, 7);
        let mut expected = 0;
        for y in 0..7 {
            for x in 0..9 {
                if rng.gen_bool(0.6) {
                    depth.set(x, y, rng.gen_range(0.5..5.0));
                    expected += 1;
                }
            }
        }
        let img = Image::zeros(9, 7, 1);
        let (set, _) = depth_map_to_gaussians(&cam, &depth, &ScaleMap::Uniform(0.01), &img, None).unwrap();
        assert_eq!(set.len(), expected);
    }

    #[test]
    fn depth_map_all_invalid_is_degenerate() {
        let cam = simple_camera(4, 4);
        let depth = DepthMap::invalid(4, 4);
        let img = Image::zeros(4, 4, 1);
        assert!(matches!(
            depth_map_to_gaussians(&cam, &depth, &ScaleMap::Uniform(0.01), &img, None),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn voxel_to_gaussians_counts_and_sigmoid() {
        let grid = VoxelGrid::new([0.0; 3], [1.0, 1.0, 1.0], [2, 2, 2], 4).unwrap();
        let set = voxel_to_gaussians(&grid, 0.1).unwrap();
        assert_eq!(set.len(), 8);
        assert!(set.opacities.iter().all(|&o| (o - 0.5).abs() < 1e-12));
        // uniform softmax features
        assert!(set.features.iter().all(|&f| (f - 0.25).abs() < 1e-12));
    }

    #[test]
    fn voxel_to_gaussians_full_scale_count() {
        let grid = VoxelGrid::new([-8.0, -8.0, -1.0], [8.0, 8.0, 3.0], [320, 320, 24], 2).unwrap();
        let set = voxel_to_gaussians(&grid, 0.1).unwrap();
        assert_eq!(set.len(), 2_457_600);
    }
}
