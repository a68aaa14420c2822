//! Differentiable loss terms: windowed SSIM, the SSIM/L1 photometric mix,
//! total variation on activated grid opacity, and the opacity-weighted
//! semantic negative log-likelihood.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::voxel::{sigmoid, sigmoid_derivative, VoxelGrid};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Window half-size; 3x3 window.
const SSIM_R: isize = 1;
const SSIM_N: f64 = 9.0;
pub const DEFAULT_PHOTOMETRIC_BETA: f64 = 0.85;
pub const SEMANTIC_PROB_FLOOR: f64 = 1e-8;

/// Subgradient-friendly sign: 0 at 0 (f64::signum(0.0) is 1).
#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Reflect-101 boundary handling (-1 maps to 1).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

struct WindowStats {
    mu_x: f64,
    mu_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn window_stats(x: &Image, y: &Image, px: usize, py: usize, c: usize) -> WindowStats {
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in -SSIM_R..=SSIM_R {
        for dx in -SSIM_R..=SSIM_R {
            let qx = reflect(px as isize + dx, x.width);
            let qy = reflect(py as isize + dy, x.height);
            let xv = x.get(qx, qy, c);
            let yv = y.get(qx, qy, c);
            sx += xv;
            sy += yv;
            sxx += xv * xv;
            syy += yv * yv;
            sxy += xv * yv;
        }
    }
    let mu_x = sx / SSIM_N;
    let mu_y = sy / SSIM_N;
    WindowStats {
        mu_x,
        mu_y,
        var_x: sxx / SSIM_N - mu_x * mu_x,
        var_y: syy / SSIM_N - mu_y * mu_y,
        cov: sxy / SSIM_N - mu_x * mu_y,
    }
}

#[inline]
fn ssim_value(s: &WindowStats) -> f64 {
    let a1 = 2.0 * s.mu_x * s.mu_y + SSIM_C1;
    let a2 = 2.0 * s.cov + SSIM_C2;
    let b1 = s.mu_x * s.mu_x + s.mu_y * s.mu_y + SSIM_C1;
    let b2 = s.var_x + s.var_y + SSIM_C2;
    (a1 * a2) / (b1 * b2)
}

/// Per-pixel, per-channel SSIM map between two same-shape images.
pub fn ssim_map(x: &Image, y: &Image) -> Result<Image> {
    if !x.same_shape(y) {
        return Err(Error::Contract("ssim inputs must share shape".into()));
    }
    let mut out = Image::zeros(x.width, x.height, x.channels);
    for py in 0..x.height {
        for px in 0..x.width {
            for c in 0..x.channels {
                let s = window_stats(x, y, px, py, c);
                out.set(px, py, c, ssim_value(&s));
            }
        }
    }
    Ok(out)
}

/// Mean SSIM over all pixels and channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    let map = ssim_map(x, y)?;
    Ok(map.data.iter().sum::<f64>() / map.data.len() as f64)
}

/// Backward of the SSIM map w.r.t. `y`. `upstream` holds dL/dS per pixel and
/// channel; the return holds dL/dy.
pub fn ssim_backward(x: &Image, y: &Image, upstream: &Image) -> Result<Image> {
    if !x.same_shape(y) || !x.same_shape(upstream) {
        return Err(Error::Contract("ssim backward inputs must share shape".into()));
    }
    let mut grad = Image::zeros(x.width, x.height, x.channels);
    for py in 0..x.height {
        for px in 0..x.width {
            for c in 0..x.channels {
                let up = upstream.get(px, py, c);
                if up == 0.0 {
                    continue;
                }
                let s = window_stats(x, y, px, py, c);
                let a1 = 2.0 * s.mu_x * s.mu_y + SSIM_C1;
                let a2 = 2.0 * s.cov + SSIM_C2;
                let b1 = s.mu_x * s.mu_x + s.mu_y * s.mu_y + SSIM_C1;
                let b2 = s.var_x + s.var_y + SSIM_C2;
                let sv = (a1 * a2) / (b1 * b2);
                let d_mu_y = 2.0 * s.mu_x * a2 / (b1 * b2) - sv * 2.0 * s.mu_y / b1;
                let d_var_y = -sv / b2;
                let d_cov = 2.0 * a1 / (b1 * b2);
                for dy in -SSIM_R..=SSIM_R {
                    for dx in -SSIM_R..=SSIM_R {
                        let qx = reflect(px as isize + dx, x.width);
                        let qy = reflect(py as isize + dy, x.height);
                        let xv = x.get(qx, qy, c);
                        let yv = y.get(qx, qy, c);
                        let d = d_mu_y / SSIM_N
                            + d_var_y * 2.0 * (yv - s.mu_y) / SSIM_N
                            + d_cov * (xv - s.mu_x) / SSIM_N;
                        let cur = grad.get(qx, qy, c);
                        grad.set(qx, qy, c, cur + up * d);
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// beta * (1 - SSIM)/2 + (1 - beta) * |pred - target|, averaged over the
/// channels of pixels where `valid` holds (all pixels when `None`). Returns
/// the loss and its gradient w.r.t. `pred`; invalid pixels contribute no
/// loss, but SSIM windows may still pull gradient into neighboring pixels.
pub fn photometric_loss(
    pred: &Image,
    target: &Image,
    beta: f64,
    valid: Option<&[bool]>,
) -> Result<(f64, Image)> {
    if !pred.same_shape(target) {
        return Err(Error::Contract("photometric inputs must share shape".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config("photometric beta must be in [0, 1]".into()));
    }
    if let Some(v) = valid {
        if v.len() != pred.width * pred.height {
            return Err(Error::Contract("valid mask length mismatch".into()));
        }
    }
    let n_valid = match valid {
        Some(v) => v.iter().filter(|&&b| b).count(),
        None => pred.width * pred.height,
    };
    if n_valid == 0 {
        return Err(Error::DegenerateInput("photometric loss over zero valid pixels".into()));
    }
    let norm = 1.0 / (n_valid * pred.channels) as f64;

    let smap = ssim_map(target, pred)?;
    let mut loss = 0.0;
    let mut ssim_up = Image::zeros(pred.width, pred.height, pred.channels);
    let mut grad = Image::zeros(pred.width, pred.height, pred.channels);
    for py in 0..pred.height {
        for px in 0..pred.width {
            if let Some(v) = valid {
                if !v[py * pred.width + px] {
                    continue;
                }
            }
            for c in 0..pred.channels {
                let diff = pred.get(px, py, c) - target.get(px, py, c);
                loss += norm * (beta * 0.5 * (1.0 - smap.get(px, py, c)) + (1.0 - beta) * diff.abs());
                ssim_up.set(px, py, c, -norm * beta * 0.5);
                let cur = grad.get(px, py, c);
                grad.set(px, py, c, cur + norm * (1.0 - beta) * sign0(diff));
            }
        }
    }
    let ssim_grad = ssim_backward(target, pred, &ssim_up)?;
    for (g, sg) in grad.data.iter_mut().zip(&ssim_grad.data) {
        *g += sg;
    }
    Ok((loss, grad))
}

/// Total variation on the activated (sigmoid) opacity field: mean squared
/// difference over all axis-aligned vertex edges. Returns the loss and its
/// gradient w.r.t. the opacity logits.
pub fn tv_loss(grid: &VoxelGrid) -> (f64, Vec<f64>) {
    let [nx, ny, nz] = grid.dims;
    let act: Vec<f64> = grid.opacity_logits.iter().map(|&l| sigmoid(l)).collect();
    let n_edges = (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1);
    let norm = 1.0 / n_edges as f64;
    let mut loss = 0.0;
    let mut d_act = vec![0.0; act.len()];
    let mut edge = |a: usize, b: usize| {
        let d = act[a] - act[b];
        loss += norm * d * d;
        d_act[a] += 2.0 * norm * d;
        d_act[b] -= 2.0 * norm * d;
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v = grid.vertex_index(i, j, k);
                if i + 1 < nx {
                    edge(v, grid.vertex_index(i + 1, j, k));
                }
                if j + 1 < ny {
                    edge(v, grid.vertex_index(i, j + 1, k));
                }
                if k + 1 < nz {
                    edge(v, grid.vertex_index(i, j, k + 1));
                }
            }
        }
    }
    let d_logits: Vec<f64> = d_act
        .iter()
        .zip(&grid.opacity_logits)
        .map(|(g, &l)| g * sigmoid_derivative(l))
        .collect();
    (loss, d_logits)
}

/// Opacity-weighted semantic NLL. `probs` is the rendered H×W×C feature
/// image whose rows sum to the accumulated opacity; the loss is
/// -ln(max(p_gt, floor)) averaged over valid pixels. Returns the loss and
/// dL/dprobs.
pub fn semantic_loss(
    probs: &Image,
    gt_labels: &[usize],
    valid: &[bool],
) -> Result<(f64, Image)> {
    let n_pix = probs.width * probs.height;
    if gt_labels.len() != n_pix || valid.len() != n_pix {
        return Err(Error::Contract("semantic loss label/mask length mismatch".into()));
    }
    let n_valid = valid.iter().filter(|&&b| b).count();
    if n_valid == 0 {
        return Err(Error::DegenerateInput("semantic loss over zero valid pixels".into()));
    }
    let norm = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    let mut grad = Image::zeros(probs.width, probs.height, probs.channels);
    for i in 0..n_pix {
        if !valid[i] {
            continue;
        }
        let cls = gt_labels[i];
        if cls >= probs.channels {
            return Err(Error::Contract(format!("label {cls} out of range")));
        }
        let p = probs.data[i * probs.channels + cls];
        if p >= SEMANTIC_PROB_FLOOR {
            loss += -norm * p.ln();
            grad.data[i * probs.channels + cls] = -norm / p;
        } else {
            loss += -norm * SEMANTIC_PROB_FLOOR.ln();
        }
    }
    Ok((loss, grad))
}

/// L1 depth loss over pixels valid in both maps; gradient w.r.t. `pred`
/// values (zero at invalid pixels).
pub fn depth_l1_loss(
    pred: &crate::image::DepthMap,
    gt: &crate::image::DepthMap,
) -> Result<(f64, Vec<f64>)> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Contract("depth loss inputs must share shape".into()));
    }
    let mut n = 0usize;
    for i in 0..pred.values.len() {
        if pred.valid[i] && gt.valid[i] {
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::DegenerateInput("depth loss over zero jointly-valid pixels".into()));
    }
    let norm = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.values.len()];
    for i in 0..pred.values.len() {
        if pred.valid[i] && gt.valid[i] {
            let d = pred.values[i] - gt.values[i];
            loss += norm * d.abs();
            grad[i] = norm * sign0(d);
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::DepthMap;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_fn(w, h, c, |_, _, _| rng.gen_range(0.05..0.95))
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let img = random_image(&mut rng, 9, 7, 3);
        assert_relative_eq!(ssim(&img, &img).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_of_constant_images_closed_form() {
        let (a, b) = (0.3, 0.7);
        let x = Image::from_fn(6, 6, 1, |_, _, _| a);
        let y = Image::from_fn(6, 6, 1, |_, _, _| b);
        let want = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        assert_relative_eq!(ssim(&x, &y).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_image(&mut rng, 8, 8, 2);
        let y = random_image(&mut rng, 8, 8, 2);
        let a = ssim(&x, &y).unwrap();
        let b = ssim(&y, &x).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
        assert!(a <= 1.0 + 1e-12 && a >= -1.0);
    }

    #[test]
    fn ssim_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = random_image(&mut rng, 6, 5, 2);
        let mut y = random_image(&mut rng, 6, 5, 2);
        let upstream = Image::from_fn(6, 5, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let grad = ssim_backward(&x, &y, &upstream).unwrap();
        let loss = |y: &Image| -> f64 {
            let m = ssim_map(&x, y).unwrap();
            m.data.iter().zip(&upstream.data).map(|(s, u)| s * u).sum()
        };
        let step = 1e-6;
        for i in 0..y.data.len() {
            let orig = y.data[i];
            y.data[i] = orig + step;
            let lp = loss(&y);
            y.data[i] = orig - step;
            let lm = loss(&y);
            y.data[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            assert!((grad.data[i] - fd).abs() <= 1e-5, "idx {i}: {} vs {}", grad.data[i], fd);
        }
    }

    #[test]
    fn photometric_zero_for_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let img = random_image(&mut rng, 8, 6, 3);
        let (l, g) = photometric_loss(&img, &img, DEFAULT_PHOTOMETRIC_BETA, None).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.data.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn photometric_pure_l1_closed_form() {
        let x = Image::from_fn(5, 5, 1, |_, _, _| 0.2);
        let y = Image::from_fn(5, 5, 1, |_, _, _| 0.5);
        let (l, _) = photometric_loss(&y, &x, 0.0, None).unwrap();
        assert_relative_eq!(l, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let target = random_image(&mut rng, 6, 5, 2);
        let mut pred = random_image(&mut rng, 6, 5, 2);
        let valid: Vec<bool> = (0..30).map(|_| rng.gen_bool(0.8)).collect();
        let (_, grad) = photometric_loss(&pred, &target, 0.85, Some(&valid)).unwrap();
        let step = 1e-6;
        for i in 0..pred.data.len() {
            let orig = pred.data[i];
            pred.data[i] = orig + step;
            let (lp, _) = photometric_loss(&pred, &target, 0.85, Some(&valid)).unwrap();
            pred.data[i] = orig - step;
            let (lm, _) = photometric_loss(&pred, &target, 0.85, Some(&valid)).unwrap();
            pred.data[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            assert!((grad.data[i] - fd).abs() <= 1e-5, "idx {i}: {} vs {}", grad.data[i], fd);
        }
    }

    #[test]
    fn tv_zero_on_constant_grid() {
        let mut g = VoxelGrid::new([0.0; 3], [1.0; 3], [3, 3, 3], 2).unwrap();
        for l in g.opacity_logits.iter_mut() {
            *l = 1.3;
        }
        let (loss, grad) = tv_loss(&g);
        assert!(loss.abs() < 1e-15);
        assert!(grad.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn tv_two_level_closed_form() {
        // 2x1-style grid: dims [2,2,2]; set one x-slab high, other low
        let mut g = VoxelGrid::new([0.0; 3], [1.0; 3], [2, 2, 2], 2).unwrap();
        for k in 0..2 {
            for j in 0..2 {
                let hi = g.vertex_index(1, j, k);
                g.opacity_logits[hi] = 10.0;
                let lo = g.vertex_index(0, j, k);
                g.opacity_logits[lo] = -10.0;
            }
        }
        // 4 x-edges differ by ~1; 8 y/z edges are flat; 12 edges total
        let (loss, _) = tv_loss(&g);
        let d = sigmoid(10.0) - sigmoid(-10.0);
        assert_relative_eq!(loss, 4.0 * d * d / 12.0, epsilon = 1e-12);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut g = VoxelGrid::new([0.0; 3], [1.0; 3], [3, 2, 4], 2).unwrap();
        for l in g.opacity_logits.iter_mut() {
            *l = rng.gen_range(-2.0..2.0);
        }
        let (_, grad) = tv_loss(&g);
        let step = 1e-6;
        for i in 0..g.opacity_logits.len() {
            let orig = g.opacity_logits[i];
            g.opacity_logits[i] = orig + step;
            let (lp, _) = tv_loss(&g);
            g.opacity_logits[i] = orig - step;
            let (lm, _) = tv_loss(&g);
            g.opacity_logits[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            assert!((grad[i] - fd).abs() <= 1e-8);
        }
    }

    #[test]
    fn semantic_uniform_probs_is_ln_classes() {
        let probs = Image::from_fn(4, 4, 4, |_, _, _| 0.25);
        let labels = vec![2usize; 16];
        let valid = vec![true; 16];
        let (l, _) = semantic_loss(&probs, &labels, &valid).unwrap();
        assert_relative_eq!(l, 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn semantic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let mut probs = Image::from_fn(5, 4, 3, |_, _, _| rng.gen_range(0.05..0.4));
        let labels: Vec<usize> = (0..20).map(|_| rng.gen_range(0..3)).collect();
        let valid: Vec<bool> = (0..20).map(|_| rng.gen_bool(0.75)).collect();
        let (_, grad) = semantic_loss(&probs, &labels, &valid).unwrap();
        let step = 1e-7;
        for i in 0..probs.data.len() {
            let orig = probs.data[i];
            probs.data[i] = orig + step;
            let (lp, _) = semantic_loss(&probs, &labels, &valid).unwrap();
            probs.data[i] = orig - step;
            let (lm, _) = semantic_loss(&probs, &labels, &valid).unwrap();
            probs.data[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            assert!((grad.data[i] - fd).abs() <= 1e-4 * grad.data[i].abs().max(1.0));
        }
    }

    #[test]
    fn depth_l1_ignores_invalid() {
        let mut pred = DepthMap::constant(3, 1, 2.0);
        let mut gt = DepthMap::constant(3, 1, 1.0);
        gt.valid[1] = false;
        pred.valid[2] = false;
        let (l, g) = depth_l1_loss(&pred, &gt).unwrap();
        assert_relative_eq!(l, 1.0, epsilon = 1e-12);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-12);
    }
}
