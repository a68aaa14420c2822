//! Cross-view overlap masks. A pixel of camera i "overlaps" camera j when
//! enough samples along its ray land inside camera j's frustum. Overlap
//! regions are eroded and then dropped from one side of each adjacent pair so
//! that the dropped regions must be re-synthesized from the neighbor during
//! cross-view fitting.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project, unproject, Camera, CameraRig};
use crate::image::Mask;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OverlapConfig {
    /// Uniform depth samples per ray.
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    /// Square-kernel erosion radius applied to the overlap mask.
    pub erosion_radius: usize,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        Self { n_samples: 64, near: 0.1, far: 12.0, erosion_radius: 4 }
    }
}

impl OverlapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config("overlap sampling needs at least 2 samples".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Config("require 0 < near < far".into()));
        }
        Ok(())
    }
}

/// Minimum number of in-frustum ray samples for a pixel to count as
/// overlapping ("more than one").
pub const OVERLAP_MIN_SAMPLES: usize = 2;

/// Mask on `cam_i`'s image plane: pixels whose rays pass through `cam_j`'s
/// frustum. Depth samples are placed at bin centers of `[near, far]`, so the
/// mask is deterministic in the sample count.
pub fn compute_overlap_mask(cam_i: &Camera, cam_j: &Camera, cfg: &OverlapConfig) -> Result<Mask> {
    cfg.validate()?;
    let (w, h) = (cam_i.width(), cam_i.height());
    let delta = (cfg.far - cfg.near) / cfg.n_samples as f64;
    let rows: Vec<Vec<bool>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![false; w];
            for (x, out) in row.iter_mut().enumerate() {
                let mut hits = 0usize;
                for s in 0..cfg.n_samples {
                    let depth = cfg.near + (s as f64 + 0.5) * delta;
                    let p = unproject(cam_i, Vector2::new(x as f64, y as f64), depth)
                        .expect("positive sample depth");
                    let proj = project(cam_j, p);
                    if proj.is_valid() && proj.in_bounds(&cam_j.intrinsics) {
                        hits += 1;
                        if hits >= OVERLAP_MIN_SAMPLES {
                            break;
                        }
                    }
                }
                *out = hits >= OVERLAP_MIN_SAMPLES;
            }
            row
        })
        .collect();
    let mut mask = Mask::filled(w, h, false);
    for (y, row) in rows.into_iter().enumerate() {
        mask.data[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    Ok(mask)
}

/// Morphological erosion with a (2r+1)^2 square kernel, separable min filter.
/// Pixels outside the image count as false, so borders erode.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let r = radius as isize;
    // horizontal pass
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        for x in 0..w as isize {
            let mut all = true;
            for dx in -r..=r {
                let xx = x + dx;
                if xx < 0 || xx >= w as isize || !mask.data[y * w + xx as usize] {
                    all = false;
                    break;
                }
            }
            horiz[y * w + x as usize] = all;
        }
    }
    // vertical pass
    let mut out = Mask::filled(w, h, false);
    for y in 0..h as isize {
        for x in 0..w {
            let mut all = true;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize || !horiz[yy as usize * w + x] {
                    all = false;
                    break;
                }
            }
            out.data[y as usize * w + x] = all;
        }
    }
    out
}

/// Per-pair mask-out: removes the (already eroded) overlap region from the
/// side(s) flagged for dropping and returns per-camera keep-masks. Dropping
/// both sides leaves the pair without any cross-view supervision, which is a
/// configuration error.
pub fn maskout_pair(
    overlap_on_i: &Mask,
    overlap_on_j: &Mask,
    drop_i: bool,
    drop_j: bool,
) -> Result<(Mask, Mask)> {
    if drop_i && drop_j {
        return Err(Error::Config("cannot drop both sides of an adjacent pair".into()));
    }
    let keep = |m: &Mask, drop: bool| {
        let mut out = Mask::filled(m.width, m.height, true);
        if drop {
            for (o, &v) in out.data.iter_mut().zip(&m.data) {
                *o = !v;
            }
        }
        out
    };
    Ok((keep(overlap_on_i, drop_i), keep(overlap_on_j, drop_j)))
}

/// Per-camera GSP keep-masks for a rig: overlap masks are computed per
/// adjacent pair, eroded, and the lower-index side of each pair drops its
/// overlap region. A camera in several pairs accumulates every drop.
pub fn gsp_selection_masks(rig: &CameraRig, cfg: &OverlapConfig) -> Result<Vec<Mask>> {
    rig.validate()?;
    let mut keeps: Vec<Mask> = rig
        .cameras
        .iter()
        .map(|c| Mask::filled(c.width(), c.height(), true))
        .collect();
    for &(i, j) in &rig.adjacency {
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        let overlap = erode(
            &compute_overlap_mask(&rig.cameras[lo], &rig.cameras[hi], cfg)?,
            cfg.erosion_radius,
        );
        for (k, &v) in overlap.data.iter().enumerate() {
            if v {
                keeps[lo].data[k] = false;
            }
        }
    }
    Ok(keeps)
}
