//! Voxel-vertex grid: axis-aligned bounds, per-vertex opacity logit and
//! per-class semantic logits. Vertices span the bounds inclusively; storage
//! is x-fastest.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BOUNDS_MIN: [f64; 3] = [-8.0, -8.0, -1.0];
pub const DEFAULT_BOUNDS_MAX: [f64; 3] = [8.0, 8.0, 3.0];
pub const DEFAULT_DIMS: [usize; 3] = [80, 80, 20];
/// free space + ground + two obstacle classes
pub const DEFAULT_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    /// Vertex counts per axis.
    pub dims: [usize; 3],
    /// Number of semantic classes (class 0 = free space).
    pub classes: usize,
    /// One logit per vertex, x-fastest.
    pub opacity_logits: Vec<f64>,
    /// `classes` logits per vertex, vertex-major.
    pub semantic_logits: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(bounds_min: [f64; 3], bounds_max: [f64; 3], dims: [usize; 3], classes: usize) -> Result<Self> {
        for a in 0..3 {
            if dims[a] < 2 {
                return Err(Error::Config("grid needs at least 2 vertices per axis".into()));
            }
            if !(bounds_min[a] < bounds_max[a]) {
                return Err(Error::Config("grid bounds min must be < max per axis".into()));
            }
        }
        if classes < 2 {
            return Err(Error::Config("grid needs at least 2 classes".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            bounds_min,
            bounds_max,
            dims,
            classes,
            opacity_logits: vec![0.0; n],
            semantic_logits: vec![0.0; n * classes],
        })
    }

    pub fn default_desk_scale() -> Self {
        Self::new(DEFAULT_BOUNDS_MIN, DEFAULT_BOUNDS_MAX, DEFAULT_DIMS, DEFAULT_CLASSES).unwrap()
    }

    pub fn vertex_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    /// Edge length per axis (vertex spacing).
    pub fn spacing(&self) -> Vector3<f64> {
        Vector3::new(
            (self.bounds_max[0] - self.bounds_min[0]) / (self.dims[0] - 1) as f64,
            (self.bounds_max[1] - self.bounds_min[1]) / (self.dims[1] - 1) as f64,
            (self.bounds_max[2] - self.bounds_min[2]) / (self.dims[2] - 1) as f64,
        )
    }

    /// The largest per-axis edge length, used as the "voxel edge" unit in
    /// depth-agreement checks.
    pub fn max_edge(&self) -> f64 {
        let s = self.spacing();
        s.x.max(s.y).max(s.z)
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let s = self.spacing();
        Vector3::new(
            self.bounds_min[0] + s.x * i as f64,
            self.bounds_min[1] + s.y * j as f64,
            self.bounds_min[2] + s.z * k as f64,
        )
    }

    pub fn semantic_logit(&self, v: usize, c: usize) -> f64 {
        self.semantic_logits[v * self.classes + c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.opacity_logits.iter().any(|v| !v.is_finite())
            || self.semantic_logits.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Precondition("grid logits must be finite".into()));
        }
        Ok(())
    }

    /// Per-vertex activated opacity (sigmoid of the logit).
    pub fn activated_opacity(&self) -> Vec<f64> {
        self.opacity_logits.iter().map(|l| sigmoid(*l)).collect()
    }

    /// Per-vertex class probabilities (softmax of the semantic logits),
    /// vertex-major.
    pub fn activated_semantics(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.semantic_logits.len()];
        for v in 0..self.vertex_count() {
            let row = &self.semantic_logits[v * self.classes..(v + 1) * self.classes];
            softmax_into(row, &mut out[v * self.classes..(v + 1) * self.classes]);
        }
        out
    }

    /// Hard per-vertex class: argmax semantics where sigmoid(opacity) >= 0.5,
    /// otherwise free space (class 0).
    pub fn hard_classes(&self) -> Vec<usize> {
        (0..self.vertex_count())
            .map(|v| {
                if sigmoid(self.opacity_logits[v]) >= 0.5 {
                    let row = &self.semantic_logits[v * self.classes..(v + 1) * self.classes];
                    argmax(row)
                } else {
                    0
                }
            })
            .collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_and_positions() {
        let g = VoxelGrid::new([-8.0, -8.0, -1.0], [8.0, 8.0, 3.0], [81, 81, 21], 4).unwrap();
        let s = g.spacing();
        assert!((s.x - 0.2).abs() < 1e-12);
        assert!((s.z - 0.2).abs() < 1e-12);
        let p = g.vertex_position(0, 0, 0);
        assert_eq!(p, Vector3::new(-8.0, -8.0, -1.0));
        let p = g.vertex_position(80, 80, 20);
        assert!((p - Vector3::new(8.0, 8.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_dims() {
        assert!(VoxelGrid::new([0.0; 3], [1.0, 1.0, 1.0], [1, 4, 4], 4).is_err());
        assert!(VoxelGrid::new([0.0; 3], [0.0, 1.0, 1.0], [4, 4, 4], 4).is_err());
        assert!(VoxelGrid::new([0.0; 3], [1.0, 1.0, 1.0], [4, 4, 4], 1).is_err());
    }

    #[test]
    fn hard_classes_threshold() {
        let mut g = VoxelGrid::new([0.0; 3], [1.0, 1.0, 1.0], [2, 2, 2], 3).unwrap();
        g.opacity_logits[0] = 5.0;
        g.semantic_logits[0 * 3 + 2] = 4.0;
        let c = g.hard_classes();
        assert_eq!(c[0], 2);
        assert!(c[1..].iter().all(|&c| c == 0));
    }
}
