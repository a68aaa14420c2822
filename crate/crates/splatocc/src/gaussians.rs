//! 3D Gaussian primitives: density evaluation, covariance construction and
//! perspective projection of the covariance onto the image plane.
//!
//! Quaternions are scalar-first (w, x, y, z) everywhere, including the
//! serialized form.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{projection_jacobian, Camera};

/// A single anisotropic 3D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    /// Mean position in meters.
    pub mean: Vector3<f64>,
    /// Per-axis standard deviations in meters, strictly positive.
    pub scale: Vector3<f64>,
    /// Orientation, scalar-first unit quaternion.
    pub rotation: UnitQuaternion<f64>,
    /// Pre-blend opacity in [0, 1].
    pub opacity: f64,
    /// Per-point color / semantic feature.
    pub feature: Vec<f64>,
}

impl Gaussian3D {
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, feature: Vec<f64>) -> Self {
        Self {
            mean,
            scale: Vector3::new(scale, scale, scale),
            rotation: UnitQuaternion::identity(),
            opacity,
            feature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.x > 0.0 && self.scale.y > 0.0 && self.scale.z > 0.0) {
            return Err(Error::Precondition("gaussian scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Precondition("gaussian opacity must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Structure-of-arrays set of Gaussians sharing one feature dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<Vector3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub rotations: Vec<UnitQuaternion<f64>>,
    pub opacities: Vec<f64>,
    /// N×C, row per Gaussian.
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl GaussianSet {
    pub fn with_feature_dim(feature_dim: usize) -> Self {
        Self { feature_dim, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, g: Gaussian3D) {
        assert_eq!(g.feature.len(), self.feature_dim);
        self.means.push(g.mean);
        self.scales.push(g.scale);
        self.rotations.push(g.rotation);
        self.opacities.push(g.opacity);
        self.features.extend_from_slice(&g.feature);
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn get(&self, i: usize) -> Gaussian3D {
        Gaussian3D {
            mean: self.means[i],
            scale: self.scales[i],
            rotation: self.rotations[i],
            opacity: self.opacities[i],
            feature: self.feature(i).to_vec(),
        }
    }

    /// Concatenates another set (same feature dimension).
    pub fn extend(&mut self, other: &GaussianSet) {
        assert_eq!(self.feature_dim, other.feature_dim);
        self.means.extend_from_slice(&other.means);
        self.scales.extend_from_slice(&other.scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacities.extend_from_slice(&other.opacities);
        self.features.extend_from_slice(&other.features);
    }
}

/// Quaternion (w, x, y, z) to rotation matrix. Normalizes internally; a zero
/// quaternion is a precondition violation.
pub fn quat_to_rotation(q: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    if q.norm() < 1e-12 {
        return Err(Error::Precondition("zero quaternion has no orientation".into()));
    }
    Ok(UnitQuaternion::from_quaternion(*q).to_rotation_matrix().into_inner())
}

/// Covariance from scale and orientation: Sigma = R diag(s)^2 R^T.
pub fn build_covariance(scale: Vector3<f64>, q: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0) {
        return Err(Error::Precondition("covariance scale must be positive".into()));
    }
    let r = quat_to_rotation(q)?;
    let s2 = Matrix3::from_diagonal(&scale.component_mul(&scale));
    Ok(r * s2 * r.transpose())
}

/// Unnormalized Gaussian density: exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)), so the
/// value at the mean is exactly 1.
pub fn eval_gaussian(g: &Gaussian3D, x: Vector3<f64>) -> f64 {
    let cov = build_covariance(g.scale, &g.rotation.into_inner()).expect("valid gaussian");
    let d = x - g.mean;
    let sol = cov.lu().solve(&d).expect("SPD covariance");
    (-0.5 * d.dot(&sol)).exp()
}

/// Screen-space footprint of a projected Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    /// Raw 2x2 covariance in pixels^2 (no regularization applied).
    pub cov2: Matrix2<f64>,
    /// Camera-frame z of the mean.
    pub depth: f64,
}

/// Projects mean and covariance into a camera. Returns `None` when the mean
/// is at or behind the near plane (culled, not an error).
pub fn project_covariance(g: &Gaussian3D, camera: &Camera, near: f64) -> Option<ProjectedGaussian> {
    let w = camera.pose.rotation.inverse().matrix().clone_owned();
    let p_cam = w * g.mean + w * (-camera.pose.translation);
    if p_cam.z <= near {
        return None;
    }
    let cov3 = build_covariance(g.scale, &g.rotation.into_inner()).ok()?;
    let j: Matrix2x3<f64> = projection_jacobian(&camera.intrinsics, p_cam);
    let cov_cam = w * cov3 * w.transpose();
    let cov2 = j * cov_cam * j.transpose();
    let intr = &camera.intrinsics;
    let mean2d = Vector2::new(
        intr.fx * p_cam.x / p_cam.z + intr.cx,
        intr.fy * p_cam.y / p_cam.z + intr.cy,
    );
    Some(ProjectedGaussian { mean2d, cov2, depth: p_cam.z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_unit_quat(rng: &mut ChaCha8Rng) -> Quaternion<f64> {
        loop {
            let q = Quaternion::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            if q.norm() > 1e-3 {
                return q.normalize();
            }
        }
    }

    #[test]
    fn quat_identity() {
        let r = quat_to_rotation(&Quaternion::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((r - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn quat_90_about_z() {
        let a = std::f64::consts::FRAC_PI_4;
        let q = Quaternion::new(a.cos(), 0.0, 0.0, a.sin());
        let r = quat_to_rotation(&q).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).norm() < 1e-12);
    }

    #[test]
    fn quat_zero_rejected() {
        assert!(quat_to_rotation(&Quaternion::new(0.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn quat_orthonormality_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let r = quat_to_rotation(&random_unit_quat(&mut rng)).unwrap();
            assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn covariance_isotropic() {
        let s = 0.7;
        let cov = build_covariance(Vector3::new(s, s, s), &Quaternion::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((cov - Matrix3::identity() * s * s).norm() < 1e-12);
    }

    #[test]
    fn covariance_diagonal() {
        let cov = build_covariance(Vector3::new(1.0, 2.0, 3.0), &Quaternion::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((cov - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0))).norm() < 1e-12);
    }

    #[test]
    fn covariance_rejects_nonpositive_scale() {
        assert!(build_covariance(Vector3::new(1.0, 0.0, 1.0), &Quaternion::new(1.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn covariance_eigenvalues_match_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let scale = Vector3::new(
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.1..3.0),
            );
            let cov = build_covariance(scale, &random_unit_quat(&mut rng)).unwrap();
            assert!((cov - cov.transpose()).norm() < 1e-9);
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            let mut s2: Vec<f64> = scale.iter().map(|s| s * s).collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s2.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, s) in eig.iter().zip(&s2) {
                assert!((e - s).abs() < 1e-9, "eig {e} vs scale^2 {s}");
            }
        }
    }

    #[test]
    fn eval_at_mean_is_one() {
        let g = Gaussian3D::isotropic(Vector3::new(1.0, -2.0, 3.0), 0.5, 1.0, vec![1.0]);
        assert_eq!(eval_gaussian(&g, g.mean), 1.0);
    }

    #[test]
    fn eval_unit_mahalanobis() {
        let s = 0.4;
        let g = Gaussian3D::isotropic(Vector3::zeros(), s, 1.0, vec![1.0]);
        let v = eval_gaussian(&g, Vector3::new(s, 0.0, 0.0));
        assert_relative_eq!(v, (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn eval_matches_solve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = Gaussian3D {
                mean: Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                scale: Vector3::new(rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)),
                rotation: UnitQuaternion::from_quaternion(random_unit_quat(&mut rng)),
                opacity: 1.0,
                feature: vec![1.0],
            };
            let x = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            // oracle: explicit inverse via cholesky
            let cov = build_covariance(g.scale, &g.rotation.into_inner()).unwrap();
            let inv = cov.cholesky().unwrap().inverse();
            let d = x - g.mean;
            let expect = (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
            assert!((eval_gaussian(&g, x) - expect).abs() <= 1e-9);
        }
    }

    #[test]
    fn eval_invariant_under_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let g = Gaussian3D {
                mean: Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                scale: Vector3::new(rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)),
                rotation: UnitQuaternion::from_quaternion(random_unit_quat(&mut rng)),
                opacity: 1.0,
                feature: vec![1.0],
            };
            let x = g.mean + Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let t = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let rq = UnitQuaternion::from_quaternion(random_unit_quat(&mut rng));
            let g2 = Gaussian3D {
                mean: rq * g.mean + t,
                scale: g.scale,
                rotation: rq * g.rotation,
                opacity: g.opacity,
                feature: g.feature.clone(),
            };
            let x2 = rq * x + t;
            assert!((eval_gaussian(&g, x) - eval_gaussian(&g2, x2)).abs() < 1e-10);
        }
    }

    fn on_axis_camera(f: f64) -> Camera {
        let intr = Intrinsics { fx: f, fy: f, cx: 50.0, cy: 50.0, width: 101, height: 101 };
        Camera::new(intr, Pose::identity())
    }

    #[test]
    fn projected_covariance_on_axis_closed_form() {
        let f = 120.0;
        let s = 0.05;
        let z = 3.0;
        let cam = on_axis_camera(f);
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, z), s, 1.0, vec![1.0]);
        let p = project_covariance(&g, &cam, 1e-3).unwrap();
        let expect = (f * s / z).powi(2);
        assert!((p.cov2 - Matrix2::identity() * expect).norm() < 1e-9);
        assert_relative_eq!(p.depth, z, epsilon = 1e-12);

        // doubling depth quarters the footprint
        let g2 = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 2.0 * z), s, 1.0, vec![1.0]);
        let p2 = project_covariance(&g2, &cam, 1e-3).unwrap();
        assert!((p2.cov2 * 4.0 - p.cov2).norm() < 1e-9);
    }

    #[test]
    fn footprint_scales_as_fs_over_z() {
        let f = 100.0;
        let s = 0.1;
        let cam = on_axis_camera(f);
        for z in [1.0, 2.0, 4.0, 8.0] {
            let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, z), s, 1.0, vec![1.0]);
            let p = project_covariance(&g, &cam, 1e-3).unwrap();
            let radius = p.cov2[(0, 0)].sqrt();
            assert!((radius - f * s / z).abs() <= 1e-6);
        }
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let cam = on_axis_camera(100.0);
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.1, 1.0, vec![1.0]);
        assert!(project_covariance(&g, &cam, 1e-3).is_none());
    }

    #[test]
    fn covariance_vanishes_with_scale() {
        let cam = on_axis_camera(100.0);
        let mut prev = f64::INFINITY;
        for s in [1e-2, 1e-4, 1e-6] {
            let g = Gaussian3D::isotropic(Vector3::new(0.2, -0.1, 4.0), s, 1.0, vec![1.0]);
            let p = project_covariance(&g, &cam, 1e-3).unwrap();
            let n = p.cov2.norm();
            assert!(n < prev);
            prev = n;
        }
        assert!(prev < 1e-9);
    }

    #[test]
    fn projected_covariance_matches_fd_jacobian_oracle() {
        // Oracle: propagate the 3D covariance through a central-finite-
        // difference Jacobian of the full projection, independent of the
        // analytic J used by the implementation.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let intr = Intrinsics {
                fx: rng.gen_range(80.0..200.0),
                fy: rng.gen_range(80.0..200.0),
                cx: 40.0,
                cy: 30.0,
                width: 80,
                height: 60,
            };
            let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            let pose = Pose::new(
                nalgebra::Rotation3::from_scaled_axis(axis * 0.5),
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            );
            let cam = Camera::new(intr, pose);
            let mean_cam = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(2.0..8.0));
            let mean_world = cam.pose.transform(mean_cam);
            let g = Gaussian3D {
                mean: mean_world,
                scale: Vector3::new(rng.gen_range(0.02..0.2), rng.gen_range(0.02..0.2), rng.gen_range(0.02..0.2)),
                rotation: UnitQuaternion::from_quaternion(random_unit_quat(&mut rng)),
                opacity: 1.0,
                feature: vec![1.0],
            };
            let p = project_covariance(&g, &cam, 1e-3).unwrap();

            // FD Jacobian of world point -> pixel
            let h = 1e-6;
            let mut jfd = nalgebra::Matrix2x3::<f64>::zeros();
            for k in 0..3 {
                let mut dp = Vector3::zeros();
                dp[k] = h;
                let a = crate::geometry::project(&cam, mean_world + dp).pixel;
                let b = crate::geometry::project(&cam, mean_world - dp).pixel;
                jfd.set_column(k, &((a - b) / (2.0 * h)));
            }
            let cov3 = build_covariance(g.scale, &g.rotation.into_inner()).unwrap();
            let oracle = jfd * cov3 * jfd.transpose();
            let rel = (p.cov2 - oracle).norm() / oracle.norm().max(1e-12);
            assert!(rel <= 1e-3, "relative error {rel}");
        }
    }
}
