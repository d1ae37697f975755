//! Rigid poses, pinhole projection and the robust reprojection objective.
//!
//! Poses are world-to-camera everywhere: `x_cam = R * x_world + t`.
//! Pixel coordinates are continuous; the pixel with column index `j` spans
//! `[j, j + 1)` and has its center at `j + 0.5`.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Matrix4, Rotation3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-frame depths at or below this are behind the camera.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not proper orthonormal
    /// matrices to within `tol`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, tol: f64) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !ortho.is_finite() || ortho > tol {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (|R^T R - I| = {ortho:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > tol.max(1e-9) * 3.0 {
            return Err(Error::invalid(format!(
                "rotation determinant is {det:.6}, expected +1"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation is not finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    /// Splits a homogeneous 4x4 matrix, validating the rotation block with `tol`
    /// and then projecting it to the nearest rotation.
    pub fn from_matrix(m: &Matrix4<f64>, tol: f64) -> Result<Self> {
        let bottom = Vector4::new(m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]);
        if (bottom - Vector4::new(0.0, 0.0, 0.0, 1.0)).norm() > tol {
            return Err(Error::invalid("bottom row of pose matrix is not [0 0 0 1]"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(r, t, tol)?;
        Ok(Self {
            rotation: nearest_rotation(&r),
            translation: t,
        })
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_matrix3x4(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-to-camera pose for a camera at `eye` looking at `target`, with
    /// the image y axis pointing along `-up` (OpenCV convention: x right,
    /// y down, z forward).
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("look_at: eye and target coincide"));
        }
        let z = forward.normalize();
        let x = z.cross(&-up);
        if x.norm() < 1e-9 {
            return Err(Error::invalid("look_at: up vector parallel to view direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            rotation: r,
            translation: -(r * eye),
        })
    }

    /// Angle in degrees of the relative rotation `self.R^T * other.R`.
    pub fn rotation_error_deg(&self, other: &RigidPose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation)).to_degrees()
    }

    /// Distance between camera centers, in the units of the translation.
    pub fn center_distance(&self, other: &RigidPose) -> f64 {
        (self.camera_center() - other.camera_center()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

/// Rotation angle in radians of a (near-)rotation matrix.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // acos is ill-conditioned near 0; use atan2 of the axis magnitude instead.
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm()
        * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    s.atan2(c)
}

/// Nearest proper rotation in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Rodrigues exponential map.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*w).into_inner()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, focal, width as f64 * 0.5, height as f64 * 0.5, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::invalid(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    /// Camera-frame ray direction with unit z through `pixel`.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    /// Intrinsics of the same camera after resizing the image by `scale`.
    pub fn scaled(&self, scale: f64, width: usize, height: usize) -> Self {
        Self {
            fx: self.fx * scale,
            fy: self.fy * scale,
            cx: self.cx * scale,
            cy: self.cy * scale,
            width,
            height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub valid: bool,
}

pub fn project(pose: &RigidPose, k: &CameraIntrinsics, point: &Vector3<f64>) -> Projection {
    project_camera(k, &pose.transform_point(point))
}

pub fn project_camera(k: &CameraIntrinsics, pc: &Vector3<f64>) -> Projection {
    let z = pc.z;
    Projection {
        pixel: Vector2::new(k.fx * pc.x / z + k.cx, k.fy * pc.y / z + k.cy),
        depth: z,
        valid: z > MIN_PROJECTION_DEPTH,
    }
}

/// World point seen at `pixel` with camera-frame depth `depth`.
pub fn backproject(
    pose: &RigidPose,
    k: &CameraIntrinsics,
    pixel: &Vector2<f64>,
    depth: f64,
) -> Vector3<f64> {
    let pc = k.ray(pixel) * depth;
    pose.rotation.transpose() * (pc - pose.translation)
}

/// d(pixel)/d(camera point) of the pinhole model.
pub fn projection_jacobian(k: &CameraIntrinsics, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz2,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub scene_point: Vector3<f64>,
    pub confidence: f64,
}

impl Correspondence {
    pub fn new(pixel: Vector2<f64>, scene_point: Vector3<f64>) -> Self {
        Self {
            pixel,
            scene_point,
            confidence: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionError {
    pub error: f64,
    pub valid: bool,
}

/// Euclidean pixel distance between the projected scene point and the
/// observed pixel. Points behind the camera report `invalid_error`.
pub fn reprojection_error(
    corr: &Correspondence,
    pose: &RigidPose,
    k: &CameraIntrinsics,
    invalid_error: f64,
) -> ReprojectionError {
    let p = project(pose, k, &corr.scene_point);
    if p.valid {
        ReprojectionError {
            error: (p.pixel - corr.pixel).norm(),
            valid: true,
        }
    } else {
        ReprojectionError {
            error: invalid_error,
            valid: false,
        }
    }
}

/// `clamp * tanh(e / clamp)`: linear near zero, saturating at `clamp`.
#[inline]
pub fn soft_clamp(e: f64, clamp: f64) -> f64 {
    clamp * (e / clamp).tanh()
}

/// Mean robust reprojection loss over a set of terms. Valid terms contribute
/// `soft_clamp(error, clamp)`; invalid terms contribute `invalid_penalty(i)`.
pub fn robust_reproj_loss<F>(
    errors: &[f64],
    valid: &[bool],
    clamp: f64,
    invalid_penalty: F,
) -> Result<f64>
where
    F: Fn(usize) -> f64,
{
    if clamp <= 0.0 || !clamp.is_finite() {
        return Err(Error::invalid(format!("clamp must be positive, got {clamp}")));
    }
    if errors.is_empty() {
        return Err(Error::Empty("no correspondences"));
    }
    if errors.len() != valid.len() {
        return Err(Error::DimensionMismatch {
            context: "robust_reproj_loss validity flags",
            expected: errors.len(),
            got: valid.len(),
        });
    }
    let total: f64 = errors
        .iter()
        .zip(valid)
        .enumerate()
        .map(|(i, (&e, &ok))| if ok { soft_clamp(e, clamp) } else { invalid_penalty(i) })
        .sum();
    Ok(total / errors.len() as f64)
}

/// Depth window and pseudo-target placement for implausible predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReprojLossConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    pub pseudo_depth: f64,
}

impl Default for ReprojLossConfig {
    fn default() -> Self {
        Self {
            min_depth: 0.1,
            max_depth: 1000.0,
            pseudo_depth: 10.0,
        }
    }
}

/// Per-point robust loss term and its gradient w.r.t. the predicted world
/// point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLoss {
    pub value: f64,
    pub grad: Vector3<f64>,
    pub valid: bool,
    /// Pixel error for valid predictions, distance to the pseudo target otherwise.
    pub error: f64,
}

pub fn point_loss(
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
    pose: &RigidPose,
    k: &CameraIntrinsics,
    clamp: f64,
    cfg: &ReprojLossConfig,
) -> PointLoss {
    let pc = pose.transform_point(point);
    if pc.z >= cfg.min_depth && pc.z <= cfg.max_depth {
        let proj = project_camera(k, &pc);
        let r = proj.pixel - pixel;
        let e = r.norm();
        let th = (e / clamp).tanh();
        let value = clamp * th;
        let grad = if e > 1e-12 {
            let de = 1.0 - th * th;
            let dp = r * (de / e);
            pose.rotation.transpose() * (projection_jacobian(k, &pc).transpose() * dp)
        } else {
            Vector3::zeros()
        };
        PointLoss {
            value,
            grad,
            valid: true,
            error: e,
        }
    } else {
        let target = backproject(pose, k, pixel, cfg.pseudo_depth);
        let d = point - target;
        let dist = d.norm();
        let grad = if dist > 1e-12 { d / dist } else { Vector3::zeros() };
        PointLoss {
            value: dist,
            grad,
            valid: false,
            error: dist,
        }
    }
}

/// Linear clamp annealing from `start` to `end` as `progress` goes 0 -> 1.
pub fn clamp_schedule(start: f64, end: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    start + (end - start) * p
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidPose {
        let w = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        RigidPose::from_parts(Rotation3::new(w), t)
    }

    #[test]
    fn principal_axis_projects_to_principal_point() {
        let p = project(&RigidPose::identity(), &k100(), &Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(p.pixel, Vector2::new(64.0, 64.0));
        assert_eq!(p.depth, 1.0);
        assert!(p.valid);
    }

    #[test]
    fn pinhole_arithmetic() {
        let p = project(&RigidPose::identity(), &k100(), &Vector3::new(0.5, 0.0, 1.0));
        assert_eq!(p.pixel, Vector2::new(114.0, 64.0));
        assert_eq!(p.depth, 1.0);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let p = project(&RigidPose::identity(), &k100(), &Vector3::new(0.0, 0.0, -1.0));
        assert!(!p.valid);
        let p = project(&RigidPose::identity(), &k100(), &Vector3::new(0.0, 0.0, 1e-7));
        assert!(!p.valid);
    }

    #[test]
    fn backprojection_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = k100();
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let px = Vector2::new(rng.random_range(0.0..128.0), rng.random_range(0.0..128.0));
            let d = rng.random_range(0.2..50.0);
            let x = backproject(&pose, &k, &px, d);
            let p = project(&pose, &k, &x);
            assert!(p.valid);
            assert!((p.pixel - px).norm() < 1e-9, "{}", (p.pixel - px).norm());
            assert_relative_eq!(p.depth, d, max_relative = 1e-12);
        }
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let id = pose.compose(&pose.inverse());
            assert!((id.rotation - Matrix3::identity()).norm() < 1e-9);
            assert!(id.translation.norm() < 1e-9);
            assert!((pose.rotation.transpose() * pose.rotation - Matrix3::identity()).norm() < 1e-6);
        }
    }

    #[test]
    fn reprojection_error_cases() {
        let k = k100();
        let pose = RigidPose::identity();
        let px = Vector2::new(40.0, 70.0);
        let on_ray = backproject(&pose, &k, &px, 3.0);
        let e = reprojection_error(&Correspondence::new(px, on_ray), &pose, &k, 1e3);
        assert!(e.valid);
        assert!(e.error < 1e-12);

        // 3 px to the right at depth 2 is 0.06 m along x.
        let shifted = backproject(&pose, &k, &(px + Vector2::new(3.0, 0.0)), 2.0);
        let e = reprojection_error(&Correspondence::new(px, shifted), &pose, &k, 1e3);
        assert_relative_eq!(e.error, 3.0, epsilon = 1e-12);

        let behind = Vector3::new(0.0, 0.0, -2.0);
        let e = reprojection_error(&Correspondence::new(px, behind), &pose, &k, 1e3);
        assert!(!e.valid);
        assert_eq!(e.error, 1e3);
    }

    #[test]
    fn reprojection_error_matches_homogeneous_matrix_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = k100();
        let mut checked = 0;
        while checked < 10_000 {
            let pose = random_pose(&mut rng);
            let x = Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            let px = Vector2::new(rng.random_range(0.0..128.0), rng.random_range(0.0..128.0));
            // Independent route: P = K [R | t] applied to homogeneous X.
            let p = k.matrix() * pose.to_matrix3x4();
            let h = p * Vector4::new(x.x, x.y, x.z, 1.0);
            if h.z <= 0.1 {
                continue;
            }
            let oracle = (Vector2::new(h.x / h.z, h.y / h.z) - px).norm();
            let e = reprojection_error(&Correspondence::new(px, x), &pose, &k, 0.0);
            assert!(e.valid);
            assert!((e.error - oracle).abs() <= 1e-9 * oracle.max(1.0));
            checked += 1;
        }
    }

    #[test]
    fn rigid_reparameterization_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = k100();
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let g = random_pose(&mut rng);
            let x = pose.inverse().transform_point(&Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..8.0),
            ));
            let px = Vector2::new(rng.random_range(0.0..128.0), rng.random_range(0.0..128.0));
            let e0 = reprojection_error(&Correspondence::new(px, x), &pose, &k, 0.0);
            let moved = g.transform_point(&x);
            let pose2 = pose.compose(&g.inverse());
            let e1 = reprojection_error(&Correspondence::new(px, moved), &pose2, &k, 0.0);
            assert!((e0.error - e1.error).abs() < 1e-7);
        }
    }

    #[test]
    fn robust_loss_cases() {
        assert_eq!(
            robust_reproj_loss(&[0.0, 0.0], &[true, true], 50.0, |_| 0.0).unwrap(),
            0.0
        );
        let v = robust_reproj_loss(&[7.0], &[true], 5.0, |_| 0.0).unwrap();
        assert_relative_eq!(v, 5.0 * (7.0f64 / 5.0).tanh(), epsilon = 1e-15);
        let big = robust_reproj_loss(&[1e9], &[true], 5.0, |_| 0.0).unwrap();
        assert_relative_eq!(big, 5.0, epsilon = 1e-12);
        let mixed = robust_reproj_loss(&[0.0, 3.0], &[true, false], 5.0, |i| i as f64 * 2.0).unwrap();
        assert_relative_eq!(mixed, 1.0, epsilon = 1e-15);
        assert!(matches!(
            robust_reproj_loss(&[], &[], 5.0, |_| 0.0),
            Err(Error::Empty(_))
        ));
        assert!(robust_reproj_loss(&[1.0], &[true], 0.0, |_| 0.0).is_err());
    }

    #[test]
    fn point_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = k100();
        let cfg = ReprojLossConfig::default();
        for case in 0..50 {
            let pose = random_pose(&mut rng);
            let px = Vector2::new(rng.random_range(5.0..120.0), rng.random_range(5.0..120.0));
            // Alternate between plausible and behind-the-camera predictions.
            let depth = if case % 5 == 0 { -2.0 } else { rng.random_range(1.0..10.0) };
            let jitter = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            let x = if depth > 0.0 {
                backproject(&pose, &k, &px, depth) + jitter
            } else {
                pose.inverse().transform_point(&Vector3::new(0.1, 0.2, depth))
            };
            let clamp = rng.random_range(1.0..50.0);
            let l = point_loss(&x, &px, &pose, &k, clamp, &cfg);
            for a in 0..3 {
                let h = 1e-6;
                let mut xp = x;
                xp[a] += h;
                let mut xm = x;
                xm[a] -= h;
                let fd = (point_loss(&xp, &px, &pose, &k, clamp, &cfg).value
                    - point_loss(&xm, &px, &pose, &k, clamp, &cfg).value)
                    / (2.0 * h);
                let denom = fd.abs().max(l.grad[a].abs()).max(1e-8);
                assert!(
                    (fd - l.grad[a]).abs() / denom < 1e-4,
                    "case {case} axis {a}: fd {fd} analytic {}",
                    l.grad[a]
                );
            }
        }
    }

    #[test]
    fn look_at_centers_target() {
        let eye = Vector3::new(3.0, -2.0, 1.0);
        let target = Vector3::new(0.5, 0.5, 0.2);
        let pose = RigidPose::look_at(&eye, &target, &Vector3::z()).unwrap();
        assert!((pose.camera_center() - eye).norm() < 1e-12);
        let p = project(&pose, &k100(), &target);
        assert!((p.pixel - Vector2::new(64.0, 64.0)).norm() < 1e-9);
        assert!(p.depth > 0.0);
        assert!((pose.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_error_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            assert!((a.rotation_error_deg(&b) - b.rotation_error_deg(&a)).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_reflections_and_bad_intrinsics() {
        let mut r = Matrix3::identity();
        r[(2, 2)] = -1.0;
        assert!(RigidPose::new(r, Vector3::zeros(), 1e-6).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }
}
