//! SE(3) pose parameterization, Rodrigues exponential map with analytic
//! derivatives, and pinhole projection.
//!
//! Rotations are kept as axis-angle 3-vectors (radians). All geometry math is
//! double precision; matrices are row-major when flattened for I/O.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Minimum projectable depth in meters. Points with camera-frame depth at or
/// below this are flagged invalid instead of projected.
pub const Z_MIN: f64 = 1e-3;

/// Orthonormality / determinant tolerance for rigidity checks.
pub const RIGID_TOL: f64 = 1e-9;

/// Below this angle the closed-form Rodrigues coefficients switch to their
/// Taylor expansions (the series are smooth through zero).
const SMALL_ANGLE: f64 = 1e-4;

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
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
        if !(fx > 0.0) || !(fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Rescale for a resized image; focal lengths and principal point follow
    /// the per-axis size ratios.
    pub fn scaled(&self, new_width: usize, new_height: usize) -> Result<Self> {
        let sx = new_width as f64 / self.width as f64;
        let sy = new_height as f64 / self.height as f64;
        Intrinsics::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            new_width,
            new_height,
        )
    }
}

/// sin(t)/t, (1-cos(t))/t^2 and their t-scaled derivatives, all smooth
/// functions of t that are safe to evaluate at t = 0.
///
/// Returns (a, b, c1, c2) with
///   a  = sin t / t
///   b  = (1 - cos t) / t^2
///   c1 = a'(t)/t = (t cos t - sin t) / t^3
///   c2 = b'(t)/t = (t sin t - 2(1 - cos t)) / t^4
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        // Taylor series in t^2; at t < 1e-4 the truncation error is < 1e-17.
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let c1 = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0;
        let c2 = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0;
        (a, b, c1, c2)
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = t2 * theta;
        let t4 = t2 * t2;
        let a = s / theta;
        let b = (1.0 - c) / t2;
        let c1 = (theta * c - s) / t3;
        let c2 = (theta * s - 2.0 * (1.0 - c)) / t4;
        (a, b, c1, c2)
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential: axis-angle vector to rotation matrix.
///
/// R = I + sin(t)/t [r]x + (1-cos(t))/t^2 [r]x^2 with t = |r|.
pub fn rodrigues_exp(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    let (a, b, _, _) = rodrigues_coeffs(theta);
    let rx = skew(r);
    Matrix3::identity() + rx * a + rx * rx * b
}

/// Partial derivatives of the Rodrigues rotation matrix with respect to each
/// component of the axis-angle vector: returns [dR/dr_x, dR/dr_y, dR/dr_z].
///
/// Obtained by differentiating R = I + a(t)[r]x + b(t)[r]x^2 where the
/// coefficient derivatives enter as a'(t) dt/dr_k = (a'/t) r_k, smooth at 0.
pub fn rodrigues_jacobians(r: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta = r.norm();
    let (a, b, c1, c2) = rodrigues_coeffs(theta);
    let rx = skew(r);
    let rx2 = rx * rx;
    let mut out = [Matrix3::zeros(); 3];
    for (k, jac) in out.iter_mut().enumerate() {
        let mut ek = Vector3::zeros();
        ek[k] = 1.0;
        let ekx = skew(&ek);
        *jac = rx * (c1 * r[k])
            + ekx * a
            + rx2 * (c2 * r[k])
            + (ekx * rx + rx * ekx) * b;
    }
    out
}

/// Inverse of the Rodrigues map: rotation matrix to axis-angle vector.
///
/// Input must be a proper rotation. Angle is returned in [0, pi].
pub fn rotation_log(rot: &Matrix3<f64>) -> Vector3<f64> {
    // vee((R - R^T)/2) has norm sin(theta) along the rotation axis.
    let s = Vector3::new(
        (rot[(2, 1)] - rot[(1, 2)]) * 0.5,
        (rot[(0, 2)] - rot[(2, 0)]) * 0.5,
        (rot[(1, 0)] - rot[(0, 1)]) * 0.5,
    );
    let sin_theta = s.norm().min(1.0);
    let cos_theta = ((rot.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if sin_theta > 1e-7 {
        return s * (theta / sin_theta);
    }
    if cos_theta > 0.0 {
        // theta near 0: s already equals r to third order.
        return s;
    }
    // theta near pi: extract the axis from the symmetric part
    // R = I + 2 [n]x^2  =>  n n^T = (R + I) / 2 (diagonal dominates).
    let mut axis = Vector3::zeros();
    let diag = Vector3::new(rot[(0, 0)], rot[(1, 1)], rot[(2, 2)]);
    let k = diag.imax();
    axis[k] = ((diag[k] + 1.0) * 0.5).max(0.0).sqrt();
    for j in 0..3 {
        if j != k {
            axis[j] = (rot[(k, j)] + rot[(j, k)]) * 0.25 / axis[k];
        }
    }
    axis.normalize_mut();
    // Fix the sign so that vee(R - R^T) and the axis agree when sin > 0.
    if s.dot(&axis) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Rotation angle of a rigid 4x4 transform, in radians.
pub fn rotation_angle(transform: &Matrix4<f64>) -> f64 {
    let tr = transform[(0, 0)] + transform[(1, 1)] + transform[(2, 2)];
    (((tr - 1.0) * 0.5).clamp(-1.0, 1.0)).acos()
}

/// 6-DoF pose: axis-angle rotation plus translation, with its 4x4 rigid
/// transform cached at construction. Immutable once built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: Vector3<f64>,
    translation: Vector3<f64>,
    matrix: Matrix4<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let matrix = pose_matrix(&rotation, &translation);
        Self {
            rotation,
            translation,
            matrix,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    /// Decompose a rigid 4x4 transform into (r, t). Rejects non-rigid input.
    pub fn from_matrix(transform: &Matrix4<f64>) -> Result<Self> {
        check_rigid(transform)?;
        let rot = transform.fixed_view::<3, 3>(0, 0).into_owned();
        let r = rotation_log(&rot);
        let t = Vector3::new(transform[(0, 3)], transform[(1, 3)], transform[(2, 3)]);
        Ok(Self::new(r, t))
    }

    pub fn from_params(p: &[f64]) -> Self {
        debug_assert_eq!(p.len(), 6);
        Self::new(
            Vector3::new(p[0], p[1], p[2]),
            Vector3::new(p[3], p[4], p[5]),
        )
    }

    pub fn params(&self) -> [f64; 6] {
        [
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn rotation_vector(&self) -> Vector3<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> Result<Self> {
        Self::from_matrix(&invert_rigid(&self.matrix)?)
    }
}

/// Build the 4x4 rigid transform from an axis-angle rotation and translation.
pub fn pose_matrix(rotation: &Vector3<f64>, translation: &Vector3<f64>) -> Matrix4<f64> {
    let rot = rodrigues_exp(rotation);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    m[(0, 3)] = translation.x;
    m[(1, 3)] = translation.y;
    m[(2, 3)] = translation.z;
    m
}

/// Verify the rigid-transform invariants: orthonormal rotation block with
/// det 1 (within RIGID_TOL) and an exact (0,0,0,1) bottom row.
pub fn check_rigid(transform: &Matrix4<f64>) -> Result<()> {
    if transform[(3, 0)] != 0.0
        || transform[(3, 1)] != 0.0
        || transform[(3, 2)] != 0.0
        || transform[(3, 3)] != 1.0
    {
        return Err(Error::NonRigidTransform(
            "bottom row is not (0,0,0,1)".into(),
        ));
    }
    let rot = transform.fixed_view::<3, 3>(0, 0);
    let gram = rot.transpose() * rot;
    let mut max_dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((gram[(i, j)] - target).abs());
        }
    }
    if max_dev >= RIGID_TOL {
        return Err(Error::NonRigidTransform(format!(
            "|R^T R - I| = {max_dev:.3e}"
        )));
    }
    let det = rot.determinant();
    if (det - 1.0).abs() >= RIGID_TOL {
        return Err(Error::NonRigidTransform(format!("det(R) = {det:.12}")));
    }
    Ok(())
}

/// Invert a rigid transform as (R^T, -R^T t). Rejects non-rigid input.
pub fn invert_rigid(transform: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    check_rigid(transform)?;
    let rot = transform.fixed_view::<3, 3>(0, 0);
    let t = Vector3::new(transform[(0, 3)], transform[(1, 3)], transform[(2, 3)]);
    let rot_t = rot.transpose();
    let t_inv = -(rot_t * t);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot_t);
    m[(0, 3)] = t_inv.x;
    m[(1, 3)] = t_inv.y;
    m[(2, 3)] = t_inv.z;
    Ok(m)
}

/// Compose two rigid transforms (matrix product A * B).
pub fn compose(a: &Matrix4<f64>, b: &Matrix4<f64>) -> Matrix4<f64> {
    let m = a * b;
    debug_assert!(check_rigid(&m).is_ok());
    m
}

/// Project a camera-frame point through the pinhole model.
///
/// Returns (u, v, z) in pixels/meters, or None when z <= Z_MIN.
pub fn project(k: &Intrinsics, point: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let z = point.z;
    if z <= Z_MIN {
        return None;
    }
    let u = k.fx * point.x / z + k.cx;
    let v = k.fy * point.y / z + k.cy;
    Some((u, v, z))
}

/// Back-project pixel (u, v) at depth d into the camera frame. Rejects d <= 0.
pub fn unproject(k: &Intrinsics, u: f64, v: f64, d: f64) -> Result<Vector3<f64>> {
    if !(d > 0.0) {
        return Err(Error::InvalidDepth(d));
    }
    Ok(Vector3::new(
        (u - k.cx) / k.fx * d,
        (v - k.cy) / k.fy * d,
        d,
    ))
}

/// Nearest proper rotation in the Frobenius sense (SVD projection).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut rot = u * v_t;
    if rot.determinant() < 0.0 {
        let mut u_fixed = u;
        u_fixed.column_mut(2).scale_mut(-1.0);
        rot = u_fixed * v_t;
    }
    rot
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    pub(crate) fn random_pose(rng: &mut StdRng) -> PoseSE3 {
        let angle = rng.gen_range(0.0..PI * 0.95);
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let t = Vector3::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        );
        PoseSE3::new(axis * angle, t)
    }

    fn max_abs(m: &Matrix4<f64>) -> f64 {
        m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    #[test]
    fn rodrigues_zero_is_identity() {
        let r = rodrigues_exp(&Vector3::zeros());
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn rodrigues_quarter_turn_z() {
        let r = rodrigues_exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn rodrigues_half_turn_x() {
        let r = rodrigues_exp(&Vector3::new(PI, 0.0, 0.0));
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert_abs_diff_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn rodrigues_inverse_is_negated_vector() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let angle = rng.gen_range(0.0..PI);
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let r = axis * angle;
            let prod = rodrigues_exp(&r) * rodrigues_exp(&(-r));
            for i in 0..3 {
                for j in 0..3 {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((prod[(i, j)] - target).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rodrigues_small_angle_matches_first_order() {
        for eps in [1e-4f64, 1e-5, 1e-6, 1e-8] {
            for axis in [
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.6, -0.48, 0.64).normalize(),
            ] {
                let r = rodrigues_exp(&(axis * eps));
                let first_order = Matrix3::identity() + skew(&(axis * eps));
                let dev = (r - first_order)
                    .iter()
                    .fold(0.0f64, |a, x| a.max(x.abs()));
                assert!(dev <= eps * eps, "dev {dev} at eps {eps}");
            }
        }
    }

    #[test]
    fn rodrigues_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let h = 1e-6;
        for trial in 0..50 {
            // Include tiny angles so the series branch is exercised too.
            let scale = if trial % 5 == 0 { 1e-5 } else { 2.0 };
            let r = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ) * scale;
            let jac = rodrigues_jacobians(&r);
            for k in 0..3 {
                let mut rp = r;
                let mut rm = r;
                rp[k] += h;
                rm[k] -= h;
                let fd = (rodrigues_exp(&rp) - rodrigues_exp(&rm)) / (2.0 * h);
                for i in 0..3 {
                    for j in 0..3 {
                        assert!(
                            (jac[k][(i, j)] - fd[(i, j)]).abs() < 1e-8,
                            "trial {trial} k {k} entry ({i},{j}): {} vs {}",
                            jac[k][(i, j)],
                            fd[(i, j)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_log_roundtrip() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let angle = rng.gen_range(0.0..PI - 1e-6);
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let r = axis * angle;
            let back = rotation_log(&rodrigues_exp(&r));
            assert!((back - r).norm() < 1e-9, "angle {angle}");
        }
        // Near-pi case goes through the symmetric-part branch.
        let r = Vector3::new(0.0, 1.0, 0.0) * (PI - 1e-9);
        let back = rotation_log(&rodrigues_exp(&r));
        assert!((back - r).norm() < 1e-6);
    }

    #[test]
    fn pose_matrix_identity_and_translation() {
        assert_eq!(*PoseSE3::identity().matrix(), Matrix4::identity());
        let p = PoseSE3::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0));
        let m = p.matrix();
        assert_eq!(m[(0, 3)], 1.0);
        assert_eq!(m[(1, 3)], 2.0);
        assert_eq!(m[(2, 3)], 3.0);
        assert_eq!(m.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::identity());
    }

    #[test]
    fn pose_action_on_origin_is_translation() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..20 {
            let p = random_pose(&mut rng);
            let origin = p.matrix() * nalgebra::Vector4::new(0.0, 0.0, 0.0, 1.0);
            assert_abs_diff_eq!(origin.x, p.translation().x, epsilon = 1e-12);
            assert_abs_diff_eq!(origin.y, p.translation().y, epsilon = 1e-12);
            assert_abs_diff_eq!(origin.z, p.translation().z, epsilon = 1e-12);
        }
    }

    #[test]
    fn pose_cached_matrix_invariants() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            check_rigid(p.matrix()).unwrap();
            let rebuilt = pose_matrix(&p.rotation_vector(), &p.translation());
            assert!(max_abs(&(rebuilt - p.matrix())) < 1e-12);
        }
    }

    #[test]
    fn invert_identity_and_translation() {
        assert_eq!(
            invert_rigid(&Matrix4::identity()).unwrap(),
            Matrix4::identity()
        );
        let t = PoseSE3::new(Vector3::zeros(), Vector3::new(4.0, -5.0, 6.0));
        let inv = invert_rigid(t.matrix()).unwrap();
        assert_eq!(inv[(0, 3)], -4.0);
        assert_eq!(inv[(1, 3)], 5.0);
        assert_eq!(inv[(2, 3)], -6.0);
    }

    #[test]
    fn invert_rejects_non_rigid() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(invert_rigid(&m).is_err());
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1e-3;
        assert!(invert_rigid(&m).is_err());
    }

    #[test]
    fn invert_involution_over_random_poses() {
        let mut rng = StdRng::seed_from_u64(101);
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let twice = invert_rigid(&invert_rigid(p.matrix()).unwrap()).unwrap();
            assert!(max_abs(&(twice - p.matrix())) < 1e-9);
        }
    }

    #[test]
    fn compose_unit_and_inverse() {
        let mut rng = StdRng::seed_from_u64(37);
        let p = random_pose(&mut rng);
        assert!(max_abs(&(compose(p.matrix(), &Matrix4::identity()) - p.matrix())) == 0.0);
        let prod = compose(p.matrix(), &invert_rigid(p.matrix()).unwrap());
        assert!(max_abs(&(prod - Matrix4::identity())) < 1e-12);
        let a = PoseSE3::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 2.0));
        let b = PoseSE3::new(Vector3::zeros(), Vector3::new(-3.0, 5.0, 0.5));
        let c = compose(a.matrix(), b.matrix());
        assert_eq!(c[(0, 3)], -2.0);
        assert_eq!(c[(1, 3)], 5.0);
        assert_eq!(c[(2, 3)], 2.5);
    }

    #[test]
    fn project_examples() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap();
        assert_eq!(
            project(&k, &Vector3::new(0.0, 0.0, 2.0)),
            Some((50.0, 50.0, 2.0))
        );
        assert_eq!(
            project(&k, &Vector3::new(1.0, 0.0, 2.0)),
            Some((100.0, 50.0, 2.0))
        );
        assert_eq!(project(&k, &Vector3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(project(&k, &Vector3::new(0.0, 0.0, Z_MIN)), None);
    }

    #[test]
    fn unproject_examples() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap();
        let x = unproject(&k, 50.0, 50.0, 1.0).unwrap();
        assert_eq!(x, Vector3::new(0.0, 0.0, 1.0));
        let x = unproject(&k, 150.0, 50.0, 2.0).unwrap();
        assert_eq!(x, Vector3::new(2.0, 0.0, 2.0));
        assert!(unproject(&k, 10.0, 10.0, 0.0).is_err());
        assert!(unproject(&k, 10.0, 10.0, -2.0).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(-1.0, 100.0, 50.0, 50.0, 100, 100).is_err());
        assert!(Intrinsics::new(100.0, 100.0, 120.0, 50.0, 100, 100).is_err());
        assert!(Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).is_ok());
    }

    #[test]
    fn nearest_rotation_projects_back() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let p = random_pose(&mut rng);
            let rot = p.matrix().fixed_view::<3, 3>(0, 0).into_owned();
            // Perturb slightly off the manifold, then project back.
            let mut noisy = rot;
            noisy[(0, 1)] += 1e-5;
            let fixed = nearest_rotation(&noisy);
            let gram = fixed.transpose() * fixed;
            assert_abs_diff_eq!(gram, Matrix3::identity(), epsilon = 1e-12);
            assert!((fixed.determinant() - 1.0).abs() < 1e-12);
            assert!((fixed - rot).norm() < 1e-4);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn compose_associative(seed in 0u64..1_000_000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let left = compose(&compose(a.matrix(), b.matrix()), c.matrix());
            let right = compose(a.matrix(), &compose(b.matrix(), c.matrix()));
            prop_assert!(max_abs(&(left - right)) < 1e-9);
        }

        #[test]
        fn project_unproject_roundtrip(
            u in 0.0..639.0f64,
            v in 0.0..479.0f64,
            d in 0.01..80.0f64,
        ) {
            let k = Intrinsics::new(320.0, 330.0, 319.5, 239.5, 640, 480).unwrap();
            let x = unproject(&k, u, v, d).unwrap();
            let (pu, pv, pz) = project(&k, &x).unwrap();
            prop_assert!((pu - u).abs() < 1e-9);
            prop_assert!((pv - v).abs() < 1e-9);
            prop_assert!((pz - d).abs() < 1e-12);
        }

        #[test]
        fn unproject_project_roundtrip(seed in 0u64..1_000_000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let k = Intrinsics::new(320.0, 330.0, 319.5, 239.5, 640, 480).unwrap();
            let x = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.1..50.0),
            );
            let (u, v, z) = project(&k, &x).unwrap();
            let back = unproject(&k, u, v, z).unwrap();
            prop_assert!((back - x).norm() < 1e-9);
        }
    }
}
