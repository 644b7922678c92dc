//! Rigid-body transforms in 3D and the small rotation kernel the rest of the
//! crate builds on.
//!
//! Rotations are stored as 3×3 matrices. Angles are radians throughout.

use nalgebra::{Matrix3, Rotation3, Vector3};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Drift threshold above which [`RigidTransform::compose`] re-projects the
/// rotation onto SO(3).
const ORTHO_DRIFT: f64 = 1e-12;

/// Proper rigid transform `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform from an arbitrary 3×3 matrix, projecting it onto the
    /// nearest proper rotation.
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation: nearest_rotation(&rotation),
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::new(x, y, z),
        }
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::new(angle, 0.0, 0.0))
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::new(0.0, angle, 0.0))
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vec3::zeros(),
        }
    }

    /// Pure rotation `exp([ω]×)`.
    pub fn from_axis_angle(omega: &Vec3) -> Self {
        Self {
            rotation: exp_so3(omega),
            translation: Vec3::zeros(),
        }
    }

    /// Returns the transform that applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = self.rotation * other.rotation;
        if orthogonality_drift(&rotation) > ORTHO_DRIFT {
            rotation = nearest_rotation(&rotation);
        }
        RigidTransform {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vec(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Checks the orthonormality and determinant invariants at 1e-9.
    pub fn is_valid(&self) -> bool {
        orthogonality_drift(&self.rotation) < 1e-9
            && (self.rotation.determinant() - 1.0).abs() < 1e-9
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Free-function form of [`RigidTransform::compose`]: applies `b` then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

pub fn apply(t: &RigidTransform, p: &Point3) -> Point3 {
    t.apply(p)
}

/// Geodesic angle between the rotation parts of `a` and `b`, in `[0, π]`.
pub fn rotation_distance(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let rel = a.rotation.transpose() * b.rotation;
    rotation_angle(&rel)
}

/// Angle of a rotation matrix, robust near 0 and π.
pub fn rotation_angle(r: &Mat3) -> f64 {
    // atan2 form keeps precision at both ends where acos degrades.
    let sin_part = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
    let cos_part = (r.trace() - 1.0) * 0.5;
    sin_part.atan2(cos_part)
}

/// Frobenius norm of `RᵀR − I`.
pub fn orthogonality_drift(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

/// Nearest proper rotation to `m` in the Frobenius sense (polar factor with
/// reflection correction).
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues map from an axis-angle vector to a rotation matrix.
pub fn exp_so3(omega: &Vec3) -> Mat3 {
    Rotation3::new(*omega).into_inner()
}

/// Inverse of [`exp_so3`] on rotations with angle < π.
pub fn log_so3(r: &Mat3) -> Vec3 {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
        (a.rotation - b.rotation).norm() < tol && (a.translation - b.translation).norm() < tol
    }

    #[test]
    fn compose_identity_is_neutral() {
        let t = RigidTransform::rot_z(0.3).compose(&RigidTransform::from_translation(1.0, 2.0, 3.0));
        assert!(close(&compose(&t, &RigidTransform::identity()), &t, 1e-15));
    }

    #[test]
    fn compose_adds_planar_angles() {
        let c = compose(&RigidTransform::rot_z(30f64.to_radians()), &RigidTransform::rot_z(60f64.to_radians()));
        assert!(close(&c, &RigidTransform::rot_z(FRAC_PI_2), 1e-12));
    }

    #[test]
    fn compose_translations() {
        let c = compose(
            &RigidTransform::from_translation(1.0, 0.0, 0.0),
            &RigidTransform::from_translation(0.0, 1.0, 0.0),
        );
        assert_eq!(c, RigidTransform::from_translation(1.0, 1.0, 0.0));
    }

    #[test]
    fn invert_examples() {
        assert_eq!(invert(&RigidTransform::identity()), RigidTransform::identity());
        assert_eq!(
            invert(&RigidTransform::from_translation(1.0, 2.0, 3.0)),
            RigidTransform::from_translation(-1.0, -2.0, -3.0)
        );
        assert!(close(&invert(&RigidTransform::rot_z(FRAC_PI_2)), &RigidTransform::rot_z(-FRAC_PI_2), 1e-15));
    }

    #[test]
    fn apply_examples() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(apply(&RigidTransform::identity(), &p), p);
        let q = apply(&RigidTransform::rot_z(FRAC_PI_2), &Point3::new(1.0, 0.0, 0.0));
        assert!((q - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let t = RigidTransform::from_translation(1.0, 0.0, 0.0).compose(&RigidTransform::rot_z(FRAC_PI_2));
        let q = apply(&t, &Point3::new(1.0, 0.0, 0.0));
        assert!((q - Point3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rotation_distance_examples() {
        let t = RigidTransform::rot_x(0.4).compose(&RigidTransform::rot_z(1.1));
        assert!(rotation_distance(&t, &t).abs() < 1e-15);
        assert!((rotation_distance(&RigidTransform::identity(), &RigidTransform::rot_z(FRAC_PI_2)) - FRAC_PI_2).abs() < 1e-15);
        // 10° and 350° differ by 20° going through zero, not 340°.
        let d = rotation_distance(&RigidTransform::rot_z(10f64.to_radians()), &RigidTransform::rot_z(350f64.to_radians()));
        assert!((d - 20f64.to_radians()).abs() < 1e-12);
        let half = rotation_distance(&RigidTransform::identity(), &RigidTransform::rot_y(PI));
        assert!((half - PI).abs() < 1e-12);
    }

    #[test]
    fn new_projects_onto_rotations() {
        let mut m = RigidTransform::rot_z(0.7).rotation;
        m[(0, 0)] += 1e-6;
        let t = RigidTransform::new(m, Vec3::zeros());
        assert!(t.is_valid());
        assert!(orthogonality_drift(&t.rotation) < 1e-14);
    }

    #[test]
    fn exp_log_round_trip() {
        let w = Vec3::new(0.3, -0.2, 0.9);
        assert!((log_so3(&exp_so3(&w)) - w).norm() < 1e-14);
    }
}
