//! Rotations, rigid transforms, spatial inertia, and cubic Hermite splines.
//!
//! Rotations live as plain orthonormal 3x3 matrices end to end; Euler angles
//! appear only at serialization boundaries. Everything is f64.

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

/// Residual below which a matrix counts as orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-12;

/// Skew-symmetric matrix with `skew(a) * b == a x b`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Proper rotation stored as an orthonormal matrix, det = +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot3(Mat3);

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(Mat3::identity())
    }

    /// Wraps a matrix that is already known to be a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rot3(m)
    }

    /// Rodrigues' formula. The axis need not be unit length but must be nonzero.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n < 1e-12 {
            return Err(Error::ZeroAxis);
        }
        let k = skew(&(axis / n));
        let m = Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
        Ok(Rot3(m))
    }

    /// Rotation about the z axis; total for any angle, so no Result.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rot3(Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rot3(Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rot3(Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    /// Intrinsic z-y-x composition: Rz(z) * Ry(y) * Rx(x).
    pub fn from_euler_zyx(z: f64, y: f64, x: f64) -> Self {
        Rot3::rot_z(z) * Rot3::rot_y(y) * Rot3::rot_x(x)
    }

    /// Inverse of `from_euler_zyx`. Falls back to x = 0 at the pitch
    /// singularity, where yaw and roll are not separable.
    pub fn to_euler_zyx(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let cy = (m[(0, 0)] * m[(0, 0)] + m[(1, 0)] * m[(1, 0)]).sqrt();
        if cy < 1e-9 {
            let z = (-m[(0, 1)]).atan2(m[(1, 1)]);
            let y = (-m[(2, 0)]).atan2(cy);
            (z, y, 0.0)
        } else {
            let z = m[(1, 0)].atan2(m[(0, 0)]);
            let y = (-m[(2, 0)]).atan2(cy);
            let x = m[(2, 1)].atan2(m[(2, 2)]);
            (z, y, x)
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rot3(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Applies the inverse rotation without forming it.
    pub fn apply_inv(&self, v: &Vec3) -> Vec3 {
        self.0.tr_mul(v)
    }

    /// Max-norm of R'R - I plus |det - 1|; zero for an exact rotation.
    pub fn orthonormality_residual(&self) -> f64 {
        let d = self.0.tr_mul(&self.0) - Mat3::identity();
        d.amax() + (self.0.determinant() - 1.0).abs()
    }

    /// Nearest rotation by Gram-Schmidt on the columns. Cheap drift repair
    /// for long composition chains.
    pub fn renormalized(&self) -> Self {
        let c0 = self.0.column(0).normalize();
        let c1 = (self.0.column(1) - c0 * self.0.column(1).dot(&c0)).normalize();
        let c2 = c0.cross(&c1);
        Rot3(Mat3::from_columns(&[c0, c1, c2]))
    }
}

impl std::ops::Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl Serialize for Rot3 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (z, y, x) = self.to_euler_zyx();
        [z, y, x].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rot3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [z, y, x] = <[f64; 3]>::deserialize(d)?;
        let r = Rot3::from_euler_zyx(z, y, x);
        if r.orthonormality_residual() > ORTHONORMAL_TOL {
            return Err(D::Error::custom("deserialized rotation is not orthonormal"));
        }
        Ok(r)
    }
}

/// Rigid transform: rotation followed by translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform3 {
    pub rot: Rot3,
    pub trans: Vec3,
}

impl Transform3 {
    pub fn identity() -> Self {
        Transform3 { rot: Rot3::identity(), trans: Vec3::zeros() }
    }

    pub fn new(rot: Rot3, trans: Vec3) -> Self {
        Transform3 { rot, trans }
    }

    pub fn from_translation(trans: Vec3) -> Self {
        Transform3 { rot: Rot3::identity(), trans }
    }

    /// self then rhs, i.e. (self * rhs).apply(p) == self.apply(rhs.apply(p)).
    pub fn compose(&self, rhs: &Transform3) -> Transform3 {
        Transform3 { rot: self.rot * rhs.rot, trans: self.rot.apply(&rhs.trans) + self.trans }
    }

    pub fn inverse(&self) -> Transform3 {
        let rinv = self.rot.inverse();
        Transform3 { rot: rinv, trans: -rinv.apply(&self.trans) }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rot.apply(p) + self.trans
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rot.apply(v)
    }
}

impl std::ops::Mul for Transform3 {
    type Output = Transform3;
    fn mul(self, rhs: Transform3) -> Transform3 {
        self.compose(&rhs)
    }
}

/// Rigid-body inertia: mass, center of mass, and rotational inertia about the
/// center of mass, all in the body's own frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialInertia {
    pub mass: f64,
    pub com: Vec3,
    pub inertia_com: Mat3,
}

impl SpatialInertia {
    /// Thin uniform disk in the xy plane, axis z, centered at the origin.
    pub fn uniform_disk_z(mass: f64, radius: f64) -> Self {
        let ir = mass * radius * radius / 4.0;
        SpatialInertia {
            mass,
            com: Vec3::zeros(),
            inertia_com: Mat3::from_diagonal(&Vec3::new(ir, ir, 2.0 * ir)),
        }
    }

    /// Thin uniform rectangular plate in the xy plane, side `lx` by `ly`.
    pub fn uniform_plate_z(mass: f64, lx: f64, ly: f64) -> Self {
        SpatialInertia {
            mass,
            com: Vec3::zeros(),
            inertia_com: Mat3::from_diagonal(&Vec3::new(
                mass * ly * ly / 12.0,
                mass * lx * lx / 12.0,
                mass * (lx * lx + ly * ly) / 12.0,
            )),
        }
    }

    /// Solid cylinder along +x from 0 to `length`; com at the midpoint.
    pub fn solid_cylinder_x(mass: f64, length: f64, radius: f64) -> Self {
        let ix = mass * radius * radius / 2.0;
        let iyz = mass * (3.0 * radius * radius + length * length) / 12.0;
        SpatialInertia {
            mass,
            com: Vec3::new(length / 2.0, 0.0, 0.0),
            inertia_com: Mat3::from_diagonal(&Vec3::new(ix, iyz, iyz)),
        }
    }

    /// Rotational inertia about the frame origin (parallel axis).
    pub fn inertia_origin(&self) -> Mat3 {
        let c = &self.com;
        self.inertia_com
            + self.mass * (Mat3::identity() * c.norm_squared() - c * c.transpose())
    }

    /// 6x6 spatial inertia about the frame origin, [angular; linear] ordering.
    pub fn to_matrix6(&self) -> Mat6 {
        let h = skew(&(self.mass * self.com));
        let mut m = Mat6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.inertia_origin());
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&h);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&h.transpose());
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Mat3::identity() * self.mass));
        m
    }

    /// The same physical inertia expressed in a frame where this body's frame
    /// has pose `t`.
    pub fn expressed_in(&self, t: &Transform3) -> SpatialInertia {
        SpatialInertia {
            mass: self.mass,
            com: t.apply_point(&self.com),
            inertia_com: t.rot.matrix() * self.inertia_com * t.rot.matrix().transpose(),
        }
    }

    /// Positive mass and symmetric positive definite rotational inertia.
    pub fn is_physical(&self) -> bool {
        if !(self.mass > 0.0) {
            return false;
        }
        if (self.inertia_com - self.inertia_com.transpose()).amax() > 1e-12 {
            return false;
        }
        self.inertia_com.cholesky().is_some()
    }
}

/// Spatial motion/force vector, angular block first.
pub type Vec6 = nalgebra::Vector6<f64>;

pub fn vec6(ang: Vec3, lin: Vec3) -> Vec6 {
    Vec6::new(ang.x, ang.y, ang.z, lin.x, lin.y, lin.z)
}

pub fn ang3(v: &Vec6) -> Vec3 {
    v.fixed_rows::<3>(0).into_owned()
}

pub fn lin3(v: &Vec6) -> Vec3 {
    v.fixed_rows::<3>(3).into_owned()
}

/// Motion vector of the parent frame re-expressed in a child frame whose
/// pose in the parent is `t`.
pub fn motion_to_child(t: &Transform3, v: &Vec6) -> Vec6 {
    let w = ang3(v);
    let l = lin3(v);
    vec6(t.rot.apply_inv(&w), t.rot.apply_inv(&(l + w.cross(&t.trans))))
}

/// Inverse of `motion_to_child`.
pub fn motion_to_parent(t: &Transform3, v: &Vec6) -> Vec6 {
    let w = t.rot.apply(&ang3(v));
    let l = t.rot.apply(&lin3(v));
    vec6(w, l - w.cross(&t.trans))
}

/// Force vector expressed in a child frame (pose `t` in the parent), moved
/// to parent coordinates.
pub fn force_to_parent(t: &Transform3, f: &Vec6) -> Vec6 {
    let n = t.rot.apply(&ang3(f));
    let fl = t.rot.apply(&lin3(f));
    vec6(n + t.trans.cross(&fl), fl)
}

/// Motion cross product v x m.
pub fn cross_motion(v: &Vec6, m: &Vec6) -> Vec6 {
    let (w, l) = (ang3(v), lin3(v));
    let (mw, ml) = (ang3(m), lin3(m));
    vec6(w.cross(&mw), w.cross(&ml) + l.cross(&mw))
}

/// Force cross product v x* f.
pub fn cross_force(v: &Vec6, f: &Vec6) -> Vec6 {
    let (w, l) = (ang3(v), lin3(v));
    let (fn_, fl) = (ang3(f), lin3(f));
    vec6(w.cross(&fn_) + l.cross(&fl), w.cross(&fl))
}

impl SpatialInertia {
    /// Applies the 6x6 spatial inertia to a motion vector in own-frame
    /// coordinates; gives momentum for a twist, inertial force for an
    /// acceleration.
    pub fn mul_vec6(&self, v: &Vec6) -> Vec6 {
        let (w, l) = (ang3(v), lin3(v));
        let h = self.mass * self.com;
        vec6(self.inertia_origin() * w + h.cross(&l), self.mass * l + w.cross(&h))
    }
}

/// Cubic Hermite segment in R^3 with endpoint positions and velocities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HermiteSpline3 {
    pub p0: Vec3,
    pub p1: Vec3,
    pub v0: Vec3,
    pub v1: Vec3,
    pub duration: f64,
}

impl HermiteSpline3 {
    /// Position, velocity and acceleration at `t` in [0, duration].
    pub fn eval(&self, t: f64) -> Result<(Vec3, Vec3, Vec3)> {
        if !(self.duration > 0.0) || t < 0.0 || t > self.duration {
            return Err(Error::SplineDomain { t, duration: self.duration });
        }
        let dt = self.duration;
        let s = t / dt;
        let (s2, s3) = (s * s, s * s * s);

        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let p = self.p0 * h00 + self.v0 * (dt * h10) + self.p1 * h01 + self.v1 * (dt * h11);

        let d00 = 6.0 * s2 - 6.0 * s;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = -6.0 * s2 + 6.0 * s;
        let d11 = 3.0 * s2 - 2.0 * s;
        let v = self.p0 * (d00 / dt) + self.v0 * d10 + self.p1 * (d01 / dt) + self.v1 * d11;

        let a00 = 12.0 * s - 6.0;
        let a10 = 6.0 * s - 4.0;
        let a01 = -12.0 * s + 6.0;
        let a11 = 6.0 * s - 2.0;
        let a = self.p0 * (a00 / (dt * dt))
            + self.v0 * (a10 / dt)
            + self.p1 * (a01 / (dt * dt))
            + self.v1 * (a11 / dt);

        Ok((p, v, a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn assert_vec_close(a: &Vec3, b: &Vec3, tol: f64) {
        assert!((a - b).amax() <= tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn axis_angle_matches_known_rotations() {
        let r = Rot3::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2).unwrap();
        assert_vec_close(&r.apply(&Vec3::x()), &Vec3::y(), 1e-15);

        // 120 degrees about (1,1,1) cycles the coordinate axes.
        let r = Rot3::from_axis_angle(&Vec3::new(1.0, 1.0, 1.0), 2.0 * std::f64::consts::FRAC_PI_3)
            .unwrap();
        assert_vec_close(&r.apply(&Vec3::x()), &Vec3::y(), 1e-15);
        assert_vec_close(&r.apply(&Vec3::y()), &Vec3::z(), 1e-15);
    }

    #[test]
    fn zero_axis_is_rejected() {
        assert!(matches!(Rot3::from_axis_angle(&Vec3::zeros(), 1.0), Err(Error::ZeroAxis)));
    }

    #[test]
    fn six_sixths_of_a_turn_is_identity() {
        let step = Rot3::rot_z(std::f64::consts::PI / 3.0);
        let mut r = Rot3::identity();
        for _ in 0..6 {
            r = r * step;
        }
        assert!(r.orthonormality_residual() < 1e-12);
        assert!((r.matrix() - Mat3::identity()).amax() < 1e-12);
    }

    #[test]
    fn euler_zyx_round_trips() {
        let r = Rot3::from_euler_zyx(0.7, -0.3, 1.9);
        let (z, y, x) = r.to_euler_zyx();
        assert_relative_eq!(z, 0.7, epsilon = 1e-12);
        assert_relative_eq!(y, -0.3, epsilon = 1e-12);
        assert_relative_eq!(x, 1.9, epsilon = 1e-12);
    }

    #[test]
    fn transform_compose_and_invert() {
        let a = Transform3::new(Rot3::rot_z(0.4), Vec3::new(1.0, 2.0, 3.0));
        let b = Transform3::new(Rot3::rot_y(-0.9), Vec3::new(-0.5, 0.0, 2.0));
        let p = Vec3::new(0.3, -0.7, 0.2);
        assert_vec_close(&(a * b).apply_point(&p), &a.apply_point(&b.apply_point(&p)), 1e-14);

        let id = a * a.inverse();
        assert!(id.rot.orthonormality_residual() < 1e-14);
        assert_vec_close(&id.trans, &Vec3::zeros(), 1e-14);
    }

    #[test]
    fn cylinder_inertia_matches_textbook_values() {
        // m = 0.5 kg, L = 0.15 m, r = 0.01 m, axis x:
        //   Ixx = m r^2 / 2            = 2.5e-5
        //   Iyy = m (3 r^2 + L^2) / 12 = 9.5e-4
        let i = SpatialInertia::solid_cylinder_x(0.5, 0.15, 0.01);
        assert_relative_eq!(i.inertia_com[(0, 0)], 2.5e-5, epsilon = 1e-18);
        assert_relative_eq!(i.inertia_com[(1, 1)], 9.5e-4, epsilon = 1e-18);
        assert_relative_eq!(i.inertia_com[(2, 2)], 9.5e-4, epsilon = 1e-18);
        assert_vec_close(&i.com, &Vec3::new(0.075, 0.0, 0.0), 0.0);
        assert!(i.is_physical());
    }

    #[test]
    fn parallel_axis_shift_for_point_mass() {
        // Near-point mass m at distance d along x: Iyy_origin ~ m d^2.
        let i = SpatialInertia {
            mass: 2.0,
            com: Vec3::new(0.3, 0.0, 0.0),
            inertia_com: Mat3::identity() * 1e-9,
        };
        let io = i.inertia_origin();
        assert_relative_eq!(io[(1, 1)], 2.0 * 0.09, epsilon = 1e-8);
        assert_relative_eq!(io[(2, 2)], 2.0 * 0.09, epsilon = 1e-8);
        assert_relative_eq!(io[(0, 0)], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn spatial_inertia_matrix_is_symmetric() {
        let m6 = SpatialInertia::solid_cylinder_x(0.4, 0.15, 0.01).to_matrix6();
        assert!((m6 - m6.transpose()).amax() < 1e-15);
    }

    #[test]
    fn hermite_boundaries_and_hand_evaluated_midpoint() {
        // Vertical lift with zero boundary velocities. Basis at s = 1/2:
        //   h00 = h01 = 1/2, h10 = 1/8, h11 = -1/8
        // so the midpoint is the plain average of the endpoints, and the
        // midpoint velocity is 1.5 (p1 - p0) / T.
        let s = HermiteSpline3 {
            p0: Vec3::zeros(),
            p1: Vec3::new(0.0, 0.0, 0.1),
            v0: Vec3::zeros(),
            v1: Vec3::zeros(),
            duration: 0.5,
        };
        let (p, v, _) = s.eval(0.0).unwrap();
        assert_vec_close(&p, &s.p0, 0.0);
        assert_vec_close(&v, &s.v0, 0.0);

        let (p, v, a) = s.eval(0.25).unwrap();
        assert_vec_close(&p, &Vec3::new(0.0, 0.0, 0.05), 1e-15);
        assert_vec_close(&v, &Vec3::new(0.0, 0.0, 0.3), 1e-15);
        assert_vec_close(&a, &Vec3::zeros(), 1e-15);

        // Nonzero start velocity bends the midpoint by T h10 v0 = T v0 / 8.
        let s2 = HermiteSpline3 { v0: Vec3::new(0.1, 0.0, 0.0), ..s };
        let (p, _, _) = s2.eval(0.25).unwrap();
        assert_relative_eq!(p.x, 0.00625, epsilon = 1e-15);
    }

    #[test]
    fn spline_domain_is_enforced() {
        let s = HermiteSpline3 {
            p0: Vec3::zeros(),
            p1: Vec3::x(),
            v0: Vec3::zeros(),
            v1: Vec3::zeros(),
            duration: 1.0,
        };
        assert!(s.eval(-0.1).is_err());
        assert!(s.eval(1.1).is_err());
        assert!(HermiteSpline3 { duration: 0.0, ..s }.eval(0.0).is_err());
    }

    proptest! {
        #[test]
        fn random_rotations_stay_orthonormal(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            angle in -10.0f64..10.0,
        ) {
            prop_assume!(Vec3::new(ax, ay, az).norm() > 1e-3);
            let r = Rot3::from_axis_angle(&Vec3::new(ax, ay, az), angle).unwrap();
            prop_assert!(r.orthonormality_residual() < 1e-12);
        }

        #[test]
        fn rotation_preserves_length(
            angle in -10.0f64..10.0,
            px in -5.0f64..5.0, py in -5.0f64..5.0, pz in -5.0f64..5.0,
        ) {
            let r = Rot3::from_axis_angle(&Vec3::new(0.3, -1.2, 0.8), angle).unwrap();
            let p = Vec3::new(px, py, pz);
            prop_assert!((r.apply(&p).norm() - p.norm()).abs() < 1e-12);
        }

        #[test]
        fn euler_round_trip_recovers_matrix(
            z in -3.0f64..3.0, y in -1.4f64..1.4, x in -3.0f64..3.0,
        ) {
            let r = Rot3::from_euler_zyx(z, y, x);
            let (ez, ey, ex) = r.to_euler_zyx();
            let r2 = Rot3::from_euler_zyx(ez, ey, ex);
            prop_assert!((r.matrix() - r2.matrix()).amax() < 1e-12);
        }
    }
}
