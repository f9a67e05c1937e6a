//! Spatial algebra on SE(3).
//!
//! Six-vectors are stored linear part first, angular part second, for both
//! motions and forces. With that layout the motion cross-product matrix of
//! `ν = (v, ω)` reads
//!
//! ```text
//! ⟨ν⟩× = | ω×  v× |
//!        |  0  ω× |
//! ```
//!
//! and the dual force operator `⟨f⟩*` built by [`force_cross_dual`] has the
//! block layout `[[0, f_l×], [f_l×, f_a×]]`.

use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Largest rotation angle accepted by [`log6`] and [`log3`].
pub const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid placement `aMb`: maps coordinates in frame `b` to frame `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self { rotation: r, translation: Vector3::zeros() }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        Self { rotation: *q.to_rotation_matrix().matrix(), translation: t }
    }

    /// Roll-pitch-yaw (extrinsic x, then y, then z).
    pub fn from_rpy(rpy: &Vector3<f64>, t: Vector3<f64>) -> Self {
        let r = exp3(&(Vector3::z() * rpy.z))
            * exp3(&(Vector3::y() * rpy.y))
            * exp3(&(Vector3::x() * rpy.x));
        Self { rotation: r, translation: t }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// `self⁻¹ · other` without forming the inverse.
    pub fn inv_compose(&self, other: &Se3) -> Se3 {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt * other.rotation,
            translation: rt * (other.translation - self.translation),
        }
    }

    pub fn act_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Plücker motion transform `X · m`.
    pub fn act_motion(&self, m: &Motion) -> Motion {
        let w = self.rotation * m.angular;
        Motion { angular: w, linear: self.rotation * m.linear + self.translation.cross(&w) }
    }

    /// `X⁻¹ · m`.
    pub fn inv_act_motion(&self, m: &Motion) -> Motion {
        let rt = self.rotation.transpose();
        Motion {
            angular: rt * m.angular,
            linear: rt * (m.linear - self.translation.cross(&m.angular)),
        }
    }

    /// Dual transform `X* · f`.
    pub fn act_force(&self, f: &Force) -> Force {
        let l = self.rotation * f.linear;
        Force { linear: l, angular: self.rotation * f.angular + self.translation.cross(&l) }
    }

    /// `(X*)⁻¹ · f = Xᵀ · f`.
    pub fn inv_act_force(&self, f: &Force) -> Force {
        let rt = self.rotation.transpose();
        Force {
            linear: rt * f.linear,
            angular: rt * (f.angular - self.translation.cross(&f.linear)),
        }
    }

    /// The 6×6 motion transform X.
    pub fn action_matrix(&self) -> Matrix6<f64> {
        let mut x = Matrix6::zeros();
        let r = self.rotation;
        let pr = skew(&self.translation) * r;
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        x.fixed_view_mut::<3, 3>(0, 3).copy_from(&pr);
        x.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        x
    }

    /// The 6×6 force transform X* = X⁻ᵀ.
    pub fn dual_action_matrix(&self) -> Matrix6<f64> {
        let mut x = Matrix6::zeros();
        let r = self.rotation;
        let pr = skew(&self.translation) * r;
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        x.fixed_view_mut::<3, 3>(3, 0).copy_from(&pr);
        x.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        x
    }

    pub fn is_approx(&self, other: &Se3, tol: f64) -> bool {
        (self.rotation - other.rotation).amax() <= tol
            && (self.translation - other.translation).amax() <= tol
    }
}

impl Mul for Se3 {
    type Output = Se3;
    fn mul(self, rhs: Se3) -> Se3 {
        self.compose(&rhs)
    }
}

impl Mul<&Se3> for &Se3 {
    type Output = Se3;
    fn mul(self, rhs: &Se3) -> Se3 {
        self.compose(rhs)
    }
}

/// Spatial motion (twist or spatial acceleration).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Motion {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

/// Spatial force (wrench).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Force {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

macro_rules! six_vector_ops {
    ($t:ident) => {
        impl $t {
            pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
                Self { linear, angular }
            }

            pub fn zero() -> Self {
                Self { linear: Vector3::zeros(), angular: Vector3::zeros() }
            }

            pub fn from_vector(v: &Vector6<f64>) -> Self {
                Self {
                    linear: Vector3::new(v[0], v[1], v[2]),
                    angular: Vector3::new(v[3], v[4], v[5]),
                }
            }

            pub fn from_slice(v: &[f64]) -> Self {
                Self {
                    linear: Vector3::new(v[0], v[1], v[2]),
                    angular: Vector3::new(v[3], v[4], v[5]),
                }
            }

            pub fn to_vector(&self) -> Vector6<f64> {
                let (l, a) = (&self.linear, &self.angular);
                Vector6::new(l.x, l.y, l.z, a.x, a.y, a.z)
            }

            pub fn norm(&self) -> f64 {
                (self.linear.norm_squared() + self.angular.norm_squared()).sqrt()
            }
        }

        impl Add for $t {
            type Output = $t;
            fn add(self, o: $t) -> $t {
                $t { linear: self.linear + o.linear, angular: self.angular + o.angular }
            }
        }

        impl Sub for $t {
            type Output = $t;
            fn sub(self, o: $t) -> $t {
                $t { linear: self.linear - o.linear, angular: self.angular - o.angular }
            }
        }

        impl AddAssign for $t {
            fn add_assign(&mut self, o: $t) {
                self.linear += o.linear;
                self.angular += o.angular;
            }
        }

        impl SubAssign for $t {
            fn sub_assign(&mut self, o: $t) {
                self.linear -= o.linear;
                self.angular -= o.angular;
            }
        }

        impl Neg for $t {
            type Output = $t;
            fn neg(self) -> $t {
                $t { linear: -self.linear, angular: -self.angular }
            }
        }

        impl Mul<f64> for $t {
            type Output = $t;
            fn mul(self, s: f64) -> $t {
                $t { linear: self.linear * s, angular: self.angular * s }
            }
        }
    };
}

six_vector_ops!(Motion);
six_vector_ops!(Force);

impl Motion {
    /// Spatial cross product `self × m` (small adjoint acting on a motion).
    #[inline]
    pub fn cross(&self, m: &Motion) -> Motion {
        Motion {
            linear: self.angular.cross(&m.linear) + self.linear.cross(&m.angular),
            angular: self.angular.cross(&m.angular),
        }
    }

    /// Dual cross product `self ×* f`.
    #[inline]
    pub fn cross_force(&self, f: &Force) -> Force {
        Force {
            linear: self.angular.cross(&f.linear),
            angular: self.linear.cross(&f.linear) + self.angular.cross(&f.angular),
        }
    }

    /// Dual pairing ⟨f, m⟩ (power).
    #[inline]
    pub fn dot(&self, f: &Force) -> f64 {
        self.linear.dot(&f.linear) + self.angular.dot(&f.angular)
    }
}

/// Linear velocity at a point `p` (same coordinates as `m`) of a body moving
/// with spatial velocity `m`.
pub fn point_velocity(m: &Motion, p: &Vector3<f64>) -> Vector3<f64> {
    m.linear + m.angular.cross(p)
}

/// `⟨ν⟩×` as a 6×6 matrix.
pub fn motion_cross_matrix(nu: &Motion) -> Matrix6<f64> {
    let mut x = Matrix6::zeros();
    let w = skew(&nu.angular);
    x.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    x.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&nu.linear));
    x.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    x
}

/// `nu × m`.
pub fn motion_cross(nu: &Motion, m: &Motion) -> Motion {
    nu.cross(m)
}

/// `⟨f⟩*`, the operator satisfying `⟨f⟩* ν = −ν ×* f`.
pub fn force_cross_dual(f: &Force) -> Matrix6<f64> {
    let mut x = Matrix6::zeros();
    let fl = skew(&f.linear);
    x.fixed_view_mut::<3, 3>(0, 3).copy_from(&fl);
    x.fixed_view_mut::<3, 3>(3, 0).copy_from(&fl);
    x.fixed_view_mut::<3, 3>(3, 3).copy_from(&skew(&f.angular));
    x
}

/// Rigid-body spatial inertia stored by mass, center of mass and rotational
/// inertia about the center of mass, all in the body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inertia {
    pub mass: f64,
    pub com: Vector3<f64>,
    pub rot_com: Matrix3<f64>,
}

impl Inertia {
    pub fn new(mass: f64, com: Vector3<f64>, rot_com: Matrix3<f64>) -> Self {
        Self { mass, com, rot_com }
    }

    pub fn zero() -> Self {
        Self { mass: 0.0, com: Vector3::zeros(), rot_com: Matrix3::zeros() }
    }

    /// 6×6 spatial inertia matrix in (linear, angular) layout.
    pub fn matrix(&self) -> Matrix6<f64> {
        let m = self.mass;
        let cx = skew(&self.com);
        let mut i = Matrix6::zeros();
        i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * m));
        i.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-cx * m));
        i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(cx * m));
        i.fixed_view_mut::<3, 3>(3, 3).copy_from(&(self.rot_com - cx * cx * m));
        i
    }

    /// Inertia expressed in the parent frame of `placement` (placement maps
    /// this inertia's frame into the target frame).
    pub fn transformed(&self, placement: &Se3) -> Inertia {
        Inertia {
            mass: self.mass,
            com: placement.act_point(&self.com),
            rot_com: placement.rotation * self.rot_com * placement.rotation.transpose(),
        }
    }

    /// Sum of two inertias expressed in the same frame.
    pub fn combined(&self, other: &Inertia) -> Inertia {
        let mass = self.mass + other.mass;
        if mass <= 0.0 {
            return Inertia::zero();
        }
        let com = (self.com * self.mass + other.com * other.mass) / mass;
        let shift = |i: &Inertia| {
            let d = skew(&(i.com - com));
            i.rot_com - d * d * i.mass
        };
        Inertia { mass, com, rot_com: shift(self) + shift(other) }
    }
}

/// Spatial inertia as a dense 6×6 matrix mapping motions to forces.
pub fn inertia_mul(i: &Matrix6<f64>, m: &Motion) -> Force {
    Force::from_vector(&(i * m.to_vector()))
}

/// Rodrigues exponential of a rotation vector.
pub fn exp3(w: &Vector3<f64>) -> Matrix3<f64> {
    let th2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if th2 < 1e-8 {
        (1.0 - th2 / 6.0 + th2 * th2 / 120.0, 0.5 - th2 / 24.0 + th2 * th2 / 720.0)
    } else {
        let th = th2.sqrt();
        (th.sin() / th, (1.0 - th.cos()) / th2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation vector of a rotation matrix; rejects angles beyond [`LOG_ANGLE_LIMIT`].
pub fn log3(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let th = cos.acos();
    if th > LOG_ANGLE_LIMIT {
        return Err(Error::SingularRetraction { angle: th });
    }
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = if th < 1e-6 { 0.5 + th * th / 12.0 } else { th / (2.0 * th.sin()) };
    Ok(v * s)
}

/// `V(θ)` such that the translation of `exp6((ρ, θ))` is `V ρ`.
fn se3_v(w: &Vector3<f64>) -> Matrix3<f64> {
    let th2 = w.norm_squared();
    let k = skew(w);
    let (b, c) = if th2 < 1e-8 {
        (0.5 - th2 / 24.0 + th2 * th2 / 720.0, 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0)
    } else {
        let th = th2.sqrt();
        ((1.0 - th.cos()) / th2, (th - th.sin()) / (th2 * th))
    };
    Matrix3::identity() + k * b + k * k * c
}

/// Exponential map from a twist (linear, angular) to a placement.
pub fn exp6(xi: &Motion) -> Se3 {
    Se3 { rotation: exp3(&xi.angular), translation: se3_v(&xi.angular) * xi.linear }
}

/// Logarithm of a placement as a twist (linear, angular).
pub fn log6(m: &Se3) -> Result<Motion> {
    let w = log3(&m.rotation)?;
    let th2 = w.norm_squared();
    let k = skew(&w);
    // V⁻¹ = I − ½K + c K²
    let c = if th2 < 1e-8 {
        1.0 / 12.0 + th2 / 720.0 + th2 * th2 / 30240.0
    } else {
        let th = th2.sqrt();
        (1.0 - th * th.sin() / (2.0 * (1.0 - th.cos()))) / th2
    };
    let vinv = Matrix3::identity() - k * 0.5 + k * k * c;
    Ok(Motion { linear: vinv * m.translation, angular: w })
}

/// `log6` returned as a plain 6-vector.
pub fn log6_vector(m: &Se3) -> Result<Vector6<f64>> {
    log6(m).map(|x| x.to_vector())
}

/// Series `Σ_k (s·M)^k / (k+1)!`, convergent for every M.
fn phi1_series(ad: &Matrix6<f64>, sign: f64) -> Matrix6<f64> {
    let a = ad * sign;
    let mut sum = Matrix6::identity();
    let mut term = Matrix6::identity();
    for k in 1..60 {
        term = term * a / (k as f64 + 1.0);
        sum += term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    sum
}

/// Right Jacobian of SE(3): `exp6(ξ + δ) ≈ exp6(ξ) · exp6(Jr(ξ) δ)`.
pub fn jr6(xi: &Motion) -> Matrix6<f64> {
    phi1_series(&motion_cross_matrix(xi), -1.0)
}

/// Left Jacobian of SE(3): `exp6(ξ + δ) ≈ exp6(Jl(ξ) δ) · exp6(ξ)`.
pub fn jl6(xi: &Motion) -> Matrix6<f64> {
    phi1_series(&motion_cross_matrix(xi), 1.0)
}

pub fn jr6_inv(xi: &Motion) -> Matrix6<f64> {
    jr6(xi).try_inverse().expect("SE(3) Jacobian is invertible below angle 2π")
}

pub fn jl6_inv(xi: &Motion) -> Matrix6<f64> {
    jl6(xi).try_inverse().expect("SE(3) Jacobian is invertible below angle 2π")
}

/// Right Jacobian of SO(3).
pub fn jr3(w: &Vector3<f64>) -> Matrix3<f64> {
    let th2 = w.norm_squared();
    let k = skew(w);
    let (b, c) = if th2 < 1e-8 {
        (0.5 - th2 / 24.0, 1.0 / 6.0 - th2 / 120.0)
    } else {
        let th = th2.sqrt();
        ((1.0 - th.cos()) / th2, (th - th.sin()) / (th2 * th))
    };
    Matrix3::identity() - k * b + k * k * c
}

pub fn jr3_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let th2 = w.norm_squared();
    let k = skew(w);
    let c = if th2 < 1e-8 {
        1.0 / 12.0 + th2 / 720.0
    } else {
        let th = th2.sqrt();
        (1.0 - th * th.sin() / (2.0 * (1.0 - th.cos()))) / th2
    };
    Matrix3::identity() + k * 0.5 + k * k * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rand_motion(seed: u64) -> Motion {
        // small LCG so the unit tests stay self-contained
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        Motion::new(Vector3::new(next(), next(), next()), Vector3::new(next(), next(), next()))
    }

    #[test]
    fn log6_identity_and_translation() {
        assert_eq!(log6_vector(&Se3::identity()).unwrap(), Vector6::zeros());
        let m = Se3::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let l = log6_vector(&m).unwrap();
        assert!((l - Vector6::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn log6_rejects_half_turn() {
        let m = Se3::from_rotation(exp3(&Vector3::new(0.0, 0.0, PI - 1e-7)));
        assert!(matches!(log6(&m), Err(Error::SingularRetraction { .. })));
        let ok = Se3::from_rotation(exp3(&Vector3::new(0.0, 0.0, PI - 1e-3)));
        assert!(log6(&ok).is_ok());
    }

    #[test]
    fn pure_rotation_cross_is_ordinary_cross() {
        let nu = Motion::new(Vector3::zeros(), Vector3::z());
        let m = Motion::new(Vector3::zeros(), Vector3::x());
        let c = motion_cross(&nu, &m);
        assert_eq!(c.angular, Vector3::y());
        assert_eq!(c.linear, Vector3::zeros());
        assert_eq!(motion_cross(&Motion::zero(), &m), Motion::zero());
    }

    #[test]
    fn cross_matches_matrix_form() {
        for seed in 0..50 {
            let a = rand_motion(seed);
            let b = rand_motion(seed + 1000);
            let direct = a.cross(&b).to_vector();
            let mat = motion_cross_matrix(&a) * b.to_vector();
            assert!((direct - mat).amax() < 1e-14);
        }
    }

    #[test]
    fn force_cross_dual_blocks() {
        assert_eq!(force_cross_dual(&Force::zero()), Matrix6::zeros());
        let f = Force::new(Vector3::z(), Vector3::zeros());
        let m = force_cross_dual(&f);
        let s = skew(&Vector3::z());
        assert_eq!(m.fixed_view::<3, 3>(0, 3).into_owned(), s);
        assert_eq!(m.fixed_view::<3, 3>(3, 0).into_owned(), s);
        assert_eq!(m.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::zeros());
        assert_eq!(m.fixed_view::<3, 3>(3, 3).into_owned(), Matrix3::zeros());
    }

    #[test]
    fn force_cross_dual_is_derivative_of_inverse_dual_transform() {
        // d/dt (X*(exp(tν)))⁻¹ f at t = 0 equals ⟨f⟩* ν
        let h = 1e-6;
        for seed in 0..20 {
            let nu = rand_motion(seed);
            let f = Force::from_vector(&rand_motion(seed + 77).to_vector());
            let fp = exp6(&(nu * h)).inv_act_force(&f).to_vector();
            let fm = exp6(&(nu * -h)).inv_act_force(&f).to_vector();
            let fd = (fp - fm) / (2.0 * h);
            let an = force_cross_dual(&f) * nu.to_vector();
            assert!((fd - an).amax() < 1e-8, "{fd} vs {an}");
        }
    }

    #[test]
    fn exp_log_round_trip() {
        for seed in 0..200 {
            let mut xi = rand_motion(seed);
            xi.angular *= 1.7;
            let m = exp6(&xi);
            let back = log6(&m).unwrap();
            assert!((back - xi).norm() < 1e-10);
            assert!(exp6(&back).is_approx(&m, 1e-10));
        }
    }

    #[test]
    fn action_matrix_composes() {
        for seed in 0..1000 {
            let a = exp6(&rand_motion(seed));
            let b = exp6(&rand_motion(seed + 5000));
            let lhs = (a * b).action_matrix();
            let rhs = a.action_matrix() * b.action_matrix();
            assert!((lhs - rhs).amax() < 1e-10);
        }
    }

    #[test]
    fn dual_pairing_invariant() {
        for seed in 0..200 {
            let x = exp6(&rand_motion(seed));
            let m = rand_motion(seed + 1);
            let f = Force::from_vector(&rand_motion(seed + 2).to_vector());
            let lhs = x.act_motion(&m).dot(&x.act_force(&f));
            assert!((lhs - m.dot(&f)).abs() < 1e-10);
            let dm = x.action_matrix() * m.to_vector() - x.act_motion(&m).to_vector();
            let df = x.dual_action_matrix() * f.to_vector() - x.act_force(&f).to_vector();
            assert!(dm.amax() < 1e-12 && df.amax() < 1e-12);
        }
    }

    #[test]
    fn placement_inverse() {
        for seed in 0..100 {
            let a = exp6(&rand_motion(seed));
            assert!((a.inverse() * a).is_approx(&Se3::identity(), 1e-12));
            assert!((a.rotation.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bracket_matches_commutator_of_flows() {
        // ⟨a⟩×b + ⟨b⟩×a = 0 checked through the finite-difference commutator
        // of the two one-parameter subgroups
        let h = 1e-4;
        for seed in 0..20 {
            let a = rand_motion(seed);
            let b = rand_motion(seed + 9);
            let g = exp6(&(a * h)) * exp6(&(b * h)) * exp6(&(a * -h)) * exp6(&(b * -h));
            let fd = log6(&g).unwrap() * (1.0 / (h * h));
            assert!((fd - a.cross(&b)).norm() < 1e-3);
            assert!((a.cross(&b) + b.cross(&a)).norm() < 1e-14);
        }
    }

    #[test]
    fn se3_jacobians_match_finite_differences() {
        let h = 1e-6;
        for seed in 0..20 {
            let xi = rand_motion(seed);
            let jr = jr6(&xi);
            let jl = jl6(&xi);
            let base = exp6(&xi);
            for c in 0..6 {
                let mut e = Vector6::zeros();
                e[c] = h;
                let em = Motion::from_vector(&e);
                let pert = exp6(&(xi + em));
                let r = log6_vector(&base.inverse().compose(&pert)).unwrap() / h;
                let l = log6_vector(&pert.compose(&base.inverse())).unwrap() / h;
                assert!((r - jr.column(c)).amax() < 1e-5);
                assert!((l - jl.column(c)).amax() < 1e-5);
            }
            let w = xi.angular;
            let r3 = jr3(&w) * jr3_inv(&w);
            assert!((r3 - Matrix3::identity()).amax() < 1e-12);
            assert!((jr6(&Motion::new(Vector3::zeros(), w)).fixed_view::<3, 3>(3, 3) - jr3(&w)).amax() < 1e-12);
        }
    }

    #[test]
    fn inertia_combination_matches_matrix_sum() {
        let a = Inertia::new(1.2, Vector3::new(0.1, 0.0, 0.2), Matrix3::from_diagonal(&Vector3::new(0.1, 0.2, 0.15)));
        let b = Inertia::new(0.4, Vector3::new(-0.1, 0.3, 0.0), Matrix3::from_diagonal(&Vector3::new(0.02, 0.01, 0.02)));
        let s = a.combined(&b);
        assert!((s.matrix() - a.matrix() - b.matrix()).amax() < 1e-12);
        let x = exp6(&rand_motion(3));
        let t = a.transformed(&x).matrix();
        let expect = x.dual_action_matrix() * a.matrix() * x.action_matrix().try_inverse().unwrap();
        assert!((t - expect).amax() < 1e-12);
    }
}
