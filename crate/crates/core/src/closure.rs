//! 6D loop-closure and contact constraints between two frames.
//!
//! A constraint welds frame `F1` (on body `b1`) to frame `F2` (on body `b2`,
//! or anchored in the world). Quantities are expressed in `F1`:
//!
//! * residual `r = Log(¹M₂)`,
//! * velocity `ν_c = ¹ν₁ − ¹X₂ ²ν₂ = J_c v`,
//! * acceleration `a_c = dν_c/dt = J_c q̈ + a₀`.
//!
//! With world velocities `ov`, the acceleration is
//! `a_c = X₁⁻¹(oa₁ − oa₂ + ov₁ × ov₂)`; the last term is the one carried by
//! the relative motion of the two frames. Contact forces `λ` live in `F1`
//! and act on `b1` as `+λ` and on `b2` as the opposite wrench, so that the
//! inverse dynamics reads `τ = M q̈ + b + J_cᵀ λ`.

use nalgebra::{DMatrix, Matrix6, Vector6};

use crate::error::Result;
use crate::model::Model;
use crate::rba::{body_motion_derivatives, KinematicsCache};
use crate::spatial::{jl6_inv, log6, Force, Motion, Se3};

/// A rigidly attached frame: body (`None` = world) and placement in it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttachedFrame {
    pub body: Option<usize>,
    pub placement: Se3,
}

impl AttachedFrame {
    pub fn world_placement(&self, cache: &KinematicsCache) -> Se3 {
        cache.body_placement(self.body) * self.placement
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosureConstraint {
    pub name: String,
    pub frame1: AttachedFrame,
    pub frame2: AttachedFrame,
}

/// Signs used to assemble `a_c = s₁γ₁ + s₂γ₂ + s₃γ₃` in the derivative
/// routines. Anything but the default is wrong on purpose and only exists
/// so that the derivative checker can be shown to catch it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaAssembly {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for GammaAssembly {
    fn default() -> Self {
        Self { gamma1: 1.0, gamma2: -1.0, gamma3: 1.0 }
    }
}

impl GammaAssembly {
    pub fn flipped_gamma3() -> Self {
        Self { gamma3: -1.0, ..Self::default() }
    }
}

pub const DEFAULT_BAUMGARTE: f64 = 20.0;

impl ClosureConstraint {
    /// Constraint for closure pair `index` of the model.
    pub fn from_model(model: &Model, index: usize) -> Self {
        let pair = &model.closures[index];
        let f1 = &model.frames[pair.frame1];
        let f2 = &model.frames[pair.frame2];
        Self {
            name: pair.name.clone(),
            frame1: AttachedFrame { body: f1.body, placement: f1.placement },
            frame2: AttachedFrame { body: f2.body, placement: f2.placement },
        }
    }

    /// All loop closures declared by the model.
    pub fn all_from_model(model: &Model) -> Vec<Self> {
        (0..model.closures.len()).map(|i| Self::from_model(model, i)).collect()
    }

    /// Weld frame `frame` of the model to a fixed world placement.
    pub fn contact(model: &Model, frame: usize, target: Se3) -> Self {
        let f = &model.frames[frame];
        Self {
            name: format!("contact:{}", f.name),
            frame1: AttachedFrame { body: f.body, placement: f.placement },
            frame2: AttachedFrame { body: None, placement: target },
        }
    }

    /// The same constraint with the roles of the two frames exchanged.
    pub fn swapped(&self) -> Self {
        Self { name: self.name.clone(), frame1: self.frame2, frame2: self.frame1 }
    }

    pub fn placement1(&self, cache: &KinematicsCache) -> Se3 {
        self.frame1.world_placement(cache)
    }

    pub fn placement2(&self, cache: &KinematicsCache) -> Se3 {
        self.frame2.world_placement(cache)
    }

    /// `¹M₂`.
    pub fn relative_placement(&self, cache: &KinematicsCache) -> Se3 {
        self.placement1(cache).inv_compose(&self.placement2(cache))
    }
}

pub fn constraint_residual(cache: &KinematicsCache, c: &ClosureConstraint) -> Result<Vector6<f64>> {
    Ok(log6(&c.relative_placement(cache))?.to_vector())
}

pub fn constraint_velocity(cache: &KinematicsCache, c: &ClosureConstraint) -> Motion {
    let x1 = c.placement1(cache);
    x1.inv_act_motion(&(cache.body_velocity(c.frame1.body) - cache.body_velocity(c.frame2.body)))
}

/// Constraint acceleration at the cache's joint acceleration.
pub fn constraint_acceleration(cache: &KinematicsCache, c: &ClosureConstraint) -> Motion {
    let x1 = c.placement1(cache);
    let (ov1, ov2) = (cache.body_velocity(c.frame1.body), cache.body_velocity(c.frame2.body));
    let (oa1, oa2) = (cache.body_acceleration(c.frame1.body), cache.body_acceleration(c.frame2.body));
    x1.inv_act_motion(&(oa1 - oa2 + ov1.cross(&ov2)))
}

/// The three terms `(γ₁, γ₂, γ₃)` with `a_c = γ₁ − γ₂ + γ₃`.
pub fn acceleration_terms(cache: &KinematicsCache, c: &ClosureConstraint) -> [Motion; 3] {
    let x1 = c.placement1(cache);
    let (ov1, ov2) = (cache.body_velocity(c.frame1.body), cache.body_velocity(c.frame2.body));
    [
        x1.inv_act_motion(&cache.body_acceleration(c.frame1.body)),
        x1.inv_act_motion(&cache.body_acceleration(c.frame2.body)),
        x1.inv_act_motion(&ov1.cross(&ov2)),
    ]
}

fn support_columns(model: &Model, body: Option<usize>) -> Vec<bool> {
    let mut on = vec![false; model.nv];
    if let Some(b) = body {
        for j in model.support_path(b) {
            let joint = &model.joints[j];
            for c in joint.idx_v..joint.idx_v + joint.nv() {
                on[c] = true;
            }
        }
    }
    on
}

/// Constraint Jacobian `J_c` (6×nv) in `F1`.
pub fn constraint_jacobian(model: &Model, cache: &KinematicsCache, c: &ClosureConstraint) -> DMatrix<f64> {
    let x1 = c.placement1(cache);
    let on1 = support_columns(model, c.frame1.body);
    let on2 = support_columns(model, c.frame2.body);
    let mut j = DMatrix::zeros(6, model.nv);
    for col in 0..model.nv {
        let w = match (on1[col], on2[col]) {
            (true, false) => cache.columns[col],
            (false, true) => -cache.columns[col],
            _ => continue,
        };
        j.column_mut(col).copy_from(&x1.inv_act_motion(&w).to_vector());
    }
    j
}

/// `(J_c, a₀)`; `a₀` is the constraint acceleration at zero joint
/// acceleration, whatever acceleration the cache was built with.
pub fn constraint_acc_split(
    model: &Model,
    cache: &KinematicsCache,
    c: &ClosureConstraint,
) -> (DMatrix<f64>, Vector6<f64>) {
    let j = constraint_jacobian(model, cache, c);
    let a0 = constraint_acceleration(cache, c).to_vector() - &j * &cache.a;
    (j, a0.fixed_rows::<6>(0).into())
}

/// `∂r/∂q` in tangent coordinates: `−Jl⁻¹(r) J_c`.
pub fn residual_jacobian(
    model: &Model,
    cache: &KinematicsCache,
    c: &ClosureConstraint,
) -> Result<DMatrix<f64>> {
    let r = log6(&c.relative_placement(cache))?;
    let jl = jl6_inv(&r);
    let jl = DMatrix::from_fn(6, 6, |i, k| jl[(i, k)]);
    Ok(-jl * constraint_jacobian(model, cache, c))
}

/// Acceleration-level Baumgarte correction added to `a₀` so that the
/// residual obeys `r̈ + 2α ṙ + α² r = 0` to first order.
pub fn baumgarte_term(cache: &KinematicsCache, c: &ClosureConstraint, alpha: f64) -> Result<Vector6<f64>> {
    let r = constraint_residual(cache, c)?;
    let nu = constraint_velocity(cache, c).to_vector();
    Ok(nu * (2.0 * alpha) - r * (alpha * alpha))
}

/// Derivatives of `a_c` (at the cache's `q̈`) with respect to tangent
/// perturbations of q and to v: `(∂a_c/∂q, ∂a_c/∂v)`, each 6×nv.
pub fn acc_derivatives(
    model: &Model,
    cache: &KinematicsCache,
    c: &ClosureConstraint,
) -> (DMatrix<f64>, DMatrix<f64>) {
    acc_derivatives_with(model, cache, c, GammaAssembly::default())
}

pub fn acc_derivatives_with(
    model: &Model,
    cache: &KinematicsCache,
    c: &ClosureConstraint,
    signs: GammaAssembly,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let nv = model.nv;
    let x1 = c.placement1(cache);
    let (b1, b2) = (c.frame1.body, c.frame2.body);
    let on1 = support_columns(model, b1);
    let (ov1, ov2) = (cache.body_velocity(b1), cache.body_velocity(b2));
    let (oa1, oa2) = (cache.body_acceleration(b1), cache.body_acceleration(b2));
    let cross = ov1.cross(&ov2);
    let d1 = body_motion_derivatives(model, cache, b1);
    let d2 = body_motion_derivatives(model, cache, b2);
    let mut dq = DMatrix::zeros(6, nv);
    let mut dv = DMatrix::zeros(6, nv);
    for col in 0..nv {
        // Each γ is X₁⁻¹ applied to a world quantity w; its derivative is
        // X₁⁻¹(∂w − s × w) where s is the column when it moves F1.
        let frame_rate = |w: &Motion| if on1[col] { cache.columns[col].cross(w) } else { Motion::zero() };
        let g1 = d1.dacc_dq[col] - frame_rate(&oa1);
        let g2 = d2.dacc_dq[col] - frame_rate(&oa2);
        let g3 = d1.dvel_dq[col].cross(&ov2) + ov1.cross(&d2.dvel_dq[col]) - frame_rate(&cross);
        let w = g1 * signs.gamma1 + g2 * signs.gamma2 + g3 * signs.gamma3;
        dq.column_mut(col).copy_from(&x1.inv_act_motion(&w).to_vector());

        let g1 = d1.dacc_dv[col];
        let g2 = d2.dacc_dv[col];
        let g3 = d1.dvel_dv[col].cross(&ov2) + ov1.cross(&d2.dvel_dv[col]);
        let w = g1 * signs.gamma1 + g2 * signs.gamma2 + g3 * signs.gamma3;
        dv.column_mut(col).copy_from(&x1.inv_act_motion(&w).to_vector());
    }
    (dq, dv)
}

/// World wrench applied on `b1` by the constraint force `f` (given in F1).
pub fn world_force(cache: &KinematicsCache, c: &ClosureConstraint, f: &Force) -> Force {
    c.placement1(cache).act_force(f)
}

/// The constraint force as local joint forces `(body, φ)` suitable for
/// [`crate::rba::rnea`]: `+f` on `b1` and the opposite wrench on `b2`.
pub fn joint_forces(cache: &KinematicsCache, c: &ClosureConstraint, f: &Force) -> Vec<(usize, Force)> {
    let of = world_force(cache, c, f);
    let mut out = Vec::with_capacity(2);
    if let Some(b1) = c.frame1.body {
        out.push((b1, cache.placements[b1].inv_act_force(&of)));
    }
    if let Some(b2) = c.frame2.body {
        out.push((b2, cache.placements[b2].inv_act_force(&(-of))));
    }
    out
}

/// `∂(J_cᵀ f)/∂q` for a constraint force `f` held fixed in F1 (nv×nv).
pub fn id_force_derivative(
    model: &Model,
    cache: &KinematicsCache,
    c: &ClosureConstraint,
    f: &Force,
) -> DMatrix<f64> {
    let nv = model.nv;
    let of = world_force(cache, c, f);
    let on1 = support_columns(model, c.frame1.body);
    let on2 = support_columns(model, c.frame2.body);
    let mut out = DMatrix::zeros(nv, nv);
    for j in 0..nv {
        let sf = cache.columns[j].cross_force(&of);
        for m in 0..nv {
            let sign = match (on1[m], on2[m]) {
                (true, false) => 1.0,
                (false, true) => -1.0,
                _ => continue,
            };
            // column j lies below row m when it supports the row's joint
            let below = is_descendant_column(model, m, j);
            let w = (on1[j] as i32 - below as i32) as f64;
            if w != 0.0 {
                out[(m, j)] = sign * w * cache.columns[m].dot(&sf);
            }
        }
    }
    out
}

/// Part of [`id_force_derivative`] not captured when the two joint forces
/// of [`joint_forces`] are held fixed in their joint frames: the rate of
/// the `b2` wrench as F1 moves relative to `b2`.
pub fn id_force_correction(
    model: &Model,
    cache: &KinematicsCache,
    c: &ClosureConstraint,
    f: &Force,
) -> DMatrix<f64> {
    let nv = model.nv;
    let of = world_force(cache, c, f);
    let on1 = support_columns(model, c.frame1.body);
    let on2 = support_columns(model, c.frame2.body);
    let mut out = DMatrix::zeros(nv, nv);
    for j in 0..nv {
        let w = on2[j] as i32 - on1[j] as i32;
        if w == 0 {
            continue;
        }
        let df = cache.columns[j].cross_force(&of) * w as f64;
        for m in 0..nv {
            if on2[m] {
                out[(m, j)] = cache.columns[m].dot(&df);
            }
        }
    }
    out
}

/// True when tangent column `col` belongs to a joint that supports (or is)
/// the joint owning tangent column `row`.
fn is_descendant_column(model: &Model, row: usize, col: usize) -> bool {
    let owner = |iv: usize| {
        model
            .joints
            .iter()
            .position(|j| iv >= j.idx_v && iv < j.idx_v + j.nv())
            .expect("tangent index in range")
    };
    model.supports(owner(col), owner(row))
}

/// 6×6 matrix form of `X₁⁻ᵀ`, the map from F1 forces to world forces.
pub fn force_map(cache: &KinematicsCache, c: &ClosureConstraint) -> Matrix6<f64> {
    c.placement1(cache).dual_action_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_model;
    use crate::rba::forward_kinematics;
    use nalgebra::{DVector, Vector3};

    #[test]
    fn translation_offset_residual() {
        let m = load_model("pendulum").unwrap();
        let z = DVector::zeros(1);
        let cache = forward_kinematics(&m, &z, &z, &z).unwrap();
        let tip = m.frame_index("tip").unwrap();
        let f = &m.frames[tip];
        let target = cache.placements[0] * f.placement * Se3::from_translation(Vector3::new(0.0, 0.0, 0.01));
        let c = ClosureConstraint::contact(&m, tip, target);
        let r = constraint_residual(&cache, &c).unwrap();
        let expect = Vector6::new(0.0, 0.0, 0.01, 0.0, 0.0, 0.0);
        assert!((r - expect).amax() < 1e-15);
    }

    #[test]
    fn static_state_has_no_drift() {
        let m = load_model("fourbar").unwrap();
        let q = m.reference_configuration();
        let z = DVector::zeros(m.nv);
        let cache = forward_kinematics(&m, &q, &z, &z).unwrap();
        let c = ClosureConstraint::from_model(&m, 0);
        let (_, a0) = constraint_acc_split(&m, &cache, &c);
        assert_eq!(a0, Vector6::zeros());
        let (dq, _) = acc_derivatives(&m, &cache, &c);
        assert!(dq.amax() < 1e-15);
    }

    #[test]
    fn zero_force_has_zero_derivative() {
        let m = load_model("fourbar").unwrap();
        let q = m.reference_configuration();
        let z = DVector::zeros(m.nv);
        let cache = forward_kinematics(&m, &q, &z, &z).unwrap();
        let c = ClosureConstraint::from_model(&m, 0);
        assert_eq!(id_force_derivative(&m, &cache, &c, &Force::zero()), DMatrix::zeros(m.nv, m.nv));
    }
}
