//! Rigid-body algorithms on the kinematic tree.
//!
//! Everything is computed in world coordinates: placements `oMi`, spatial
//! velocities `ov_i` and spatial accelerations `oa_i` (time derivatives of
//! `ov_i`, gravity excluded), and the world joint columns `J_i = X(oMi) S_i`.
//! In that representation the derivative of any joint column with respect
//! to a tangent perturbation of a supporting joint column `s` is `s × J_i`,
//! which is the only identity the derivative routines below rely on.

use nalgebra::{DMatrix, DVector, Matrix6, Vector3};

use crate::error::{Error, Result};
use crate::model::{JointKind, Model};
use crate::spatial::{inertia_mul, Force, Motion, Se3};

#[derive(Clone, Debug)]
pub struct KinematicsCache {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub a: DVector<f64>,
    /// World placement of each body frame.
    pub placements: Vec<Se3>,
    /// World spatial velocity of each body.
    pub velocities: Vec<Motion>,
    /// World spatial acceleration of each body (no gravity).
    pub accelerations: Vec<Motion>,
    /// World joint columns, 6×nv.
    pub columns: Vec<Motion>,
    pub frame_placements: Vec<Se3>,
}

impl KinematicsCache {
    pub fn column(&self, iv: usize) -> &Motion {
        &self.columns[iv]
    }

    pub fn body_velocity(&self, body: Option<usize>) -> Motion {
        body.map(|b| self.velocities[b]).unwrap_or_default()
    }

    pub fn body_acceleration(&self, body: Option<usize>) -> Motion {
        body.map(|b| self.accelerations[b]).unwrap_or_default()
    }

    pub fn body_placement(&self, body: Option<usize>) -> Se3 {
        body.map(|b| self.placements[b]).unwrap_or_default()
    }
}

/// `table[a][b]` is true when body `a` supports body `b` (or `a == b`).
pub fn support_table(model: &Model) -> Vec<Vec<bool>> {
    let n = model.joints.len();
    let mut t = vec![vec![false; n]; n];
    for b in 0..n {
        let mut cur = Some(b);
        while let Some(i) = cur {
            t[i][b] = true;
            cur = model.joints[i].parent;
        }
    }
    t
}

fn check_dims(model: &Model, q: &DVector<f64>, v: &DVector<f64>, a: &DVector<f64>) -> Result<()> {
    if q.len() != model.nq {
        return Err(Error::Dimension { what: "configuration", expected: model.nq, got: q.len() });
    }
    if v.len() != model.nv {
        return Err(Error::Dimension { what: "velocity", expected: model.nv, got: v.len() });
    }
    if a.len() != model.nv {
        return Err(Error::Dimension { what: "acceleration", expected: model.nv, got: a.len() });
    }
    Ok(())
}

fn joint_columns(model: &Model, j: usize, om: &Se3) -> Vec<Motion> {
    match &model.joints[j].kind {
        JointKind::Revolute { axis } => vec![om.act_motion(&Motion::new(Vector3::zeros(), *axis))],
        JointKind::FreeFlyer => (0..6)
            .map(|c| {
                let mut e = [0.0; 6];
                e[c] = 1.0;
                om.act_motion(&Motion::from_slice(&e))
            })
            .collect(),
    }
}

fn joint_motion_world(cols: &[Motion], idx: usize, x: &DVector<f64>, n: usize) -> Motion {
    let mut m = Motion::zero();
    for c in 0..n {
        m += cols[idx + c] * x[idx + c];
    }
    m
}

pub fn forward_kinematics(
    model: &Model,
    q: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
) -> Result<KinematicsCache> {
    check_dims(model, q, v, a)?;
    let n = model.joints.len();
    let mut placements = Vec::with_capacity(n);
    let mut velocities: Vec<Motion> = Vec::with_capacity(n);
    let mut accelerations: Vec<Motion> = Vec::with_capacity(n);
    let mut columns = vec![Motion::zero(); model.nv];
    for (i, joint) in model.joints.iter().enumerate() {
        let parent_m = joint.parent.map(|p| placements[p]).unwrap_or_else(Se3::identity);
        let om: Se3 = parent_m * joint.placement * model.joint_motion(i, q);
        let cols = joint_columns(model, i, &om);
        for (c, col) in cols.into_iter().enumerate() {
            columns[joint.idx_v + c] = col;
        }
        let nvj = joint.nv();
        let jv = joint_motion_world(&columns, joint.idx_v, v, nvj);
        let ja = joint_motion_world(&columns, joint.idx_v, a, nvj);
        let (pv, pa) = match joint.parent {
            Some(p) => (velocities[p], accelerations[p]),
            None => (Motion::zero(), Motion::zero()),
        };
        let ov = pv + jv;
        let oa = pa + ja + ov.cross(&jv);
        placements.push(om);
        velocities.push(ov);
        accelerations.push(oa);
    }
    let frame_placements = model
        .frames
        .iter()
        .map(|f| match f.body {
            Some(b) => placements[b] * f.placement,
            None => f.placement,
        })
        .collect();
    Ok(KinematicsCache {
        q: q.clone(),
        v: v.clone(),
        a: a.clone(),
        placements,
        velocities,
        accelerations,
        columns,
        frame_placements,
    })
}

/// World Jacobian of a body (6×nv): columns of its supporting joints.
pub fn body_world_jacobian(model: &Model, cache: &KinematicsCache, body: Option<usize>) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(6, model.nv);
    if let Some(b) = body {
        for ji in model.support_path(b) {
            let joint = &model.joints[ji];
            for c in joint.idx_v..joint.idx_v + joint.nv() {
                j.column_mut(c).copy_from(&cache.columns[c].to_vector());
            }
        }
    }
    j
}

/// Jacobian of a frame in its own local coordinates.
pub fn frame_jacobian(model: &Model, cache: &KinematicsCache, frame: usize) -> DMatrix<f64> {
    let f = &model.frames[frame];
    let of = cache.frame_placements[frame];
    let mut j = DMatrix::zeros(6, model.nv);
    if let Some(b) = f.body {
        for ji in model.support_path(b) {
            let joint = &model.joints[ji];
            for c in joint.idx_v..joint.idx_v + joint.nv() {
                j.column_mut(c).copy_from(&of.inv_act_motion(&cache.columns[c]).to_vector());
            }
        }
    }
    j
}

/// Spatial velocity of a frame in its local coordinates.
pub fn frame_velocity(model: &Model, cache: &KinematicsCache, frame: usize) -> Motion {
    let f = &model.frames[frame];
    cache.frame_placements[frame].inv_act_motion(&cache.body_velocity(f.body))
}

/// Spatial acceleration of a frame in its local coordinates.
pub fn frame_acceleration(model: &Model, cache: &KinematicsCache, frame: usize) -> Motion {
    let f = &model.frames[frame];
    cache.frame_placements[frame].inv_act_motion(&cache.body_acceleration(f.body))
}

fn gravity_motion(model: &Model) -> Motion {
    Motion::new(model.gravity, Vector3::zeros())
}

fn world_inertias(model: &Model, cache: &KinematicsCache) -> Vec<Matrix6<f64>> {
    model
        .bodies
        .iter()
        .zip(&cache.placements)
        .map(|(b, m)| b.inertia.transformed(m).matrix())
        .collect()
}

fn check_forces(model: &Model, fext: Option<&[Force]>) -> Result<()> {
    if let Some(f) = fext {
        if f.len() != model.joints.len() {
            return Err(Error::Dimension { what: "external forces", expected: model.joints.len(), got: f.len() });
        }
    }
    Ok(())
}

/// Per-body world forces and accumulated subtree forces of the RNEA pass.
struct RneaPass {
    inertias: Vec<Matrix6<f64>>,
    /// Subtree-accumulated forces.
    subtree: Vec<Force>,
}

fn rnea_pass(model: &Model, cache: &KinematicsCache, fext: Option<&[Force]>) -> RneaPass {
    let g = gravity_motion(model);
    let inertias = world_inertias(model, cache);
    let n = model.joints.len();
    let mut subtree = vec![Force::zero(); n];
    for i in 0..n {
        let ov = cache.velocities[i];
        let oa = cache.accelerations[i] - g;
        let h = inertia_mul(&inertias[i], &ov);
        let mut f = inertia_mul(&inertias[i], &oa) + ov.cross_force(&h);
        if let Some(fe) = fext {
            f += cache.placements[i].act_force(&fe[i]);
        }
        subtree[i] = f;
    }
    for i in (0..n).rev() {
        if let Some(p) = model.joints[i].parent {
            let fi = subtree[i];
            subtree[p] += fi;
        }
    }
    RneaPass { inertias, subtree }
}

/// Inverse dynamics `τ = M(q)a + b(q, v) + Σ J_kᵀ φ_k`, where `fext[k]` is the
/// force `φ_k` expressed in the frame of joint `k`.
pub fn rnea(
    model: &Model,
    q: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
    fext: Option<&[Force]>,
) -> Result<DVector<f64>> {
    check_forces(model, fext)?;
    let cache = forward_kinematics(model, q, v, a)?;
    Ok(rnea_from_cache(model, &cache, fext))
}

pub fn rnea_from_cache(model: &Model, cache: &KinematicsCache, fext: Option<&[Force]>) -> DVector<f64> {
    let pass = rnea_pass(model, cache, fext);
    let mut tau = DVector::zeros(model.nv);
    for (i, joint) in model.joints.iter().enumerate() {
        for c in joint.idx_v..joint.idx_v + joint.nv() {
            tau[c] = cache.columns[c].dot(&pass.subtree[i]);
        }
    }
    tau
}

pub fn nonlinear_effects(model: &Model, q: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    rnea(model, q, v, &DVector::zeros(model.nv), None)
}

pub fn gravity_torques(model: &Model, q: &DVector<f64>) -> Result<DVector<f64>> {
    let z = DVector::zeros(model.nv);
    rnea(model, q, &z, &z, None)
}

/// Composite rigid-body algorithm.
pub fn joint_space_inertia(model: &Model, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let z = DVector::zeros(model.nv);
    let cache = forward_kinematics(model, q, &z, &z)?;
    Ok(joint_space_inertia_from_cache(model, &cache))
}

pub fn joint_space_inertia_from_cache(model: &Model, cache: &KinematicsCache) -> DMatrix<f64> {
    let n = model.joints.len();
    let mut composite = world_inertias(model, cache);
    for i in (0..n).rev() {
        if let Some(p) = model.joints[i].parent {
            let ci = composite[i];
            composite[p] += ci;
        }
    }
    let mut m = DMatrix::zeros(model.nv, model.nv);
    for (i, joint) in model.joints.iter().enumerate() {
        for ci in joint.idx_v..joint.idx_v + joint.nv() {
            let f = inertia_mul(&composite[i], &cache.columns[ci]);
            for ja in model.support_path(i) {
                let other = &model.joints[ja];
                for cj in other.idx_v..other.idx_v + other.nv() {
                    let val = cache.columns[cj].dot(&f);
                    m[(ci, cj)] = val;
                    m[(cj, ci)] = val;
                }
            }
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct RneaDerivatives {
    pub dtau_dq: DMatrix<f64>,
    pub dtau_dv: DMatrix<f64>,
    /// Equals the joint-space inertia.
    pub dtau_da: DMatrix<f64>,
}

fn parent_motion(model: &Model, cache: &KinematicsCache, j: usize, acc_offset: Motion) -> (Motion, Motion) {
    match model.joints[j].parent {
        Some(p) => (cache.velocities[p], cache.accelerations[p] - acc_offset),
        None => (Motion::zero(), -acc_offset),
    }
}

/// Analytical derivatives of [`rnea`] with respect to tangent perturbations
/// of `q`, and to `v` and `a`. External forces are held fixed in their joint
/// frames.
pub fn rnea_derivatives(
    model: &Model,
    q: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
    fext: Option<&[Force]>,
) -> Result<RneaDerivatives> {
    check_forces(model, fext)?;
    let cache = forward_kinematics(model, q, v, a)?;
    Ok(rnea_derivatives_from_cache(model, &cache, fext))
}

pub fn rnea_derivatives_from_cache(
    model: &Model,
    cache: &KinematicsCache,
    fext: Option<&[Force]>,
) -> RneaDerivatives {
    let n = model.joints.len();
    let nv = model.nv;
    let g = gravity_motion(model);
    let pass = rnea_pass(model, cache, fext);
    let support = support_table(model);
    let mut dq = DMatrix::zeros(nv, nv);
    let mut dv = DMatrix::zeros(nv, nv);
    let mut acc_g = vec![Force::zero(); n];
    let mut acc_h = vec![Force::zero(); n];

    for (j, joint) in model.joints.iter().enumerate() {
        let (ov_p, oa_p) = parent_motion(model, cache, j, g);
        let ov_j = cache.velocities[j];
        for col in joint.idx_v..joint.idx_v + joint.nv() {
            let s = cache.columns[col];
            let dv_noncov = -s.cross(&ov_p);
            let ovp_x_s = ov_p.cross(&s);
            for k in j..n {
                if !support[j][k] {
                    continue;
                }
                let ik = &pass.inertias[k];
                let ov = cache.velocities[k];
                let w = ov - ov_p;
                let hk = inertia_mul(ik, &ov);
                // q: non-covariant part of the body force
                let da = -s.cross(&oa_p) + ovp_x_s.cross(&w);
                acc_g[k] = inertia_mul(ik, &da)
                    + dv_noncov.cross_force(&hk)
                    + ov.cross_force(&inertia_mul(ik, &dv_noncov));
                // v: full derivative of the body force
                let dacc = s.cross(&w) + ov_j.cross(&s);
                acc_h[k] = inertia_mul(ik, &dacc) + s.cross_force(&hk) + ov.cross_force(&inertia_mul(ik, &s));
            }
            for k in (j..n).rev() {
                if !support[j][k] {
                    continue;
                }
                if let Some(p) = model.joints[k].parent {
                    if p >= j && support[j][p] {
                        let (gk, hk) = (acc_g[k], acc_h[k]);
                        acc_g[p] += gk;
                        acc_h[p] += hk;
                    }
                }
            }
            // rows inside the subtree of j
            for i in j..n {
                if !support[j][i] {
                    continue;
                }
                let ji = &model.joints[i];
                for r in ji.idx_v..ji.idx_v + ji.nv() {
                    dq[(r, col)] = cache.columns[r].dot(&acc_g[i]);
                    dv[(r, col)] = cache.columns[r].dot(&acc_h[i]);
                }
            }
            // rows of strict ancestors of j
            let fq = s.cross_force(&pass.subtree[j]) + acc_g[j];
            let fv = acc_h[j];
            let mut anc = joint.parent;
            while let Some(i) = anc {
                let ji = &model.joints[i];
                for r in ji.idx_v..ji.idx_v + ji.nv() {
                    dq[(r, col)] = cache.columns[r].dot(&fq);
                    dv[(r, col)] = cache.columns[r].dot(&fv);
                }
                anc = ji.parent;
            }
        }
    }
    RneaDerivatives { dtau_dq: dq, dtau_dv: dv, dtau_da: joint_space_inertia_from_cache(model, cache) }
}

/// World-frame derivatives of a body's spatial velocity and acceleration
/// with respect to every tangent coordinate (zero outside the support).
#[derive(Clone, Debug)]
pub struct BodyMotionDerivatives {
    pub dvel_dq: Vec<Motion>,
    pub dacc_dq: Vec<Motion>,
    pub dvel_dv: Vec<Motion>,
    pub dacc_dv: Vec<Motion>,
}

pub fn body_motion_derivatives(model: &Model, cache: &KinematicsCache, body: Option<usize>) -> BodyMotionDerivatives {
    let nv = model.nv;
    let mut d = BodyMotionDerivatives {
        dvel_dq: vec![Motion::zero(); nv],
        dacc_dq: vec![Motion::zero(); nv],
        dvel_dv: vec![Motion::zero(); nv],
        dacc_dv: vec![Motion::zero(); nv],
    };
    let Some(b) = body else { return d };
    let ov_b = cache.velocities[b];
    let oa_b = cache.accelerations[b];
    for j in model.support_path(b) {
        let joint = &model.joints[j];
        let (ov_p, oa_p) = parent_motion(model, cache, j, Motion::zero());
        let ov_j = cache.velocities[j];
        let w = ov_b - ov_p;
        for col in joint.idx_v..joint.idx_v + joint.nv() {
            let s = cache.columns[col];
            d.dvel_dq[col] = s.cross(&w);
            d.dacc_dq[col] = s.cross(&(oa_b - oa_p)) + ov_p.cross(&s).cross(&w);
            d.dvel_dv[col] = s;
            d.dacc_dv[col] = s.cross(&w) + ov_j.cross(&s);
        }
    }
    d
}

/// Derivative of a world point rigidly attached to `body`, with respect to
/// the tangent perturbation of column `col`: `s_lin + s_ang × p` when the
/// column supports the body.
pub fn point_column(cache: &KinematicsCache, col: usize, p: &Vector3<f64>) -> Vector3<f64> {
    let s = &cache.columns[col];
    s.linear + s.angular.cross(p)
}

pub fn center_of_mass(model: &Model, cache: &KinematicsCache) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    let mut m = 0.0;
    for (b, om) in model.bodies.iter().zip(&cache.placements) {
        c += om.act_point(&b.inertia.com) * b.inertia.mass;
        m += b.inertia.mass;
    }
    if m > 0.0 {
        c / m
    } else {
        c
    }
}

/// CoM position Jacobian (3×nv).
pub fn com_jacobian(model: &Model, cache: &KinematicsCache) -> DMatrix<f64> {
    let total = model.total_mass();
    let mut j = DMatrix::zeros(3, model.nv);
    for (k, b) in model.bodies.iter().enumerate() {
        let p = cache.placements[k].act_point(&b.inertia.com);
        let w = b.inertia.mass / total;
        for ji in model.support_path(k) {
            let joint = &model.joints[ji];
            for c in joint.idx_v..joint.idx_v + joint.nv() {
                let col = point_column(cache, c, &p) * w;
                for r in 0..3 {
                    j[(r, c)] += col[r];
                }
            }
        }
    }
    j
}

pub fn com_velocity(model: &Model, cache: &KinematicsCache) -> Vector3<f64> {
    let total = model.total_mass();
    let mut vc = Vector3::zeros();
    for (k, b) in model.bodies.iter().enumerate() {
        let p = cache.placements[k].act_point(&b.inertia.com);
        let ov = cache.velocities[k];
        vc += (ov.linear + ov.angular.cross(&p)) * (b.inertia.mass / total);
    }
    vc
}

/// Derivative of the CoM velocity with respect to tangent perturbations of
/// q (3×nv); the derivative with respect to v is [`com_jacobian`].
pub fn com_velocity_dq(model: &Model, cache: &KinematicsCache) -> DMatrix<f64> {
    let total = model.total_mass();
    let mut out = DMatrix::zeros(3, model.nv);
    for (k, b) in model.bodies.iter().enumerate() {
        let w = b.inertia.mass / total;
        if w == 0.0 {
            continue;
        }
        let p = cache.placements[k].act_point(&b.inertia.com);
        let ov = cache.velocities[k];
        for j in model.support_path(k) {
            let joint = &model.joints[j];
            let ov_p = joint.parent.map(|p| cache.velocities[p]).unwrap_or_default();
            for c in joint.idx_v..joint.idx_v + joint.nv() {
                let s = cache.columns[c];
                let dov = s.cross(&(ov - ov_p));
                let dp = s.linear + s.angular.cross(&p);
                let d = dov.linear + dov.angular.cross(&p) + ov.angular.cross(&dp);
                for r in 0..3 {
                    out[(r, c)] += d[r] * w;
                }
            }
        }
    }
    out
}

pub fn kinetic_energy(model: &Model, q: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    let m = joint_space_inertia(model, q)?;
    Ok(0.5 * v.dot(&(m * v)))
}

pub fn potential_energy(model: &Model, q: &DVector<f64>) -> Result<f64> {
    let z = DVector::zeros(model.nv);
    let cache = forward_kinematics(model, q, &z, &z)?;
    let c = center_of_mass(model, &cache);
    Ok(-model.total_mass() * model.gravity.dot(&c))
}

/// Unconstrained forward dynamics `M⁻¹(τ − b)`.
pub fn forward_dynamics(model: &Model, q: &DVector<f64>, v: &DVector<f64>, tau: &DVector<f64>) -> Result<DVector<f64>> {
    let m = joint_space_inertia(model, q)?;
    let b = nonlinear_effects(model, q, v)?;
    let chol = m.cholesky().ok_or(Error::SingularInertia)?;
    Ok(chol.solve(&(tau - b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_model;

    #[test]
    fn hanging_pendulum_needs_no_torque() {
        let m = load_model("pendulum").unwrap();
        let z = DVector::zeros(1);
        let tau = rnea(&m, &z, &z, &z, None).unwrap();
        assert!(tau[0].abs() < 1e-12);
    }

    #[test]
    fn horizontal_pendulum_gravity_torque() {
        let m = load_model("pendulum").unwrap();
        let q = DVector::from_element(1, std::f64::consts::FRAC_PI_2);
        let z = DVector::zeros(1);
        let tau = rnea(&m, &q, &z, &z, None).unwrap();
        // m g l with m = 1, l = 0.5
        assert!((tau[0].abs() - 4.905).abs() < 1e-12, "{}", tau[0]);
    }

    #[test]
    fn pendulum_inertia() {
        let m = load_model("pendulum").unwrap();
        let q = DVector::from_element(1, 0.3);
        let mm = joint_space_inertia(&m, &q).unwrap();
        let iyy = m.bodies[0].inertia.rot_com[(1, 1)];
        assert!((mm[(0, 0)] - (0.25 + iyy)).abs() < 1e-12);
    }

    #[test]
    fn fixed_base_root_frame_has_zero_jacobian() {
        let m = load_model("fourbar").unwrap();
        let q = m.reference_configuration();
        let z = DVector::zeros(m.nv);
        let cache = forward_kinematics(&m, &q, &z, &z).unwrap();
        let base = m.frame_index("ground").unwrap();
        assert_eq!(frame_jacobian(&m, &cache, base), DMatrix::zeros(6, m.nv));
    }

    #[test]
    fn zero_configuration_composes_offsets() {
        let m = load_model("fourbar").unwrap();
        let q = DVector::zeros(m.nq);
        let z = DVector::zeros(m.nv);
        let cache = forward_kinematics(&m, &q, &z, &z).unwrap();
        for (i, j) in m.joints.iter().enumerate() {
            let expect = match j.parent {
                Some(p) => cache.placements[p] * j.placement,
                None => j.placement,
            };
            assert!(cache.placements[i].is_approx(&expect, 1e-15));
        }
    }
}
