//! Constrained forward dynamics and its derivatives.
//!
//! The acceleration and constraint forces solve the saddle-point system
//!
//! ```text
//! [ 0   J_c ] [ λ ]   [ −a₀   ]
//! [ J_cᵀ M  ] [ q̈ ] = [ τ − b ]
//! ```
//!
//! through the Delassus matrix `G = J_c M⁻¹ J_cᵀ`. `G` is inverted by a
//! truncated eigen-decomposition, which gives the minimum-norm `λ` when the
//! stacked constraints are redundant (planar loops welded in 6D always
//! are) and leaves `q̈` unique.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, Vector3};

use crate::closure::{
    acc_derivatives_with, baumgarte_term, constraint_acc_split, constraint_residual, constraint_velocity,
    id_force_derivative, residual_jacobian, ClosureConstraint, GammaAssembly,
};
use crate::error::{Error, Result};
use crate::model::{MechState, Model};
use crate::rba::{
    body_motion_derivatives, forward_kinematics, joint_space_inertia_from_cache, rnea_derivatives_from_cache,
    rnea_from_cache, KinematicsCache,
};
use crate::spatial::Force;

/// Relative eigenvalue cut-off of the Delassus pseudo-inverse.
pub const DELASSUS_CUTOFF: f64 = 1e-10;
/// Scaled residual above which the constraint stack is declared inconsistent.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-7;
pub const PROJECTION_ITERATIONS: usize = 100;
pub const PROJECTION_TOLERANCE: f64 = 1e-11;

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSet {
    pub constraints: Vec<ClosureConstraint>,
    /// Baumgarte gain α (s⁻¹); `None` for the bare acceleration constraint.
    pub baumgarte: Option<f64>,
    pub signs: GammaAssembly,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<ClosureConstraint>) -> Self {
        Self { constraints, baumgarte: None, signs: GammaAssembly::default() }
    }

    /// The model's own loop closures.
    pub fn closures(model: &Model) -> Self {
        Self::new(ClosureConstraint::all_from_model(model))
    }

    /// Loop closures plus contacts pinning the named frames at their
    /// placements in configuration `q`.
    pub fn with_contacts(model: &Model, q: &DVector<f64>, frames: &[&str]) -> Result<Self> {
        let z = DVector::zeros(model.nv);
        let cache = forward_kinematics(model, q, &z, &z)?;
        let mut cs = ClosureConstraint::all_from_model(model);
        for name in frames {
            let f = model.frame_index(name)?;
            cs.push(ClosureConstraint::contact(model, f, cache.frame_placements[f]));
        }
        Ok(Self::new(cs))
    }

    pub fn with_baumgarte(mut self, alpha: f64) -> Self {
        self.baumgarte = Some(alpha);
        self
    }

    pub fn dim(&self) -> usize {
        6 * self.constraints.len()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Stacked Jacobian and drift (including the Baumgarte term if enabled).
    pub fn stack(&self, model: &Model, cache: &KinematicsCache) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let m = self.dim();
        let mut j = DMatrix::zeros(m, model.nv);
        let mut a0 = DVector::zeros(m);
        for (k, c) in self.constraints.iter().enumerate() {
            let (jc, mut ac) = constraint_acc_split(model, cache, c);
            if let Some(alpha) = self.baumgarte {
                ac += baumgarte_term(cache, c, alpha)?;
            }
            j.view_mut((6 * k, 0), (6, model.nv)).copy_from(&jc);
            a0.rows_mut(6 * k, 6).copy_from(&ac);
        }
        Ok((j, a0))
    }

    pub fn residuals(&self, cache: &KinematicsCache) -> Result<DVector<f64>> {
        let mut r = DVector::zeros(self.dim());
        for (k, c) in self.constraints.iter().enumerate() {
            r.rows_mut(6 * k, 6).copy_from(&constraint_residual(cache, c)?);
        }
        Ok(r)
    }

    pub fn max_residual(&self, model: &Model, q: &DVector<f64>) -> Result<f64> {
        let z = DVector::zeros(model.nv);
        let cache = forward_kinematics(model, q, &z, &z)?;
        Ok(self.residuals(&cache)?.amax())
    }
}

/// Selection matrix `S` (nv×nu) with `τ = S u`.
pub fn actuation_matrix(model: &Model) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(model.nv, model.nu());
    for (k, &iv) in model.actuation.iter().enumerate() {
        s[(iv, k)] = 1.0;
    }
    s
}

pub fn joint_torques(model: &Model, u: &DVector<f64>) -> Result<DVector<f64>> {
    if u.len() != model.nu() {
        return Err(Error::Dimension { what: "control", expected: model.nu(), got: u.len() });
    }
    let mut tau = DVector::zeros(model.nv);
    for (k, &iv) in model.actuation.iter().enumerate() {
        tau[iv] = u[k];
    }
    Ok(tau)
}

/// Factorised saddle-point operator, reusable for several right-hand sides.
#[derive(Clone, Debug)]
pub struct KktFactor {
    pub mass: DMatrix<f64>,
    pub jacobian: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `M⁻¹ J_cᵀ`.
    minv_jt: DMatrix<f64>,
    /// Pseudo-inverse of the Delassus matrix.
    delassus_pinv: DMatrix<f64>,
    delassus: DMatrix<f64>,
    pub rank: usize,
}

impl KktFactor {
    pub fn new(mass: DMatrix<f64>, jacobian: DMatrix<f64>) -> Result<Self> {
        let chol = mass.clone().cholesky().ok_or(Error::SingularInertia)?;
        let minv_jt = chol.solve(&jacobian.transpose());
        let mut delassus = &jacobian * &minv_jt;
        delassus = (&delassus + delassus.transpose()) * 0.5;
        let m = delassus.nrows();
        let (delassus_pinv, rank) = if m == 0 {
            (DMatrix::zeros(0, 0), 0)
        } else {
            let eig = SymmetricEigen::new(delassus.clone());
            let top = eig.eigenvalues.amax();
            let cut = DELASSUS_CUTOFF * top.max(f64::MIN_POSITIVE);
            let mut inv = DVector::zeros(m);
            let mut rank = 0;
            for i in 0..m {
                if eig.eigenvalues[i] > cut {
                    inv[i] = 1.0 / eig.eigenvalues[i];
                    rank += 1;
                }
            }
            let u = &eig.eigenvectors;
            (u * DMatrix::from_diagonal(&inv) * u.transpose(), rank)
        };
        Ok(Self { mass, jacobian, chol, minv_jt, delassus_pinv, delassus, rank })
    }

    /// Solve `J x = c1`, `M x + Jᵀ y = c2` column-wise; returns `(y, x)`.
    /// Inconsistent `c1` components are reported per constraint block.
    pub fn solve(&self, c1: &DMatrix<f64>, c2: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let free = self.chol.solve(c2);
        if self.jacobian.nrows() == 0 {
            return Ok((DMatrix::zeros(0, c2.ncols()), free));
        }
        let rhs = &self.jacobian * &free - c1;
        let y = &self.delassus_pinv * &rhs;
        let miss = &self.delassus * &y - &rhs;
        let scale = 1.0 + rhs.amax();
        if miss.amax() / scale > CONSISTENCY_TOLERANCE {
            let (mut worst, mut val) = (0, 0.0);
            for k in 0..miss.nrows() / 6 {
                let v = miss.rows(6 * k, 6).amax();
                if v > val {
                    worst = k;
                    val = v;
                }
            }
            return Err(Error::RankDeficient { constraint: worst, residual: val / scale });
        }
        let x = free - &self.minv_jt * &y;
        Ok((y, x))
    }
}

#[derive(Clone, Debug)]
pub struct KktSolution {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub u: DVector<f64>,
    pub tau: DVector<f64>,
    pub qdd: DVector<f64>,
    /// Stacked constraint forces, in the order of the constraint set.
    pub lambda: DVector<f64>,
    pub drift: DVector<f64>,
    pub bias: DVector<f64>,
    pub factor: KktFactor,
    model_hash: String,
    constraints: ConstraintSet,
}

impl KktSolution {
    pub fn mass(&self) -> &DMatrix<f64> {
        &self.factor.mass
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.factor.jacobian
    }

    /// `‖K y − k‖∞ / (1 + ‖k‖∞)`.
    pub fn kkt_residual(&self) -> f64 {
        let j = self.jacobian();
        let top = j * &self.qdd + &self.drift;
        let rhs_bottom = &self.tau - &self.bias;
        let bottom = j.transpose() * &self.lambda + self.mass() * &self.qdd - &rhs_bottom;
        let k = self.drift.amax().max(rhs_bottom.amax());
        top.amax().max(bottom.amax()) / (1.0 + k)
    }

    /// `‖J_c q̈ + a₀‖∞`.
    pub fn constraint_error(&self) -> f64 {
        if self.drift.is_empty() {
            return 0.0;
        }
        (self.jacobian() * &self.qdd + &self.drift).amax()
    }

    pub fn force(&self, k: usize) -> Force {
        Force::from_slice(self.lambda.rows(6 * k, 6).as_slice())
    }

    /// The unconstrained acceleration `M⁻¹(τ − b)`.
    pub fn free_acceleration(&self) -> DVector<f64> {
        self.factor.chol.solve(&(&self.tau - &self.bias))
    }
}

pub fn constrained_forward_dynamics(
    model: &Model,
    constraints: &ConstraintSet,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<KktSolution> {
    let tau = joint_torques(model, u)?;
    let z = DVector::zeros(model.nv);
    let cache = forward_kinematics(model, q, v, &z)?;
    let bias = rnea_from_cache(model, &cache, None);
    let mass = joint_space_inertia_from_cache(model, &cache);
    let (j, drift) = constraints.stack(model, &cache)?;
    let factor = KktFactor::new(mass, j)?;
    let c1 = DMatrix::from_column_slice(drift.len(), 1, (-&drift).as_slice());
    let c2 = DMatrix::from_column_slice(model.nv, 1, (&tau - &bias).as_slice());
    let (lambda, qdd) = factor.solve(&c1, &c2)?;
    Ok(KktSolution {
        q: q.clone(),
        v: v.clone(),
        u: u.clone(),
        tau,
        qdd: qdd.column(0).into_owned(),
        lambda: lambda.column(0).into_owned(),
        drift,
        bias,
        factor,
        model_hash: model.hash.clone(),
        constraints: constraints.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct DynDerivatives {
    pub dqdd_dq: DMatrix<f64>,
    pub dqdd_dv: DMatrix<f64>,
    pub dqdd_du: DMatrix<f64>,
    pub dlambda_dq: DMatrix<f64>,
    pub dlambda_dv: DMatrix<f64>,
    pub dlambda_du: DMatrix<f64>,
}

/// Derivative of the constraint velocity `ν_c` with respect to tangent
/// perturbations of q (6×nv). Only needed for the Baumgarte term.
fn velocity_dq(model: &Model, cache: &KinematicsCache, c: &ClosureConstraint) -> DMatrix<f64> {
    let x1 = c.placement1(cache);
    let (b1, b2) = (c.frame1.body, c.frame2.body);
    let d1 = body_motion_derivatives(model, cache, b1);
    let d2 = body_motion_derivatives(model, cache, b2);
    let rel = cache.body_velocity(b1) - cache.body_velocity(b2);
    let mut on1 = vec![false; model.nv];
    if let Some(b) = b1 {
        for j in model.support_path(b) {
            let joint = &model.joints[j];
            on1[joint.idx_v..joint.idx_v + joint.nv()].iter_mut().for_each(|x| *x = true);
        }
    }
    let mut out = DMatrix::zeros(6, model.nv);
    for col in 0..model.nv {
        let mut w = d1.dvel_dq[col] - d2.dvel_dq[col];
        if on1[col] {
            w -= cache.columns[col].cross(&rel);
        }
        out.column_mut(col).copy_from(&x1.inv_act_motion(&w).to_vector());
    }
    out
}

/// Analytical derivatives of the KKT solution with respect to tangent
/// perturbations of q, to v and to u.
pub fn constrained_dynamics_derivatives(
    model: &Model,
    constraints: &ConstraintSet,
    sol: &KktSolution,
) -> Result<DynDerivatives> {
    if sol.model_hash != model.hash {
        return Err(Error::StaleSolution(format!(
            "solution was computed for model {} but derivatives requested for {}",
            sol.model_hash, model.hash
        )));
    }
    if &sol.constraints != constraints {
        return Err(Error::StaleSolution("constraint set differs from the one used to solve".into()));
    }
    let nv = model.nv;
    let m = constraints.dim();
    let cache = forward_kinematics(model, &sol.q, &sol.v, &sol.qdd)?;
    let rd = rnea_derivatives_from_cache(model, &cache, None);
    let mut did_dq = rd.dtau_dq;
    let did_dv = rd.dtau_dv;
    let mut dac_dq = DMatrix::zeros(m, nv);
    let mut dac_dv = DMatrix::zeros(m, nv);
    for (k, c) in constraints.constraints.iter().enumerate() {
        let (mut dq, mut dv) = acc_derivatives_with(model, &cache, c, constraints.signs);
        if let Some(alpha) = constraints.baumgarte {
            let jc = crate::closure::constraint_jacobian(model, &cache, c);
            let dr = residual_jacobian(model, &cache, c)?;
            dq += velocity_dq(model, &cache, c) * (2.0 * alpha) - dr * (alpha * alpha);
            dv += jc * (2.0 * alpha);
        }
        dac_dq.view_mut((6 * k, 0), (6, nv)).copy_from(&dq);
        dac_dv.view_mut((6 * k, 0), (6, nv)).copy_from(&dv);
        did_dq += id_force_derivative(model, &cache, c, &sol.force(k));
    }
    let (dl_dq, dqdd_dq) = sol.factor.solve(&(-dac_dq), &(-did_dq))?;
    let (dl_dv, dqdd_dv) = sol.factor.solve(&(-dac_dv), &(-did_dv))?;
    let s = actuation_matrix(model);
    let (dl_du, dqdd_du) = sol.factor.solve(&DMatrix::zeros(m, model.nu()), &s)?;
    Ok(DynDerivatives {
        dqdd_dq,
        dqdd_dv,
        dqdd_du,
        dlambda_dq: dl_dq,
        dlambda_dv: dl_dv,
        dlambda_du: dl_du,
    })
}

/// Gauss-Newton projection of `q_guess` onto the constraint manifold.
pub fn project_to_manifold(model: &Model, constraints: &ConstraintSet, q_guess: &DVector<f64>) -> Result<DVector<f64>> {
    project_with_fixed(model, constraints, q_guess, &[])
}

/// Projection that leaves the listed tangent coordinates untouched.
pub fn project_with_fixed(
    model: &Model,
    constraints: &ConstraintSet,
    q_guess: &DVector<f64>,
    fixed: &[usize],
) -> Result<DVector<f64>> {
    model.check_configuration(q_guess)?;
    let z = DVector::zeros(model.nv);
    let eval = |q: &DVector<f64>| -> Option<(DVector<f64>, KinematicsCache)> {
        let cache = forward_kinematics(model, q, &z, &z).ok()?;
        let r = constraints.residuals(&cache).ok()?;
        Some((r, cache))
    };
    let mut q = q_guess.clone();
    let Some((mut r, mut cache)) = eval(&q) else {
        return Err(Error::ProjectionFailed { iterations: 0, residual: f64::INFINITY });
    };
    let free: Vec<usize> = (0..model.nv).filter(|i| !fixed.contains(i)).collect();
    for it in 0..PROJECTION_ITERATIONS {
        if r.amax() < PROJECTION_TOLERANCE {
            return Ok(q);
        }
        let mut jr = DMatrix::zeros(constraints.dim(), free.len());
        for (k, c) in constraints.constraints.iter().enumerate() {
            let jk = residual_jacobian(model, &cache, c)?;
            for (col, &iv) in free.iter().enumerate() {
                jr.view_mut((6 * k, col), (6, 1)).copy_from(&jk.column(iv));
            }
        }
        let svd = jr.svd(true, true);
        let tol = 1e-12 * svd.singular_values.max().max(1e-300);
        let step = svd.solve(&(-&r), tol).map_err(|_| Error::ProjectionFailed { iterations: it, residual: r.amax() })?;
        let mut dq = DVector::zeros(model.nv);
        for (col, &iv) in free.iter().enumerate() {
            dq[iv] = step[col];
        }
        // backtracking on the residual norm
        let mut t = 1.0;
        let norm0 = r.norm();
        let mut accepted = false;
        while t > 1e-4 {
            let qt = model.integrate(&q, &(&dq * t));
            if let Some((rt, ct)) = eval(&qt) {
                if rt.norm() < norm0 {
                    q = qt;
                    r = rt;
                    cache = ct;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::ProjectionFailed { iterations: it + 1, residual: r.amax() });
        }
    }
    if r.amax() < PROJECTION_TOLERANCE {
        Ok(q)
    } else {
        Err(Error::ProjectionFailed { iterations: PROJECTION_ITERATIONS, residual: r.amax() })
    }
}

/// Semi-implicit Euler step of the constrained dynamics.
pub fn step(model: &Model, constraints: &ConstraintSet, state: &MechState, u: &DVector<f64>, dt: f64) -> Result<MechState> {
    let sol = constrained_forward_dynamics(model, constraints, &state.q, &state.v, u)?;
    Ok(step_with(model, state, &sol.qdd, dt))
}

pub fn step_with(model: &Model, state: &MechState, qdd: &DVector<f64>, dt: f64) -> MechState {
    let v = &state.v + qdd * dt;
    let q = model.integrate(&state.q, &(&v * dt));
    MechState::new(q, v)
}

/// Total mechanical energy (kinetic plus gravitational).
pub fn mechanical_energy(model: &Model, state: &MechState) -> Result<f64> {
    Ok(crate::rba::kinetic_energy(model, &state.q, &state.v)? + crate::rba::potential_energy(model, &state.q)?)
}

/// Constraint velocities stacked in F1 coordinates.
pub fn constraint_velocities(model: &Model, constraints: &ConstraintSet, state: &MechState) -> Result<DVector<f64>> {
    let z = DVector::zeros(model.nv);
    let cache = forward_kinematics(model, &state.q, &state.v, &z)?;
    let mut out = DVector::zeros(constraints.dim());
    for (k, c) in constraints.constraints.iter().enumerate() {
        out.rows_mut(6 * k, 6).copy_from(&constraint_velocity(&cache, c).to_vector());
    }
    Ok(out)
}

/// Total external wrench exerted on the robot by the world through the
/// contacts of `constraints` (force, moment about the world origin).
pub fn contact_wrench(sol: &KktSolution, model: &Model) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let z = DVector::zeros(model.nv);
    let cache = forward_kinematics(model, &sol.q, &z, &z)?;
    let mut f = Vector3::zeros();
    let mut n = Vector3::zeros();
    for (k, c) in sol.constraints.constraints.iter().enumerate() {
        if c.frame2.body.is_none() {
            // λ acts on b1 with the ID sign convention, so the world pushes back with −λ
            let of = crate::closure::world_force(&cache, c, &sol.force(k));
            f -= of.linear;
            n -= of.angular;
        }
    }
    Ok((f, n))
}

/// Minimum-norm controls holding `q` at rest: `S u − g(q) ∈ range(J_cᵀ)`.
/// When no static solution exists (a floating base without support), the
/// controls instead minimize the accelerations of the 1-dof joints, which
/// for a free-falling mechanism keeps its shape.
pub fn quasi_static_controls(model: &Model, constraints: &ConstraintSet, q: &DVector<f64>) -> Result<DVector<f64>> {
    let z = DVector::zeros(model.nv);
    let cache = forward_kinematics(model, q, &z, &z)?;
    let g = rnea_from_cache(model, &cache, None);
    let s = actuation_matrix(model);
    let p = if constraints.is_empty() {
        DMatrix::identity(model.nv, model.nv)
    } else {
        let (j, _) = constraints.stack(model, &cache)?;
        let jt = j.transpose();
        let pinv = jt.clone().pseudo_inverse(1e-10).map_err(|e| Error::InvalidModel(e.to_string()))?;
        DMatrix::identity(model.nv, model.nv) - &jt * pinv
    };
    let ps = &p * &s;
    let pinv = ps.clone().pseudo_inverse(1e-10).map_err(|e| Error::InvalidModel(e.to_string()))?;
    let u = pinv * (&p * &g);
    let residual = (&ps * &u - &p * &g).amax();
    if residual <= 1e-8 * g.amax().max(1.0) {
        return Ok(u);
    }
    min_acceleration_controls(model, constraints, q)
}

fn min_acceleration_controls(model: &Model, constraints: &ConstraintSet, q: &DVector<f64>) -> Result<DVector<f64>> {
    let z = DVector::zeros(model.nv);
    let nu = model.nu();
    let rows: Vec<usize> = model.joints.iter().filter(|j| j.nv() == 1).map(|j| j.idx_v).collect();
    let a0 = constrained_forward_dynamics(model, constraints, q, &z, &DVector::zeros(nu))?.qdd;
    let mut b = DMatrix::zeros(rows.len(), nu);
    for i in 0..nu {
        let mut e = DVector::zeros(nu);
        e[i] = 1.0;
        let a = constrained_forward_dynamics(model, constraints, q, &z, &e)?.qdd;
        for (r, &iv) in rows.iter().enumerate() {
            b[(r, i)] = a[iv] - a0[iv];
        }
    }
    let rhs = -DVector::from_iterator(rows.len(), rows.iter().map(|&iv| a0[iv]));
    let pinv = b.pseudo_inverse(1e-10).map_err(|e| Error::InvalidModel(e.to_string()))?;
    Ok(pinv * rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_model;

    #[test]
    fn hanging_pendulum_is_at_equilibrium() {
        let m = load_model("pendulum").unwrap();
        let z = DVector::zeros(1);
        let sol = constrained_forward_dynamics(&m, &ConstraintSet::new(vec![]), &z, &z, &z).unwrap();
        assert!(sol.qdd.amax() < 1e-14);
    }

    #[test]
    fn stale_solution_is_rejected() {
        let m = load_model("fourbar").unwrap();
        let cs = ConstraintSet::closures(&m);
        let q = m.reference_configuration();
        let z = DVector::zeros(m.nv);
        let sol = constrained_forward_dynamics(&m, &cs, &q, &z, &DVector::zeros(m.nu())).unwrap();
        let other = ConstraintSet::new(vec![]);
        assert!(matches!(constrained_dynamics_derivatives(&m, &other, &sol), Err(Error::StaleSolution(_))));
    }
}
