//! Lifting a serial-approximation trajectory onto the closed-kinematics model
//! by solving one single-stage tracking problem per step.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::condyn::{constrained_forward_dynamics, project_with_fixed, ConstraintSet};
use crate::error::{Error, Result};
use crate::model::{MechState, Model, SerialProjection};
use crate::ocp::costs::{CostTerm, Residual};
use crate::ocp::{solve, ShootingProblem, SolverSettings, Stage, Trajectory};
use crate::rba::forward_kinematics;

pub const DEFAULT_LIFT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SerialTrajectory {
    pub xs: Vec<MechState>,
    pub us: Vec<DVector<f64>>,
}

impl SerialTrajectory {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        Self { xs: t.xs.clone(), us: t.us.clone() }
    }

    /// Serial coordinates of a closed-model trajectory.
    pub fn project(closed: &Trajectory, projection: &SerialProjection) -> Self {
        Self {
            xs: closed
                .xs
                .iter()
                .map(|x| MechState::new(projection.project_q(&x.q), projection.project_v(&x.v)))
                .collect(),
            us: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LiftSettings {
    pub tolerance: f64,
    pub tracking_weight: f64,
    pub control_weight: f64,
    pub solver: SolverSettings,
}

impl Default for LiftSettings {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_LIFT_TOLERANCE,
            tracking_weight: 1e4,
            control_weight: 1e-6,
            solver: SolverSettings { max_iterations: 50, tolerance: 1e-16, ..SolverSettings::default() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct LiftReport {
    /// Tangent-norm configuration tracking error after each step.
    pub tracking_errors: Vec<f64>,
    /// Velocity tracking error after each step.
    pub velocity_errors: Vec<f64>,
    /// Lifted controls of the closed model.
    pub controls: Vec<DVector<f64>>,
    pub success: bool,
    pub failure_step: Option<usize>,
    pub message: String,
}

impl LiftReport {
    pub fn max_error(&self) -> f64 {
        self.tracking_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Closed-model configuration matching the serial configuration `qs`: the
/// serial coordinates are held and the linkage coordinates start from
/// `linkage_guess` (or the reference configuration).
pub fn initial_closed_state(
    closed: &Model,
    projection: &SerialProjection,
    xs0: &MechState,
    linkage_guess: Option<&DVector<f64>>,
) -> Result<MechState> {
    let mut q = linkage_guess.cloned().unwrap_or_else(|| closed.reference_configuration());
    projection.embed_q(&xs0.q, &mut q);
    let loops = ConstraintSet::closures(closed);
    let q = project_with_fixed(closed, &loops, &q, &projection.v_indices)?;
    // linkage velocities from J_l v_l = −J_s v_s
    let z = DVector::zeros(closed.nv);
    let cache = forward_kinematics(closed, &q, &z, &z)?;
    let (j, _) = loops.stack(closed, &cache)?;
    let mut v = DVector::zeros(closed.nv);
    projection.embed_v(&xs0.v, &mut v);
    let free: Vec<usize> = (0..closed.nv).filter(|i| !projection.v_indices.contains(i)).collect();
    if !free.is_empty() && j.nrows() > 0 {
        let jl = DMatrix::from_fn(j.nrows(), free.len(), |r, c| j[(r, free[c])]);
        let rhs = -(&j * &v);
        let vl = jl
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::InvalidModel(e.to_string()))?
            * rhs;
        for (c, &i) in free.iter().enumerate() {
            v[i] = vl[c];
        }
    }
    Ok(MechState::new(q, v))
}

/// Lift `serial` onto the closed model. `stages[k]` provides the step
/// duration and the closed-model constraint set of step `k`.
pub fn lift_trajectory(
    closed: &Model,
    serial: &Model,
    stages: &[(f64, ConstraintSet)],
    traj: &SerialTrajectory,
    x_c0: &MechState,
    settings: &LiftSettings,
) -> Result<(Trajectory, LiftReport)> {
    let projection = SerialProjection::new(closed, serial)?;
    if traj.xs.len() != stages.len() + 1 {
        return Err(Error::Dimension { what: "serial states", expected: stages.len() + 1, got: traj.xs.len() });
    }
    for x in &traj.xs {
        serial.check_state(x)?;
    }
    closed.check_state(x_c0)?;
    let mut report = LiftReport {
        tracking_errors: Vec::new(),
        velocity_errors: Vec::new(),
        controls: Vec::new(),
        success: true,
        failure_step: None,
        message: String::new(),
    };
    let mut xs = vec![x_c0.clone()];
    let mut lambdas = Vec::new();
    let mut u_prev: Option<DVector<f64>> = None;
    for (k, (dt, cs)) in stages.iter().enumerate() {
        let x = xs[k].clone();
        let target = &traj.xs[k + 1];
        let problem = ShootingProblem {
            model: closed.clone(),
            x0: x.clone(),
            stages: vec![Stage {
                dt: *dt,
                constraints: cs.clone(),
                costs: vec![CostTerm::new(
                    "control-reg",
                    settings.control_weight,
                    Residual::Control { u_ref: DVector::zeros(closed.nu()) },
                )],
                phase: "lift".into(),
            }],
            terminal: vec![CostTerm::new(
                "serial-tracking",
                settings.tracking_weight,
                Residual::SerialTracking {
                    serial: Box::new(serial.clone()),
                    projection: projection.clone(),
                    q_ref: target.q.clone(),
                    v_ref: target.v.clone(),
                },
            )],
        };
        let guess = match &u_prev {
            Some(u) => vec![u.clone()],
            None => problem.quasi_static_controls()?,
        };
        let outcome = solve(&problem, &[], &guess, &settings.solver);
        let (step, solve_msg) = match outcome {
            Ok((t, r)) => (Some(t), r.message),
            Err(e) => (None, e.to_string()),
        };
        let Some(step) = step.filter(|t| t.xs[1].q.iter().all(|v| v.is_finite())) else {
            report.success = false;
            report.failure_step = Some(k);
            report.message = format!("step {k}: {solve_msg}");
            break;
        };
        let next = step.xs[1].clone();
        let qs = projection.project_q(&next.q);
        let eq = serial.difference(&target.q, &qs)?.norm();
        let ev = (projection.project_v(&next.v) - &target.v).norm();
        report.tracking_errors.push(eq);
        report.velocity_errors.push(ev);
        report.controls.push(step.us[0].clone());
        lambdas.push(step.lambdas[0].clone());
        u_prev = Some(step.us[0].clone());
        xs.push(next);
        if !(eq < settings.tolerance) {
            report.success = false;
            report.failure_step = Some(k);
            report.message = format!("step {k}: tracking error {eq:.3e} exceeds {:.1e}", settings.tolerance);
            break;
        }
    }
    if report.success {
        report.message = "lifted".into();
    }
    let us = report.controls.clone();
    Ok((Trajectory { xs, us, lambdas }, report))
}

/// Frozen linkage angles taken from a closed configuration, keyed by joint name.
pub fn frozen_linkage_angles(closed: &Model, q: &DVector<f64>) -> Result<BTreeMap<String, f64>> {
    let chain = closed.serial.as_ref().ok_or(Error::NoSerialChain)?;
    let mut out = BTreeMap::new();
    for name in &chain.linkage {
        let j = &closed.joints[closed.joint_index(name)?];
        out.insert(name.clone(), q[j.idx_q]);
    }
    Ok(out)
}

/// Static closed-model controls holding `q` at rest under `cs`.
pub fn static_controls(closed: &Model, cs: &ConstraintSet, q: &DVector<f64>) -> Result<DVector<f64>> {
    let u = crate::condyn::quasi_static_controls(closed, cs, q)?;
    let sol = constrained_forward_dynamics(closed, cs, q, &DVector::zeros(closed.nv), &u)?;
    if sol.qdd.amax() > 1e-6 {
        return Err(Error::InvalidTask(format!("no static solution (|q̈| = {:.2e})", sol.qdd.amax())));
    }
    Ok(u)
}
