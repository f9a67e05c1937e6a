//! Multiple-shooting trajectory optimization over constrained-dynamics stages.

pub mod costs;
pub mod solver;
pub mod tasks;

use nalgebra::{DMatrix, DVector};

use crate::condyn::{
    constrained_dynamics_derivatives, constrained_forward_dynamics, step_with, ConstraintSet, KktSolution,
};
use crate::error::{Error, Result};
use crate::model::{MechState, Model};
use crate::rba::{forward_kinematics, KinematicsCache};

pub use costs::{CostTerm, Residual};
pub use solver::{solve, PhaseTiming, SolveReport, SolverSettings};
pub use tasks::{build_task, TaskConfig, TaskKind};

#[derive(Clone, Debug)]
pub struct Stage {
    pub dt: f64,
    pub constraints: ConstraintSet,
    pub costs: Vec<CostTerm>,
    /// Contact phase label, for reports.
    pub phase: String,
}

#[derive(Clone, Debug)]
pub struct ShootingProblem {
    pub model: Model,
    pub x0: MechState,
    pub stages: Vec<Stage>,
    pub terminal: Vec<CostTerm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub xs: Vec<MechState>,
    pub us: Vec<DVector<f64>>,
    pub lambdas: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.us.len()
    }

    /// Node times for the given stages.
    pub fn times(&self, problem: &ShootingProblem) -> Vec<f64> {
        let mut t = vec![0.0];
        for s in &problem.stages {
            t.push(t.last().unwrap() + s.dt);
        }
        t
    }
}

impl ShootingProblem {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.check_state(&self.x0)?;
        for (k, s) in self.stages.iter().enumerate() {
            if !(s.dt > 0.0) {
                return Err(Error::InvalidTask(format!("stage {k} has non-positive dt")));
            }
            for c in &s.costs {
                if !(c.weight >= 0.0) {
                    return Err(Error::InvalidTask(format!("cost `{}` at stage {k} has negative weight", c.name)));
                }
            }
        }
        for c in &self.terminal {
            if c.residual.needs_control() {
                return Err(Error::InvalidTask(format!("terminal cost `{}` needs a control", c.name)));
            }
        }
        Ok(())
    }

    /// One stage transition and its running cost.
    pub fn stage_calc(&self, k: usize, x: &MechState, u: &DVector<f64>) -> Result<StageData> {
        let stage = &self.stages[k];
        let sol = constrained_forward_dynamics(&self.model, &stage.constraints, &x.q, &x.v, u)?;
        let next = step_with(&self.model, x, &sol.qdd, stage.dt);
        let z = DVector::zeros(self.model.nv);
        let cache = forward_kinematics(&self.model, &x.q, &x.v, &z)?;
        let ctx = costs::NodeContext {
            model: &self.model,
            q: &x.q,
            v: &x.v,
            u: Some(u),
            cache: &cache,
            sol: Some(&sol),
            derivatives: None,
        };
        let cost = costs::cost_value(&stage.costs, &ctx)?;
        Ok(StageData { sol, next, cost, cache })
    }

    pub fn terminal_cost(&self, x: &MechState) -> Result<f64> {
        let z = DVector::zeros(self.model.nv);
        let cache = forward_kinematics(&self.model, &x.q, &x.v, &z)?;
        let ctx = costs::NodeContext {
            model: &self.model,
            q: &x.q,
            v: &x.v,
            u: None,
            cache: &cache,
            sol: None,
            derivatives: None,
        };
        costs::cost_value(&self.terminal, &ctx)
    }

    /// Linearized dynamics and quadratic cost model of stage `k`.
    pub fn stage_diff(&self, k: usize, x: &MechState, data: &StageData) -> Result<StageDerivatives> {
        let model = &self.model;
        let stage = &self.stages[k];
        let nv = model.nv;
        let nu = model.nu();
        let dt = stage.dt;
        let d = constrained_dynamics_derivatives(model, &stage.constraints, &data.sol)?;
        let (jq, jd) = model.integrate_jacobians(&x.q, &(&data.next.v * dt));
        let mut fx = DMatrix::zeros(2 * nv, 2 * nv);
        let mut fu = DMatrix::zeros(2 * nv, nu);
        let dv_dq = &d.dqdd_dq * dt;
        let dv_dv = DMatrix::identity(nv, nv) + &d.dqdd_dv * dt;
        let dv_du = &d.dqdd_du * dt;
        let jdt = &jd * dt;
        fx.view_mut((0, 0), (nv, nv)).copy_from(&(&jq + &jdt * &dv_dq));
        fx.view_mut((0, nv), (nv, nv)).copy_from(&(&jdt * &dv_dv));
        fx.view_mut((nv, 0), (nv, nv)).copy_from(&dv_dq);
        fx.view_mut((nv, nv), (nv, nv)).copy_from(&dv_dv);
        fu.view_mut((0, 0), (nv, nu)).copy_from(&(&jdt * &dv_du));
        fu.view_mut((nv, 0), (nv, nu)).copy_from(&dv_du);
        let ctx = costs::NodeContext {
            model,
            q: &x.q,
            v: &x.v,
            u: Some(&data.sol.u),
            cache: &data.cache,
            sol: Some(&data.sol),
            derivatives: Some(&d),
        };
        let cost = costs::cost_model(&stage.costs, &ctx)?;
        Ok(StageDerivatives { fx, fu, cost })
    }

    pub fn terminal_diff(&self, x: &MechState) -> Result<costs::CostModel> {
        let z = DVector::zeros(self.model.nv);
        let cache = forward_kinematics(&self.model, &x.q, &x.v, &z)?;
        let ctx = costs::NodeContext {
            model: &self.model,
            q: &x.q,
            v: &x.v,
            u: None,
            cache: &cache,
            sol: None,
            derivatives: None,
        };
        costs::cost_model(&self.terminal, &ctx)
    }

    /// Total cost of a state/control sequence (no dynamics check).
    pub fn total_cost(&self, traj: &Trajectory) -> Result<f64> {
        let mut c = 0.0;
        for k in 0..self.horizon() {
            c += self.stage_calc(k, &traj.xs[k], &traj.us[k])?.cost;
        }
        Ok(c + self.terminal_cost(&traj.xs[self.horizon()])?)
    }

    /// Controls holding the reference posture: the minimum-norm static
    /// solution of each stage at `x0`.
    pub fn quasi_static_controls(&self) -> Result<Vec<DVector<f64>>> {
        let mut out = Vec::with_capacity(self.horizon());
        let mut cache: Option<(String, DVector<f64>)> = None;
        for s in &self.stages {
            let key = format!("{:?}", s.constraints);
            if let Some((k, u)) = &cache {
                if *k == key {
                    out.push(u.clone());
                    continue;
                }
            }
            let u = crate::condyn::quasi_static_controls(&self.model, &s.constraints, &self.x0.q)?;
            cache = Some((key, u.clone()));
            out.push(u);
        }
        Ok(out)
    }
}

/// Rollout intermediate of one stage.
#[derive(Clone, Debug)]
pub struct StageData {
    pub sol: KktSolution,
    pub next: MechState,
    pub cost: f64,
    /// Kinematics at `(q, v, 0)`.
    pub cache: KinematicsCache,
}

#[derive(Clone, Debug)]
pub struct StageDerivatives {
    pub fx: DMatrix<f64>,
    pub fu: DMatrix<f64>,
    pub cost: costs::CostModel,
}

/// Tangent difference `b ⊖ a` of two states.
pub fn state_difference(model: &Model, a: &MechState, b: &MechState) -> Result<DVector<f64>> {
    let dq = model.difference(&a.q, &b.q)?;
    Ok(DVector::from_iterator(2 * model.nv, dq.iter().chain((&b.v - &a.v).iter()).cloned()))
}

/// `x ⊕ dx`.
pub fn state_integrate(model: &Model, x: &MechState, dx: &DVector<f64>) -> MechState {
    let nv = model.nv;
    MechState::new(model.integrate(&x.q, &dx.rows(0, nv).into_owned()), &x.v + dx.rows(nv, nv))
}

/// Forward integration of `controls` from `x0`, recording constraint forces.
pub fn rollout(problem: &ShootingProblem, controls: &[DVector<f64>]) -> Result<Trajectory> {
    if controls.len() != problem.horizon() {
        return Err(Error::Dimension { what: "controls", expected: problem.horizon(), got: controls.len() });
    }
    let mut xs = vec![problem.x0.clone()];
    let mut lambdas = Vec::with_capacity(controls.len());
    for (k, u) in controls.iter().enumerate() {
        let s = &problem.stages[k];
        let x = xs.last().unwrap();
        let sol = constrained_forward_dynamics(&problem.model, &s.constraints, &x.q, &x.v, u)?;
        let next = step_with(&problem.model, x, &sol.qdd, s.dt);
        lambdas.push(sol.lambda.clone());
        xs.push(next);
    }
    Ok(Trajectory { xs, us: controls.to_vec(), lambdas })
}
