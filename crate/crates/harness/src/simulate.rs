//! Passive or constant-control simulation with closure and energy bookkeeping.

use kinloop::condyn::{constrained_forward_dynamics, mechanical_energy, project_to_manifold, step_with, ConstraintSet};
use kinloop::ocp::Trajectory;
use kinloop::{MechState, Model, Result};
use nalgebra::DVector;

#[derive(Clone, Debug)]
pub struct Simulation {
    pub times: Vec<f64>,
    pub trajectory: Trajectory,
    /// Largest closure residual (∞-norm of the stacked `Log(¹M₂)`) per node.
    pub residuals: Vec<f64>,
    pub energies: Vec<f64>,
}

impl Simulation {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest deviation of the mechanical energy from its initial value.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.energies.first().copied().unwrap_or(0.0);
        self.energies.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max)
    }
}

/// Initial state on the loops: the reference configuration projected, at rest.
pub fn rest_state(model: &Model) -> Result<MechState> {
    let q0 = model.reference_configuration();
    let q = if model.closures.is_empty() { q0 } else { project_to_manifold(model, &ConstraintSet::closures(model), &q0)? };
    Ok(MechState::at_rest(q, model.nv))
}

/// Integrate `steps` steps of `dt` under constant controls `u`.
pub fn simulate(
    model: &Model,
    constraints: &ConstraintSet,
    x0: &MechState,
    u: &DVector<f64>,
    dt: f64,
    steps: usize,
) -> Result<Simulation> {
    model.check_state(x0)?;
    let residual = |x: &MechState| constraints.max_residual(model, &x.q);
    let mut xs = vec![x0.clone()];
    let mut lambdas = Vec::with_capacity(steps);
    let mut residuals = vec![residual(x0)?];
    let mut energies = vec![mechanical_energy(model, x0)?];
    for _ in 0..steps {
        let x = xs.last().expect("non-empty");
        let sol = constrained_forward_dynamics(model, constraints, &x.q, &x.v, u)?;
        let next = step_with(model, x, &sol.qdd, dt);
        residuals.push(residual(&next)?);
        energies.push(mechanical_energy(model, &next)?);
        lambdas.push(sol.lambda);
        xs.push(next);
    }
    let times = (0..=steps).map(|k| k as f64 * dt).collect();
    let us = vec![u.clone(); steps];
    Ok(Simulation { times, trajectory: Trajectory { xs, us, lambdas }, residuals, energies })
}
