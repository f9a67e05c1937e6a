//! Closed-versus-serial comparison: solve both OCPs, lift the serial solution
//! and compare the knee-motor controls.

use kinloop::condyn::ConstraintSet;
use kinloop::lift::{frozen_linkage_angles, initial_closed_state, lift_trajectory, LiftReport, LiftSettings, SerialTrajectory};
use kinloop::model::{build_serial_approximation, Model, SerialProjection};
use kinloop::ocp::{build_task, solve, ShootingProblem, SolveReport, SolverSettings, TaskConfig, Trajectory};
use kinloop::rba::{center_of_mass, forward_kinematics};
use kinloop::{Error, Result};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

/// Label naming the knee actuators of a model.
pub const KNEE_LABEL: &str = "knee_drive";

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SweepRecord {
    pub value: f64,
    pub closed_converged: bool,
    pub closed_iterations: usize,
    pub closed_knee_max: f64,
    pub closed_knee_mean: f64,
    pub closed_com_mean: f64,
    pub serial_converged: bool,
    pub serial_com_mean: f64,
    pub lift_success: bool,
    pub lift_failure_step: Option<usize>,
    pub lift_max_error: f64,
    pub lifted_knee_max: f64,
    pub lifted_knee_mean: f64,
}

pub struct TaskRun {
    pub problem: ShootingProblem,
    pub trajectory: Trajectory,
    pub report: SolveReport,
}

pub fn run_task(model: &Model, config: &TaskConfig, settings: &SolverSettings) -> Result<TaskRun> {
    run_task_from(model, config, settings, None)
}

/// Like `run_task`, warm-started from `guess` when given.
pub fn run_task_from(
    model: &Model,
    config: &TaskConfig,
    settings: &SolverSettings,
    guess: Option<&Trajectory>,
) -> Result<TaskRun> {
    let problem = build_task(model, config)?;
    let (xs, us) = match guess {
        Some(t) if t.horizon() == problem.horizon() => (t.xs.as_slice(), t.us.as_slice()),
        _ => (&[][..], &[][..]),
    };
    let (trajectory, report) = solve(&problem, xs, us, settings)?;
    Ok(TaskRun { problem, trajectory, report })
}

/// Control indices of the actuators listed under `label`.
pub fn control_indices(model: &Model, label: &str) -> Result<Vec<usize>> {
    model
        .label(label)?
        .iter()
        .map(|name| {
            let j = &model.joints[model.joint_index(name)?];
            model
                .control_index(j.idx_v)
                .ok_or_else(|| Error::InvalidModel(format!("joint `{name}` is not actuated")))
        })
        .collect()
}

/// Max and mean absolute value of the selected controls.
pub fn control_stats(us: &[DVector<f64>], idx: &[usize]) -> (f64, f64) {
    let vals: Vec<f64> = us.iter().flat_map(|u| idx.iter().map(move |&i| u[i].abs())).collect();
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let max = vals.iter().cloned().fold(0.0, f64::max);
    (max, vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn com_mean(model: &Model, traj: &Trajectory) -> Result<f64> {
    let z = DVector::zeros(model.nv);
    let mut s = 0.0;
    for x in &traj.xs {
        let c = forward_kinematics(model, &x.q, &x.v, &z)?;
        s += center_of_mass(model, &c).z;
    }
    Ok(s / traj.xs.len().max(1) as f64)
}

pub struct Comparison {
    pub record: SweepRecord,
    pub closed: TaskRun,
    pub serial: TaskRun,
    pub lifted: Trajectory,
    pub lift: LiftReport,
}

/// Stage durations and constraint sets of a closed problem, as the lift needs them.
pub fn lift_stages(problem: &ShootingProblem) -> Vec<(f64, ConstraintSet)> {
    problem.stages.iter().map(|s| (s.dt, s.constraints.clone())).collect()
}

pub fn compare_serial(
    closed: &Model,
    config: &TaskConfig,
    value: f64,
    settings: &SolverSettings,
    lift_settings: &LiftSettings,
) -> Result<Comparison> {
    compare_serial_from(closed, config, value, settings, lift_settings, None)
}

/// Like `compare_serial`, warm-starting both OCPs from an earlier comparison.
pub fn compare_serial_from(
    closed: &Model,
    config: &TaskConfig,
    value: f64,
    settings: &SolverSettings,
    lift_settings: &LiftSettings,
    previous: Option<&Comparison>,
) -> Result<Comparison> {
    let closed_run = run_task_from(closed, config, settings, previous.map(|p| &p.closed.trajectory))?;
    let frozen = frozen_linkage_angles(closed, &closed_run.problem.x0.q)?;
    let serial = build_serial_approximation(closed, &frozen)?;
    let serial_run = run_task_from(&serial, config, settings, previous.map(|p| &p.serial.trajectory))?;
    let projection = SerialProjection::new(closed, &serial)?;
    let serial_traj = SerialTrajectory::from_trajectory(&serial_run.trajectory);
    let x_c0 = initial_closed_state(closed, &projection, &serial_traj.xs[0], Some(&closed_run.problem.x0.q))?;
    let stages = lift_stages(&closed_run.problem);
    let (lifted, lift) = lift_trajectory(closed, &serial, &stages, &serial_traj, &x_c0, lift_settings)?;

    let knee = control_indices(closed, KNEE_LABEL)?;
    let (ck_max, ck_mean) = control_stats(&closed_run.trajectory.us, &knee);
    let (lk_max, lk_mean) = control_stats(&lift.controls, &knee);
    let record = SweepRecord {
        value,
        closed_converged: closed_run.report.converged,
        closed_iterations: closed_run.report.iterations,
        closed_knee_max: ck_max,
        closed_knee_mean: ck_mean,
        closed_com_mean: com_mean(closed, &closed_run.trajectory)?,
        serial_converged: serial_run.report.converged,
        serial_com_mean: com_mean(&serial, &serial_run.trajectory)?,
        lift_success: lift.success,
        lift_failure_step: lift.failure_step,
        lift_max_error: lift.max_error(),
        lifted_knee_max: lk_max,
        lifted_knee_mean: lk_mean,
    };
    Ok(Comparison { record, closed: closed_run, serial: serial_run, lifted, lift })
}

/// Set a sweep variable (`squat.relative_elevation`, `walk.velocity`,
/// `walk.step_height`, `dt`) of a config.
pub fn with_value(config: &TaskConfig, variable: &str, value: f64) -> Result<TaskConfig> {
    let mut c = config.clone();
    let missing = || Error::InvalidTask(format!("sweep variable `{variable}` needs its section in the task config"));
    match variable {
        "squat.relative_elevation" => c.squat.as_mut().ok_or_else(missing)?.relative_elevation = value,
        "walk.velocity" => c.walk.as_mut().ok_or_else(missing)?.velocity = value,
        "walk.step_height" => c.walk.as_mut().ok_or_else(missing)?.step_height = Some(value),
        "dt" => c.dt = value,
        _ => return Err(Error::InvalidTask(format!("unknown sweep variable `{variable}`"))),
    }
    Ok(c)
}

/// Run `compare_serial` over sweep values; records come back in the order of
/// `values`. Without continuation the points are independent and run in
/// parallel; with it they run in order, each warm-started from the last
/// point whose OCPs both converged.
pub fn sweep_compare(
    closed: &Model,
    config: &TaskConfig,
    variable: &str,
    values: &[f64],
    settings: &SolverSettings,
    lift_settings: &LiftSettings,
    continuation: bool,
) -> Result<Vec<SweepRecord>> {
    if values.is_empty() {
        return Err(Error::InvalidTask("empty sweep range".into()));
    }
    if !continuation {
        return values
            .par_iter()
            .map(|&v| {
                let c = with_value(config, variable, v)?;
                Ok(compare_serial(closed, &c, v, settings, lift_settings)?.record)
            })
            .collect();
    }
    let mut out = Vec::with_capacity(values.len());
    let mut previous: Option<Comparison> = None;
    for &v in values {
        let c = with_value(config, variable, v)?;
        let cmp = compare_serial_from(closed, &c, v, settings, lift_settings, previous.as_ref())?;
        out.push(cmp.record.clone());
        if cmp.record.closed_converged && cmp.record.serial_converged {
            previous = Some(cmp);
        }
    }
    Ok(out)
}
