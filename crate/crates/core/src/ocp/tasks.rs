//! Task documents and contact-phase schedules for squat, walk, jump and stairs.

use std::f64::consts::PI;

use nalgebra::{DVector, Vector3, Vector6};
use serde::Deserialize;

use super::costs::{CostTerm, Residual};
use super::{ShootingProblem, Stage};
use crate::closure::{ClosureConstraint, DEFAULT_BAUMGARTE};
use crate::condyn::{project_to_manifold, ConstraintSet};
use crate::error::{Error, Result};
use crate::model::{JointKind, MechState, Model};
use crate::rba::{center_of_mass, forward_kinematics};
use crate::spatial::Se3;

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Squat,
    Walk,
    Jump,
    Stairs,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Squat => "squat",
            TaskKind::Walk => "walk",
            TaskKind::Jump => "jump",
            TaskKind::Stairs => "stairs",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskKind,
    /// Stage duration (s).
    pub dt: f64,
    /// Optional check on the scheduled horizon; required for squat.
    pub horizon: Option<usize>,
    /// Baumgarte gain for closures and contacts (s⁻¹).
    pub baumgarte: Option<f64>,
    /// Contact frames, left then right (defaults to the model's `feet` label).
    pub feet: Option<Vec<String>>,
    pub squat: Option<SquatConfig>,
    pub walk: Option<WalkConfig>,
    pub jump: Option<JumpConfig>,
    /// Explicit contact schedule replacing the task default.
    pub phases: Option<Vec<PhaseConfig>>,
    #[serde(default)]
    pub weights: Weights,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquatConfig {
    /// CoM elevation at mid-horizon relative to the initial elevation.
    pub relative_elevation: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkConfig {
    /// Target forward CoM velocity (m/s).
    pub velocity: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_initial_double")]
    pub initial_double: usize,
    #[serde(default = "default_single")]
    pub single: usize,
    #[serde(default = "default_double")]
    pub double: usize,
    /// Peak of the swing-foot clearance profile (m).
    #[serde(default = "default_clearance")]
    pub clearance: f64,
    /// Stair rise per step (stairs only).
    pub step_height: Option<f64>,
}

fn default_steps() -> usize {
    4
}
fn default_initial_double() -> usize {
    30
}
fn default_single() -> usize {
    40
}
fn default_double() -> usize {
    15
}
fn default_clearance() -> f64 {
    0.05
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpConfig {
    pub initial_double: usize,
    pub flight: usize,
    pub final_double: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub label: String,
    pub nodes: usize,
    pub contacts: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Weights {
    pub state: f64,
    /// Activation of the root orientation coordinates in the state residual.
    pub state_base_orientation: f64,
    /// Activation of the velocity coordinates in the state residual.
    pub state_velocity: f64,
    pub control: f64,
    pub force: f64,
    pub com_track: f64,
    pub com_velocity: f64,
    pub com_height_drift: f64,
    pub com_apex: f64,
    pub forward_displacement: f64,
    pub impact_placement: f64,
    pub impact_velocity: f64,
    pub impact_orientation: f64,
    pub step_height: f64,
    pub fly_high: f64,
    pub terminal_state: f64,
    /// Optional actuator box penalty weight (0 disables).
    pub control_bounds: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            state: 1e-1,
            state_base_orientation: 10.0,
            state_velocity: 1.0,
            control: 1e-3,
            force: 1e-5,
            com_track: 1e4,
            com_velocity: 1e2,
            com_height_drift: 1e2,
            com_apex: 1e4,
            forward_displacement: 1e4,
            impact_placement: 1e5,
            impact_velocity: 1e3,
            impact_orientation: 1e5,
            step_height: 1e5,
            fly_high: 1e4,
            terminal_state: 10.0,
            control_bounds: 0.0,
        }
    }
}

impl TaskConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0);
            Error::Parse { line, message: e.message().to_string() }
        })
    }

    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse { line: 0, message: format!("{path}: {e}") })?;
        Self::from_toml(&text)
    }

    fn walk(&self) -> Result<&WalkConfig> {
        self.walk.as_ref().ok_or_else(|| Error::InvalidTask(format!("{} task needs a [walk] section", self.task.name())))
    }
}

/// Contact phase with contacts given as indices into the feet list.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub label: String,
    pub nodes: usize,
    pub contacts: Vec<usize>,
}

/// The contact schedule a config resolves to.
pub fn schedule(config: &TaskConfig, feet: &[String]) -> Result<Vec<Phase>> {
    let both = vec![0, 1];
    let phases = if let Some(ph) = &config.phases {
        ph.iter()
            .map(|p| {
                let contacts = p
                    .contacts
                    .iter()
                    .map(|c| {
                        feet.iter().position(|f| f == c).ok_or_else(|| {
                            Error::InvalidTask(format!("phase `{}` names unknown contact `{c}`", p.label))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Phase { label: p.label.clone(), nodes: p.nodes, contacts })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        match config.task {
            TaskKind::Squat => {
                let n = config
                    .horizon
                    .ok_or_else(|| Error::InvalidTask("squat task needs `horizon`".into()))?;
                vec![Phase { label: "double".into(), nodes: n, contacts: both }]
            }
            TaskKind::Walk | TaskKind::Stairs => {
                let w = config.walk()?;
                if w.steps == 0 || w.single == 0 {
                    return Err(Error::InvalidTask("walk needs at least one step with a single-support phase".into()));
                }
                let mut p = vec![Phase { label: "double".into(), nodes: w.initial_double, contacts: both.clone() }];
                for i in 0..w.steps {
                    // right foot (index 1) swings first
                    let stance = if i % 2 == 0 { 0 } else { 1 };
                    let side = if stance == 0 { "left-support" } else { "right-support" };
                    p.push(Phase { label: side.into(), nodes: w.single, contacts: vec![stance] });
                    p.push(Phase { label: "double".into(), nodes: w.double, contacts: both.clone() });
                }
                p
            }
            TaskKind::Jump => {
                let j = config
                    .jump
                    .as_ref()
                    .ok_or_else(|| Error::InvalidTask("jump task needs a [jump] section".into()))?;
                vec![
                    Phase { label: "double".into(), nodes: j.initial_double, contacts: both.clone() },
                    Phase { label: "flight".into(), nodes: j.flight, contacts: vec![] },
                    Phase { label: "double".into(), nodes: j.final_double, contacts: both },
                ]
            }
        }
    };
    for p in &phases {
        if p.label == "flight" && !p.contacts.is_empty() {
            return Err(Error::InvalidTask(format!("infeasible schedule: flight phase with contacts {:?}", p.contacts)));
        }
    }
    if config.task == TaskKind::Jump {
        match phases.iter().find(|p| p.contacts.is_empty()) {
            Some(p) if p.nodes > 0 => {}
            _ => return Err(Error::InvalidTask("infeasible schedule: jump without a flight phase".into())),
        }
    }
    if phases.first().map(|p| p.contacts.len() < feet.len()).unwrap_or(true) {
        return Err(Error::InvalidTask("infeasible schedule: the first phase must hold every contact".into()));
    }
    let n: usize = phases.iter().map(|p| p.nodes).sum();
    if let Some(h) = config.horizon {
        if h != n {
            return Err(Error::InvalidTask(format!("horizon {h} differs from the scheduled {n} nodes")));
        }
    }
    Ok(phases)
}

/// Per-node contact flags `[k][foot]` for `k` in `0..=N` (the terminal node
/// repeats the last stage).
fn contact_flags(phases: &[Phase], nfeet: usize) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    for p in phases {
        for _ in 0..p.nodes {
            out.push((0..nfeet).map(|f| p.contacts.contains(&f)).collect());
        }
    }
    let last = out.last().cloned().unwrap_or_else(|| vec![true; nfeet]);
    out.push(last);
    out
}

/// Initial state: reference configuration with closed loops, at rest.
pub fn initial_state(model: &Model) -> Result<MechState> {
    let q0 = model.reference_configuration();
    let q = if model.closures.is_empty() {
        q0
    } else {
        project_to_manifold(model, &ConstraintSet::closures(model), &q0)?
    };
    Ok(MechState::at_rest(q, model.nv))
}

fn state_activation(model: &Model, w: &Weights) -> DVector<f64> {
    let nv = model.nv;
    let mut a = DVector::from_element(2 * nv, 1.0);
    for j in &model.joints {
        if j.kind == JointKind::FreeFlyer {
            for i in 0..3 {
                a[j.idx_v + i] = 0.0;
                a[j.idx_v + 3 + i] = w.state_base_orientation;
            }
        }
    }
    for i in nv..2 * nv {
        a[i] = w.state_velocity;
    }
    // dependent linkage coordinates follow the loop and are not regularized
    if let Some(chain) = &model.serial {
        for j in model.joints.iter().filter(|j| chain.linkage.contains(&j.name)) {
            for i in j.idx_v..j.idx_v + j.nv() {
                a[i] = 0.0;
                a[nv + i] = 0.0;
            }
        }
    }
    a
}

pub fn build_task(model: &Model, config: &TaskConfig) -> Result<ShootingProblem> {
    if !(config.dt > 0.0) {
        return Err(Error::InvalidTask("dt must be positive".into()));
    }
    let feet: Vec<String> = match &config.feet {
        Some(f) => f.clone(),
        None => model.label("feet")?.to_vec(),
    };
    if feet.len() != 2 {
        return Err(Error::InvalidTask(format!("expected two contact frames, got {}", feet.len())));
    }
    let foot_idx = feet.iter().map(|f| model.frame_index(f)).collect::<Result<Vec<_>>>()?;
    let phases = schedule(config, &feet)?;
    let flags = contact_flags(&phases, feet.len());
    let n = flags.len() - 1;
    let w = &config.weights;
    let dt = config.dt;

    let x0 = initial_state(model)?;
    let z = DVector::zeros(model.nv);
    let cache0 = forward_kinematics(model, &x0.q, &z, &z)?;
    let com0 = center_of_mass(model, &cache0);
    let foot0: Vec<Se3> = foot_idx.iter().map(|&f| cache0.frame_placements[f]).collect();
    let weight = model.total_mass() * model.gravity.norm();

    // landing offsets: landing i lands at ((i+1)ℓ, 0, (i+1)h) from the start
    let (stride, rise) = match config.task {
        TaskKind::Walk | TaskKind::Stairs => {
            let wc = config.walk()?;
            let rise = if config.task == TaskKind::Stairs {
                wc.step_height.ok_or_else(|| Error::InvalidTask("stairs task needs `walk.step_height`".into()))?
            } else {
                0.0
            };
            (wc.velocity * (wc.single + wc.double) as f64 * dt, rise)
        }
        _ => (0.0, 0.0),
    };

    // contact target of each foot at each node
    let mut targets: Vec<Vec<Se3>> = vec![foot0.clone(); n + 1];
    let mut landings: Vec<(usize, usize, Se3)> = Vec::new(); // (node, foot, target)
    let mut swings: Vec<(usize, usize, usize)> = Vec::new(); // (foot, start, end)
    {
        let mut current = foot0.clone();
        let mut landing = 0usize;
        let mut swing_start: Vec<Option<usize>> = vec![None; feet.len()];
        for k in 0..=n {
            for f in 0..feet.len() {
                if !flags[k][f] && swing_start[f].is_none() {
                    swing_start[f] = Some(k);
                }
                if flags[k][f] {
                    if let Some(s) = swing_start[f].take() {
                        let t = if config.task == TaskKind::Jump || config.task == TaskKind::Squat {
                            foot0[f]
                        } else {
                            let i = (landing + 1) as f64;
                            let off = Vector3::new(i * stride, 0.0, i * rise);
                            Se3::new(foot0[f].rotation, foot0[f].translation + off)
                        };
                        landing += 1;
                        current[f] = t;
                        landings.push((k, f, t));
                        swings.push((f, s, k));
                    }
                }
                targets[k][f] = current[f];
            }
        }
        for f in 0..feet.len() {
            if let Some(s) = swing_start[f] {
                swings.push((f, s, n + 1));
            }
        }
    }

    let alpha = config.baumgarte.unwrap_or(DEFAULT_BAUMGARTE);
    let closures = ClosureConstraint::all_from_model(model);
    let nclos = closures.len();
    let x_ref_q = x0.q.clone();
    let v_zero = DVector::zeros(model.nv);
    let act = state_activation(model, w);
    let u_ref = DVector::zeros(model.nu());

    let mut stages = Vec::with_capacity(n);
    let mut node_costs: Vec<Vec<CostTerm>> = vec![Vec::new(); n + 1];
    // swing fly-high and landing impact costs
    for &(f, s, e) in &swings {
        let len = (e - s) as f64;
        for k in s..e.min(n + 1) {
            let phase = (k - s) as f64 / len;
            let z_start = targets[k][f].translation.z;
            let z_end = rise_of_swing(&landings, f, e).unwrap_or(z_start);
            let clearance = config.walk.as_ref().map(|w| w.clearance).unwrap_or(default_clearance())
                * (PI * phase).sin()
                + z_start
                + (z_end - z_start) * phase;
            if clearance > 0.0 && w.fly_high > 0.0 && config.task != TaskKind::Jump {
                node_costs[k].push(CostTerm::new(
                    format!("fly-high:{}", feet[f]),
                    w.fly_high,
                    Residual::FlyHigh { frame: foot_idx[f], clearance },
                ));
            }
        }
    }
    for &(k, f, t) in &landings {
        let frame = foot_idx[f];
        node_costs[k].push(CostTerm::new(
            format!("impact-placement:{}", feet[f]),
            w.impact_placement,
            Residual::FramePlacement { frame, reference: t },
        ));
        node_costs[k].push(CostTerm::new(
            format!("impact-velocity:{}", feet[f]),
            w.impact_velocity,
            Residual::FrameVelocity { frame },
        ));
        node_costs[k].push(CostTerm::new(
            format!("impact-orientation:{}", feet[f]),
            w.impact_orientation,
            Residual::FrameOrientation { frame, reference: t.rotation },
        ));
        if config.task == TaskKind::Stairs {
            node_costs[k].push(CostTerm::new(
                format!("step-height:{}", feet[f]),
                w.step_height,
                Residual::FrameHeight { frame, reference: t.translation.z },
            ));
        }
    }

    // task-specific CoM costs
    let horizon_time = n as f64 * dt;
    match config.task {
        TaskKind::Squat => {
            let r = config
                .squat
                .as_ref()
                .ok_or_else(|| Error::InvalidTask("squat task needs a [squat] section".into()))?
                .relative_elevation;
            if !(r > 0.0) {
                return Err(Error::InvalidTask("squat relative_elevation must be positive".into()));
            }
            let z0 = com0.z;
            for (k, costs) in node_costs.iter_mut().enumerate() {
                let t = k as f64 * dt;
                let zr = z0 - (z0 - r * z0) * (1.0 - (2.0 * PI * t / horizon_time).cos()) / 2.0;
                costs.push(CostTerm::new("com-elevation-track", w.com_track, Residual::ComHeight { reference: zr }));
            }
        }
        TaskKind::Walk | TaskKind::Stairs => {
            let wc = config.walk()?;
            for (k, costs) in node_costs.iter_mut().enumerate().take(n) {
                let _ = k;
                costs.push(CostTerm::new(
                    "com-velocity",
                    w.com_velocity,
                    Residual::ComVelocity { reference: Vector3::new(wc.velocity, 0.0, 0.0) },
                ));
            }
            if config.task == TaskKind::Walk {
                for costs in node_costs.iter_mut() {
                    costs.push(CostTerm::new(
                        "com-height-drift",
                        w.com_height_drift,
                        Residual::ComHeight { reference: com0.z },
                    ));
                }
            }
            node_costs[n].push(CostTerm::new(
                "terminal-forward-displacement",
                w.forward_displacement,
                Residual::ComForward { reference: com0.x + (wc.steps as f64 - 0.5) * stride },
            ));
        }
        TaskKind::Jump => {
            let start = phases.iter().take_while(|p| !p.contacts.is_empty()).map(|p| p.nodes).sum::<usize>();
            let flight = phases.iter().find(|p| p.contacts.is_empty()).map(|p| p.nodes).unwrap_or(0);
            let tf = flight as f64 * dt;
            let apex = com0.z + model.gravity.norm() * tf * tf / 8.0;
            node_costs[start + flight / 2].push(CostTerm::new(
                "com-elevation-at-node",
                w.com_apex,
                Residual::ComHeight { reference: apex },
            ));
        }
    }

    for k in 0..n {
        let active: Vec<usize> = (0..feet.len()).filter(|&f| flags[k][f]).collect();
        let mut cs = closures.clone();
        for &f in &active {
            cs.push(ClosureConstraint::contact(model, foot_idx[f], targets[k][f]));
        }
        let constraints = ConstraintSet::new(cs).with_baumgarte(alpha);
        let mut costs = vec![
            CostTerm::new(
                "state-reg",
                w.state,
                Residual::State { q_ref: x_ref_q.clone(), v_ref: v_zero.clone() },
            )
            .with_activation(act.clone()),
            CostTerm::new("control-reg", w.control, Residual::Control { u_ref: u_ref.clone() }),
        ];
        for (i, &f) in active.iter().enumerate() {
            let share = weight / active.len() as f64;
            let world = Vector3::new(0.0, 0.0, -share);
            let local = targets[k][f].rotation.transpose() * world;
            let reference = DVector::from_column_slice(Vector6::new(local.x, local.y, local.z, 0.0, 0.0, 0.0).as_slice());
            costs.push(CostTerm::new(
                format!("force-reg:{}", feet[f]),
                w.force,
                Residual::Force { index: nclos + i, reference },
            ));
        }
        if w.control_bounds > 0.0 {
            let bound = DVector::from_iterator(
                model.nu(),
                model.actuation.iter().map(|&iv| effort_of(model, iv)),
            );
            costs.push(CostTerm::new("control-bounds", w.control_bounds, Residual::ControlBounds { bound }));
        }
        costs.append(&mut node_costs[k]);
        let label = phases_label(&phases, k);
        stages.push(Stage { dt, constraints, costs, phase: label });
    }
    let mut terminal = vec![CostTerm::new(
        "terminal-state",
        w.terminal_state,
        Residual::State { q_ref: x_ref_q, v_ref: v_zero },
    )
    .with_activation(act)];
    terminal.append(&mut node_costs[n]);

    let problem = ShootingProblem { model: model.clone(), x0, stages, terminal };
    problem.validate()?;
    Ok(problem)
}

fn rise_of_swing(landings: &[(usize, usize, Se3)], foot: usize, end: usize) -> Option<f64> {
    landings.iter().find(|(k, f, _)| *k == end && *f == foot).map(|(_, _, t)| t.translation.z)
}

fn effort_of(model: &Model, iv: usize) -> f64 {
    model
        .joints
        .iter()
        .find(|j| j.idx_v == iv)
        .and_then(|j| j.effort)
        .unwrap_or(f64::INFINITY)
}

fn phases_label(phases: &[Phase], k: usize) -> String {
    let mut acc = 0;
    for p in phases {
        acc += p.nodes;
        if k < acc {
            return p.label.clone();
        }
    }
    String::new()
}

/// Index of the first node of each phase.
pub fn phase_boundaries(phases: &[Phase]) -> Vec<usize> {
    let mut acc = 0;
    phases
        .iter()
        .map(|p| {
            let b = acc;
            acc += p.nodes;
            b
        })
        .collect()
}
