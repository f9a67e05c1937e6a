use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kinloop::closure::{GammaAssembly, DEFAULT_BAUMGARTE};
use kinloop::condyn::ConstraintSet;
use kinloop::lift::{frozen_linkage_angles, initial_closed_state, lift_trajectory, LiftSettings, SerialTrajectory};
use kinloop::model::{build_serial_approximation, load_model, SerialProjection};
use kinloop::ocp::{build_task, SolverSettings, TaskConfig};
use kinloop::{Error, Model};
use kinloop_harness::certify::{certify, CertifySettings};
use kinloop_harness::experiment::{parse_range, parse_sweep, ExperimentConfig, SweepConfig};
use kinloop_harness::metrics::{control_summary, node_metrics, write_control_summary, write_node_metrics, write_records};
use kinloop_harness::pipeline::{lift_stages, run_task, sweep_compare};
use kinloop_harness::reduction::reduction_ratio;
use kinloop_harness::simulate::{rest_state, simulate};
use kinloop_harness::trajfile::{read_trajectory, write_lift_report, write_trajectory, TrajectoryFile};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "kinloop", version, about = "Closed-loop multibody dynamics and trajectory optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every analytical derivative against central finite differences.
    CheckDerivatives(CheckArgs),
    /// Transmission ratio dθ_motor/dθ_joint over a joint-angle range (CSV).
    ReductionRatio(RatioArgs),
    /// Integrate the dynamics under constant controls.
    Simulate(SimulateArgs),
    /// Build and solve a task; writes the trajectory and metrics.
    RunTask(RunTaskArgs),
    /// Closed versus lifted serial solutions over a sweep (CSV).
    CompareSerial(CompareArgs),
    /// Lift a serial-approximation trajectory onto the closed model.
    Lift(LiftArgs),
    /// Print the dimensions, joints, labels and loops of a model.
    ModelInfo {
        /// Bundled model name or model file.
        #[arg(long)]
        model: String,
    },
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    model: String,
    /// Random states per support case.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Certify the bare acceleration constraint instead of the stabilized one.
    #[arg(long)]
    no_baumgarte: bool,
    /// Assemble the constraint acceleration derivative with a wrong sign.
    #[arg(long, hide = true)]
    flip_gamma3: bool,
}

#[derive(Args)]
struct RatioArgs {
    #[arg(long)]
    model: String,
    /// Output joint whose angle is swept.
    #[arg(long)]
    joint: String,
    /// Motor joint of the same loop.
    #[arg(long)]
    motor: String,
    /// Angles as start:stop:count.
    #[arg(long, default_value = "-0.2:1.6:91")]
    range: String,
    /// CSV file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: String,
    /// Simulated time (s).
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Baumgarte gain (s⁻¹); 0 disables stabilization.
    #[arg(long, default_value_t = DEFAULT_BAUMGARTE)]
    baumgarte: f64,
    /// Frames pinned where they start, comma separated.
    #[arg(long, value_delimiter = ',')]
    contacts: Vec<String>,
    /// Scale of the random initial velocity (projected on the constraints).
    #[arg(long, default_value_t = 0.0)]
    speed: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hold the quasi-static controls instead of zero torque.
    #[arg(long)]
    hold: bool,
    /// Trajectory file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV of time, closure residual and energy.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = SolverSettings::default().max_iterations)]
    max_iterations: usize,
    /// Relative stopping tolerance on the expected decrease.
    #[arg(long, default_value_t = SolverSettings::default().tolerance)]
    tolerance: f64,
    /// Threads for the stage derivatives (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl SolverArgs {
    fn settings(&self) -> SolverSettings {
        SolverSettings {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            workers: self.workers,
            ..SolverSettings::default()
        }
    }
}

#[derive(Args)]
struct RunTaskArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    task: PathBuf,
    /// Solve on the serial approximation of the model instead.
    #[arg(long)]
    serial: bool,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment file; replaces --model, --task and --sweep.
    #[arg(long, conflicts_with_all = ["model", "task", "sweep"])]
    experiment: Option<PathBuf>,
    #[arg(long, requires_all = ["task", "sweep"])]
    model: Option<String>,
    #[arg(long)]
    task: Option<PathBuf>,
    /// variable=v1,v2,... with variable one of squat.relative_elevation,
    /// walk.velocity, walk.step_height, dt.
    #[arg(long)]
    sweep: Option<String>,
    /// Warm-start each point from the previous one.
    #[arg(long)]
    continuation: bool,
    /// CSV file (default: the experiment's output, else stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = kinloop::lift::DEFAULT_LIFT_TOLERANCE)]
    lift_tolerance: f64,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct LiftArgs {
    /// Closed model.
    #[arg(long)]
    model: String,
    /// Task the serial trajectory was solved for (gives dt and contacts).
    #[arg(long)]
    task: PathBuf,
    /// Trajectory file of the serial approximation.
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long, default_value_t = kinloop::lift::DEFAULT_LIFT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

/// Failure of a command: a failed check (exit 1) or bad input (exit 2).
enum Failure {
    Check(String),
    Input(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. }
            | Error::InvalidModel(_)
            | Error::DanglingReference { .. }
            | Error::Dimension { .. }
            | Error::NoSerialChain
            | Error::InvalidTask(_) => Failure::Input(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<fs::File, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::File::create(path).map_err(|e| io_err(path, e))
}

fn load_task(path: &Path) -> Result<TaskConfig, Failure> {
    Ok(TaskConfig::load(&path.to_string_lossy())?)
}

const KKT_TOLERANCE: f64 = 1e-9;
const GAUSS_SLACK: f64 = 1e-9;

fn check_derivatives(a: CheckArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let settings = CertifySettings {
        samples: a.samples,
        seed: a.seed,
        step: a.step,
        tolerance: a.tolerance,
        baumgarte: if a.no_baumgarte { None } else { Some(DEFAULT_BAUMGARTE) },
        signs: if a.flip_gamma3 { GammaAssembly::flipped_gamma3() } else { GammaAssembly::default() },
        ..CertifySettings::default()
    };
    let report = certify(&model, &settings)?;
    println!(
        "model {} | cases {} | {} samples each | seed {} | h {:e}",
        model.name,
        report.cases.join(", "),
        report.samples,
        a.seed,
        a.step
    );
    println!("{:<10} {:>12}  {:<8} sample", "block", "rel. error", "case");
    for b in &report.blocks {
        let mark = if b.error < report.tolerance { "" } else { "  FAIL" };
        println!("{:<10} {:>12.3e}  {:<8} {}{mark}", b.block, b.error, b.case, b.sample);
    }
    println!(
        "KKT residual {:.3e} | constraint error {:.3e} | Gauss margin {:.3e}",
        report.kkt_residual, report.constraint_error, report.gauss_margin
    );
    let failing = report.failing();
    if !failing.is_empty() {
        let names: Vec<String> = failing.iter().map(|b| format!("{} ({:.3e}, {} sample {})", b.block, b.error, b.case, b.sample)).collect();
        return Err(Failure::Check(format!("derivative check failed (tolerance {:.0e}): {}", report.tolerance, names.join(", "))));
    }
    if !report.kkt_passed(KKT_TOLERANCE) {
        return Err(Failure::Check(format!("KKT residual above {KKT_TOLERANCE:e}")));
    }
    if !report.gauss_passed(GAUSS_SLACK) {
        return Err(Failure::Check(format!("Gauss margin below -{GAUSS_SLACK:e}")));
    }
    match report.worst() {
        Some(w) => println!("passed: worst block {} at {:.3e}", w.block, w.error),
        None => println!("passed: nothing to check"),
    }
    Ok(())
}

fn reduction(a: RatioArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let angles = parse_range(&a.range)?;
    let rows = reduction_ratio(&model, &a.joint, &a.motor, &angles)?;
    match a.out {
        Some(p) => write_records(create(&p)?, &rows)?,
        None => write_records(io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn simulate_cmd(a: SimulateArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    if !(a.dt > 0.0) || !(a.duration >= 0.0) {
        return Err(Failure::Input("dt must be positive and duration non-negative".into()));
    }
    let mut x0 = rest_state(&model)?;
    let feet: Vec<&str> = a.contacts.iter().map(String::as_str).collect();
    let mut cs = ConstraintSet::with_contacts(&model, &x0.q, &feet)?;
    if a.baumgarte > 0.0 {
        cs = cs.with_baumgarte(a.baumgarte);
    }
    if a.speed > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let raw = DVector::from_fn(model.nv, |_, _| rng.random_range(-a.speed..a.speed));
        let z = DVector::zeros(model.nv);
        let cache = kinloop::rba::forward_kinematics(&model, &x0.q, &z, &z)?;
        let (j, _) = cs.stack(&model, &cache)?;
        x0.v = if j.nrows() == 0 {
            raw
        } else {
            let pinv = j.clone().pseudo_inverse(1e-10).map_err(|e| Failure::Check(e.to_string()))?;
            &raw - pinv * (&j * &raw)
        };
    }
    let u = if a.hold {
        kinloop::condyn::quasi_static_controls(&model, &cs, &x0.q)?
    } else {
        DVector::zeros(model.nu())
    };
    let steps = (a.duration / a.dt).round() as usize;
    let sim = simulate(&model, &cs, &x0, &u, a.dt, steps)?;
    println!(
        "{} steps of {:e} s | max closure residual {:.3e} | energy drift {:.3e} J",
        steps,
        a.dt,
        sim.max_residual(),
        sim.energy_drift()
    );
    if let Some(p) = &a.out {
        write_file(p, &write_trajectory(&TrajectoryFile::new(&model, sim.times.clone(), sim.trajectory.clone())))?;
    }
    if let Some(p) = &a.log {
        #[derive(serde::Serialize)]
        struct Row {
            t: f64,
            residual: f64,
            energy: f64,
        }
        let rows: Vec<Row> = (0..sim.times.len())
            .map(|k| Row { t: sim.times[k], residual: sim.residuals[k], energy: sim.energies[k] })
            .collect();
        write_records(create(p)?, &rows)?;
    }
    Ok(())
}

fn serial_of(closed: &Model, config: &TaskConfig) -> Result<Model, Failure> {
    let x0 = build_task(closed, config)?.x0;
    Ok(build_serial_approximation(closed, &frozen_linkage_angles(closed, &x0.q)?)?)
}

fn run_task_cmd(a: RunTaskArgs) -> CmdResult {
    let closed = load_model(&a.model)?;
    let config = load_task(&a.task)?;
    let model = if a.serial { serial_of(&closed, &config)? } else { closed };
    let run = run_task(&model, &config, &a.solver.settings())?;
    let times = run.trajectory.times(&run.problem);
    let dir = &a.out_dir;
    write_file(&dir.join("trajectory.txt"), &write_trajectory(&TrajectoryFile::new(&model, times.clone(), run.trajectory.clone())))?;
    write_node_metrics(create(&dir.join("nodes.csv"))?, &model, &node_metrics(&model, &times, &run.trajectory)?)?;
    let controls = control_summary(&model, &run.trajectory.us);
    write_control_summary(create(&dir.join("controls.csv"))?, &controls)?;
    let r = &run.report;
    let t = r.timing_per_iteration();
    let mut summary = String::new();
    summary.push_str(&format!("model {} | task {} | N {}\n", model.name, config.task.name(), run.problem.horizon()));
    summary.push_str(&format!("converged {} ({}) after {} iterations\n", r.converged, r.message, r.iterations));
    summary.push_str(&format!("cost {:.6e} | gap {:.3e} | monotone {}\n", r.final_cost(), r.final_gap, r.is_monotone()));
    summary.push_str(&format!(
        "per iteration: rollout {:.3?} derivatives {:.3?} backward {:.3?}\n",
        t.rollout, t.derivatives, t.backward
    ));
    for c in &controls {
        summary.push_str(&format!("  {:<16} max {:>10.4} mean {:>10.4}\n", c.joint, c.max, c.mean));
    }
    write_file(&dir.join("report.txt"), &summary)?;
    print!("{summary}");
    if r.converged {
        Ok(())
    } else {
        Err(Failure::Check(format!("solver did not converge: {}", r.message)))
    }
}

fn compare_cmd(a: CompareArgs) -> CmdResult {
    let (model, task, sweep, default_out) = match &a.experiment {
        Some(p) => {
            let e = ExperimentConfig::load(p)?;
            (e.model, e.task, e.sweep, e.output)
        }
        None => {
            let (Some(m), Some(t), Some(s)) = (&a.model, &a.task, &a.sweep) else {
                return Err(Failure::Input("give --experiment, or --model, --task and --sweep".into()));
            };
            (m.clone(), t.clone(), parse_sweep(s)?, None)
        }
    };
    let SweepConfig { variable, values, continuation } = sweep;
    let model = load_model(&model)?;
    let config = load_task(&task)?;
    let lift = LiftSettings { tolerance: a.lift_tolerance, ..LiftSettings::default() };
    let rows = sweep_compare(&model, &config, &variable, &values, &a.solver.settings(), &lift, continuation || a.continuation)?;
    match a.out.or(default_out) {
        Some(p) => write_records(create(&p)?, &rows)?,
        None => write_records(io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn lift_cmd(a: LiftArgs) -> CmdResult {
    let closed = load_model(&a.model)?;
    let config = load_task(&a.task)?;
    let problem = build_task(&closed, &config)?;
    let serial = build_serial_approximation(&closed, &frozen_linkage_angles(&closed, &problem.x0.q)?)?;
    let file = read_trajectory(&a.trajectory)?;
    file.check_model(&serial)?;
    let traj = SerialTrajectory::from_trajectory(&file.trajectory);
    let projection = SerialProjection::new(&closed, &serial)?;
    let x_c0 = initial_closed_state(&closed, &projection, &traj.xs[0], Some(&problem.x0.q))?;
    let settings = LiftSettings { tolerance: a.tolerance, ..LiftSettings::default() };
    let (lifted, report) = lift_trajectory(&closed, &serial, &lift_stages(&problem), &traj, &x_c0, &settings)?;
    let times: Vec<f64> = file.times.iter().take(lifted.xs.len()).cloned().collect();
    write_file(&a.out_dir.join("lifted.txt"), &write_trajectory(&TrajectoryFile::new(&closed, times, lifted)))?;
    write_file(&a.out_dir.join("lift-report.txt"), &write_lift_report(&report))?;
    println!(
        "lift {} | {} steps | max tracking error {:.3e} | {}",
        if report.success { "succeeded" } else { "failed" },
        report.tracking_errors.len(),
        report.max_error(),
        report.message
    );
    if report.success {
        Ok(())
    } else {
        Err(Failure::Check(report.message))
    }
}

fn model_info(name: &str) -> CmdResult {
    let m = load_model(name)?;
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "model {} (hash {})", m.name, m.hash);
    let _ = writeln!(out, "nq {} nv {} nu {} | bodies {} | loops {}", m.nq, m.nv, m.nu(), m.bodies.len(), m.closures.len());
    let _ = writeln!(out, "total mass {:.4} kg | gravity {:?}", m.total_mass(), m.gravity.as_slice());
    for j in &m.joints {
        let actuated = if m.control_index(j.idx_v).is_some() { " actuated" } else { "" };
        let _ = writeln!(out, "  joint {:<18} nv {}{actuated}", j.name, j.nv());
    }
    for (k, v) in &m.labels {
        let _ = writeln!(out, "  label {k} = {}", v.join(", "));
    }
    match &m.serial {
        Some(s) => {
            let _ = writeln!(out, "serial chain: linkage {}", s.linkage.join(", "));
        }
        None => {
            let _ = writeln!(out, "no serial chain");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CheckDerivatives(a) => check_derivatives(a),
        Command::ReductionRatio(a) => reduction(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::RunTask(a) => run_task_cmd(a),
        Command::CompareSerial(a) => compare_cmd(a),
        Command::Lift(a) => lift_cmd(a),
        Command::ModelInfo { model } => model_info(&model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
