//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p kinloop-harness --test acceptance` runs everything; a list
//! of criterion numbers after `--` restricts the run.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use kinloop::closure::DEFAULT_BAUMGARTE;
use kinloop::condyn::ConstraintSet;
use kinloop::lift::{frozen_linkage_angles, lift_trajectory, LiftSettings, SerialTrajectory};
use kinloop::model::{build_serial_approximation, load_model, load_model_str, MechState, SerialProjection};
use kinloop::ocp::{solve, state_difference, CostTerm, Residual, ShootingProblem, SolverSettings, Stage, TaskConfig};
use kinloop::{Error, Model};
use kinloop_harness::certify::{certify, CertReport, CertifySettings};
use kinloop_harness::pipeline::{lift_stages, run_task, sweep_compare, with_value, SweepRecord};
use kinloop_harness::simulate::{rest_state, simulate};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn task(name: &str) -> TaskConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tasks").join(format!("{name}.toml"));
    TaskConfig::load(&p.to_string_lossy()).expect("shipped task")
}

fn model(name: &str) -> Model {
    load_model(name).expect("shipped model")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Certified {
    reports: Vec<(String, CertReport)>,
    elapsed: Duration,
}

fn certified() -> &'static Certified {
    static CELL: std::sync::OnceLock<Certified> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let reports = ["fourbar", "toybiped", "parallel-leg"]
            .iter()
            .map(|m| (m.to_string(), certify(&model(m), &CertifySettings::default()).expect("certification runs")))
            .collect();
        Certified { reports, elapsed: start.elapsed() }
    })
}

fn c1_derivatives() -> Outcome {
    let c = certified();
    let settings = CertifySettings::default();
    let mut parts = Vec::new();
    let mut ok = c.elapsed < Duration::from_secs(60);
    for (name, r) in &c.reports {
        let worst = r.worst().map(|b| b.error).unwrap_or(0.0);
        ok &= r.passed() && r.samples == 20;
        parts.push(format!("{name} [{}] worst {worst:.1e}", r.cases.join("/")));
        for b in r.failing() {
            parts.push(format!("{name} {} {:.1e} FAIL", b.block, b.error));
        }
    }
    check(
        ok && settings.step == 1e-6 && settings.tolerance == 1e-5,
        format!("{}; {:.1} s", parts.join(", "), c.elapsed.as_secs_f64()),
    )
}

fn c2_kkt() -> Outcome {
    let c = certified();
    let kkt = c.reports.iter().map(|(_, r)| r.kkt_residual).fold(0.0, f64::max);
    let con = c.reports.iter().map(|(_, r)| r.constraint_error).fold(0.0, f64::max);
    check(kkt < 1e-9 && con < 1e-9, format!("KKT {kkt:.1e}, J q̈ + a0 {con:.1e}"))
}

fn c3_gauss() -> Outcome {
    let c = certified();
    let m = c.reports.iter().map(|(_, r)| r.gauss_margin).fold(f64::INFINITY, f64::min);
    let dirs = CertifySettings::default().directions;
    check(dirs == 100 && c.reports.iter().all(|(_, r)| r.gauss_passed(1e-9)), format!("{dirs} directions, min margin {m:.1e}"))
}

fn c4_passive() -> Outcome {
    let m = model("fourbar");
    let cs = ConstraintSet::closures(&m).with_baumgarte(DEFAULT_BAUMGARTE);
    let x0 = rest_state(&m).map_err(|e| e.to_string())?;
    let sim = simulate(&m, &cs, &x0, &DVector::zeros(m.nu()), 1e-3, 2000).map_err(|e| e.to_string())?;
    let (r, e) = (sim.max_residual(), sim.energy_drift());
    check(r < 1e-4 && e < 1e-3, format!("residual {r:.1e}, energy drift {e:.1e} J"))
}

const TURNTABLE: &str = r#"
name = "turntable"

[[joint]]
name = "spin"
type = "revolute"
axis = [0.0, 0.0, 1.0]
parent = "world"
body = "arm"
actuated = true

[[body]]
name = "arm"
mass = 2.0
com = [0.3, 0.0, 0.0]
inertia = [0.01, 0.01, 0.02, 0.0, 0.0, 0.0]
"#;

/// LQR on a vertical-axis turntable (linear dynamics under gravity) against
/// a textbook discrete Riccati recursion.
fn lqr_gap() -> Result<f64, String> {
    let m = load_model_str(TURNTABLE).map_err(|e| e.to_string())?;
    let inertia = 0.02 + 2.0 * 0.3 * 0.3;
    let (dt, n, wx, wu, wt) = (0.05, 40, 2.0, 0.5, 50.0);
    let x0 = MechState::new(DVector::from_vec(vec![0.7]), DVector::from_vec(vec![-0.4]));
    let zero = DVector::zeros(1);
    let reg = |w| CostTerm::new("state", w, Residual::State { q_ref: zero.clone(), v_ref: zero.clone() });
    let stage = Stage {
        dt,
        constraints: ConstraintSet::closures(&m),
        costs: vec![reg(wx), CostTerm::new("control", wu, Residual::Control { u_ref: zero.clone() })],
        phase: "free".into(),
    };
    let problem = ShootingProblem { model: m, x0, stages: vec![stage; n], terminal: vec![reg(wt)] };
    let (traj, report) = solve(&problem, &[], &[], &SolverSettings::default()).map_err(|e| e.to_string())?;
    if !report.converged {
        return Err(format!("LQR did not converge: {}", report.message));
    }

    // semi-implicit Euler: v' = v + dt u / I, q' = q + dt v'
    let a = Matrix2::new(1.0, dt, 0.0, 1.0);
    let b = Vector2::new(dt * dt / inertia, dt / inertia);
    let mut p = Matrix2::identity() * wt;
    let mut gains = vec![Vector2::zeros().transpose(); n];
    for k in (0..n).rev() {
        let s = wu + (b.transpose() * p * b)[0];
        let kk = (b.transpose() * p * a) / s;
        p = Matrix2::identity() * wx + a.transpose() * p * a - a.transpose() * p * b * kk;
        gains[k] = kk;
    }
    let mut x = Vector2::new(0.7, -0.4);
    let mut gap = 0.0f64;
    for k in 0..n {
        let u = -(gains[k] * x)[0];
        gap = gap.max((traj.us[k][0] - u).abs());
        gap = gap.max((traj.xs[k].q[0] - x[0]).abs()).max((traj.xs[k].v[0] - x[1]).abs());
        x = a * x + b * u;
    }
    Ok(gap)
}

fn c5_solver() -> Outcome {
    let gap = lqr_gap()?;
    let posture = run_task(&model("toybiped"), &task("posture"), &SolverSettings::default()).map_err(|e| e.to_string())?;
    let jobs: Vec<(&str, &str)> = ["toybiped", "parallel-leg"]
        .iter()
        .flat_map(|m| ["posture", "squat", "walk", "jump", "stairs"].into_iter().map(move |t| (*m, t)))
        .collect();
    let runs: Vec<(String, bool, bool)> = jobs
        .par_iter()
        .map(|&(m, t)| {
            match run_task(&model(m), &task(t), &SolverSettings::default()) {
                Ok(r) => (format!("{m}/{t}"), r.report.converged, r.report.is_monotone()),
                Err(e) => (format!("{m}/{t}: {e}"), false, false),
            }
        })
        .collect();
    let bad: Vec<&str> = runs.iter().filter(|r| !r.2).map(|r| r.0.as_str()).collect();
    let ok = gap < 1e-6 && posture.report.converged && posture.report.iterations <= 20 && bad.is_empty();
    check(
        ok,
        format!(
            "LQR gap {gap:.1e}; posture {} iterations; {} of {} shipped task runs monotone{}",
            posture.report.iterations,
            runs.len() - bad.len(),
            runs.len(),
            if bad.is_empty() { String::new() } else { format!(" (not: {})", bad.join(", ")) }
        ),
    )
}

fn knee_table(records: &[SweepRecord]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "{}: closed {:.1}{} lifted {:.1}{}",
                r.value,
                r.closed_knee_max,
                if r.closed_converged { "" } else { "(nc)" },
                r.lifted_knee_max,
                if r.lift_success { "" } else { "(fail)" }
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn c6_squat() -> Outcome {
    let start = Instant::now();
    let depths = [0.86, 0.83, 0.8, 0.78, 0.76, 0.64];
    let rec = sweep_compare(
        &model("toybiped"),
        &task("squat"),
        "squat.relative_elevation",
        &depths,
        &SolverSettings::default(),
        &LiftSettings::default(),
        false,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    // deeper squat = smaller relative elevation = later in the list
    let monotone = rec.windows(2).all(|w| w[1].lifted_knee_max >= w[0].lifted_knee_max);
    let above = rec.iter().all(|r| r.lifted_knee_max > r.closed_knee_max);
    let deepest = rec.last().expect("non-empty");
    let ok = rec.len() >= 6
        && monotone
        && above
        && !deepest.lift_success
        && rec.iter().all(|r| r.closed_converged)
        && elapsed < Duration::from_secs(600);
    check(ok, format!("{}; {:.0} s", knee_table(&rec), elapsed.as_secs_f64()))
}

fn c7_walk() -> Outcome {
    let velocities = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
    let rec = sweep_compare(
        &model("toybiped"),
        &task("walk"),
        "walk.velocity",
        &velocities,
        &SolverSettings::default(),
        &LiftSettings::default(),
        true,
    )
    .map_err(|e| e.to_string())?;
    let all_closed = rec.iter().all(|r| r.closed_converged);
    // a threshold: the lift succeeds below it and fails from it on
    let first_fail = rec.iter().position(|r| !r.lift_success);
    let threshold = first_fail.filter(|&i| i > 0 && rec[i..].iter().all(|r| !r.lift_success));
    let detail = rec
        .iter()
        .map(|r| {
            format!(
                "{}: closed {} lift {}",
                r.value,
                if r.closed_converged { "ok" } else { "nc" },
                if r.lift_success { "ok".to_string() } else { format!("fails@{}", r.lift_failure_step.unwrap_or(0)) }
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    match threshold {
        Some(i) if all_closed && rec.len() >= 5 => Ok(format!("lift fails from {} m/s; {detail}", rec[i].value)),
        _ => Err(detail),
    }
}

fn c8_parallel_leg() -> Outcome {
    let m = model("parallel-leg");
    let runs: Vec<(String, bool)> = ["squat", "walk", "jump"]
        .par_iter()
        .map(|t| match run_task(&m, &task(t), &SolverSettings::default()) {
            Ok(r) => (format!("{t} {}", r.report.iterations), r.report.converged),
            Err(e) => (format!("{t}: {e}"), false),
        })
        .collect();
    let refused = matches!(build_serial_approximation(&m, &BTreeMap::new()), Err(Error::NoSerialChain));
    let ok = runs.iter().all(|r| r.1) && refused;
    let names: Vec<&str> = runs.iter().map(|r| r.0.as_str()).collect();
    check(ok, format!("converged: {}; serial approximation refused: {refused}", names.join(", ")))
}

fn c9_self_lift() -> Outcome {
    let closed = model("toybiped");
    let run = run_task(&closed, &task("squat"), &SolverSettings::default()).map_err(|e| e.to_string())?;
    let serial = build_serial_approximation(&closed, &frozen_linkage_angles(&closed, &run.problem.x0.q).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let projection = SerialProjection::new(&closed, &serial).map_err(|e| e.to_string())?;
    let projected = SerialTrajectory::project(&run.trajectory, &projection);
    let settings = LiftSettings { tolerance: 1e-6, ..LiftSettings::default() };
    let (lifted, report) = lift_trajectory(&closed, &serial, &lift_stages(&run.problem), &projected, &run.trajectory.xs[0], &settings)
        .map_err(|e| e.to_string())?;
    let mut err = 0.0f64;
    for (a, b) in run.trajectory.xs.iter().zip(&lifted.xs) {
        err = err.max(state_difference(&closed, a, b).map_err(|e| e.to_string())?.amax());
    }
    let ok = run.report.converged && report.success && lifted.xs.len() == run.trajectory.xs.len() && err <= 1e-6;
    check(ok, format!("{} steps, max state error {err:.1e}", report.tracking_errors.len()))
}

/// Coefficient of determination of a least-squares line through `(x, y)`.
fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let a = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let b = DVector::from_column_slice(y);
    let coef = (a.transpose() * &a).cholesky().expect("distinct abscissae").solve(&(a.transpose() * &b));
    let fit = &a * coef;
    let mean = b.mean();
    let ss_res = (&b - fit).norm_squared();
    let ss_tot = b.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    1.0 - ss_res / ss_tot
}

fn c10_scaling() -> Outcome {
    let m = model("toybiped");
    let horizons = [50usize, 100, 200, 400];
    // one worker: the parallel derivative pass amortizes better on long horizons
    let settings = SolverSettings { max_iterations: 4, tolerance: 0.0, workers: 1, ..SolverSettings::default() };
    let mut per_iter = Vec::new();
    let mut split = Vec::new();
    for &n in &horizons {
        let mut config = with_value(&task("squat"), "dt", 2.0 / n as f64).expect("dt");
        config.horizon = Some(n);
        let mut best: Option<kinloop::ocp::PhaseTiming> = None;
        for _ in 0..3 {
            let run = run_task(&m, &config, &settings).map_err(|e| e.to_string())?;
            let t = run.report.timing_per_iteration();
            if best.as_ref().is_none_or(|b| t.total() < b.total()) {
                best = Some(t);
            }
        }
        let t = best.expect("three runs");
        per_iter.push(t.total().as_secs_f64());
        split.push(format!(
            "N={n}: {:.1} ms (rollout {:.1} / derivatives {:.1} / backward {:.1})",
            t.total().as_secs_f64() * 1e3,
            t.rollout.as_secs_f64() * 1e3,
            t.derivatives.as_secs_f64() * 1e3,
            t.backward.as_secs_f64() * 1e3
        ));
    }
    let x: Vec<f64> = horizons.iter().map(|&n| n as f64).collect();
    let r2 = r_squared(&x, &per_iter);
    check(r2 > 0.98, format!("R² {r2:.4}; {}", split.join("; ")))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "derivative FD certification", c1_derivatives),
        (2, "KKT exactness", c2_kkt),
        (3, "Gauss minimality", c3_gauss),
        (4, "passive fourbar simulation", c4_passive),
        (5, "solver sanity", c5_solver),
        (6, "squat depth sweep", c6_squat),
        (7, "walk velocity sweep", c7_walk),
        (8, "parallel-leg tasks", c8_parallel_leg),
        (9, "self-lift round trip", c9_self_lift),
        (10, "per-iteration scaling", c10_scaling),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name} ({secs:.1} s): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1} s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
