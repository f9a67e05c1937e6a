use kinloop::closure::GammaAssembly;
use kinloop::condyn::joint_torques;
use kinloop::rba::{forward_kinematics, rnea};
use kinloop::lift::{static_controls, LiftSettings};
use kinloop::model::load_model;
use kinloop::ocp::{SolverSettings, TaskConfig};
use kinloop::Error;
use kinloop_harness::certify::{certify, CertifySettings};
use kinloop_harness::experiment::ExperimentConfig;
use kinloop_harness::pipeline::{compare_serial, control_indices, run_task, sweep_compare, with_value, KNEE_LABEL};
use kinloop_harness::reduction::reduction_ratio;
use kinloop_harness::trajfile::{parse_trajectory, write_trajectory, TrajectoryFile};
use nalgebra::DVector;

const POSTURE: &str = r#"
task = "squat"
dt = 0.02
horizon = 20
[squat]
relative_elevation = 1.0
"#;

#[test]
fn fourbar_certifies() {
    let m = load_model("fourbar").unwrap();
    let r = certify(&m, &CertifySettings::default()).unwrap();
    assert!(r.passed(), "{:?}", r.failing());
    assert_eq!(r.samples, 20);
    assert_eq!(r.blocks.len(), 11);
    assert!(r.kkt_passed(1e-9) && r.gauss_passed(1e-9));
}

#[test]
fn flipped_gamma3_names_the_acceleration_block() {
    let m = load_model("toybiped").unwrap();
    let settings = CertifySettings { samples: 4, signs: GammaAssembly::flipped_gamma3(), ..CertifySettings::default() };
    let r = certify(&m, &settings).unwrap();
    let failing: Vec<&str> = r.failing().iter().map(|b| b.block.as_str()).collect();
    assert!(failing.contains(&"∂a_c/∂q"), "{failing:?}");
    assert!(!failing.iter().any(|b| b.starts_with("∂τ")));
}

#[test]
fn pendulum_skips_closure_blocks() {
    let m = load_model("pendulum").unwrap();
    let r = certify(&m, &CertifySettings::default()).unwrap();
    assert_eq!(r.cases, vec!["free".to_string()]);
    assert!(r.blocks.iter().all(|b| !b.block.contains("a_c") && !b.block.contains('λ')));
    assert!(r.blocks.iter().any(|b| b.block == "∂τ/∂q"));
    assert!(r.passed());
}

#[test]
fn parallelogram_ratio_is_one() {
    let m = load_model("fourbar").unwrap();
    let angles: Vec<f64> = (0..=20).map(|i| -0.5 + 0.06 * i as f64).collect();
    for row in reduction_ratio(&m, "crank", "rocker", &angles).unwrap() {
        assert!(!row.singular);
        assert!((row.ratio - 1.0).abs() < 1e-9, "{row:?}");
    }
}

#[test]
fn knee_ratio_varies_and_flags_the_dead_point() {
    let m = load_model("toybiped").unwrap();
    let angles: Vec<f64> = (0..=90).map(|i| -0.2 + 0.02 * i as f64).collect();
    let rows = reduction_ratio(&m, "l_knee", "l_knee_motor", &angles).unwrap();
    let regular: Vec<f64> = rows.iter().filter(|r| !r.singular && r.angle <= 0.9).map(|r| r.ratio.abs()).collect();
    let (lo, hi) = regular.iter().fold((f64::MAX, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    assert!(hi / lo > 1.2, "ratio range [{lo}, {hi}]");
    // the loop only closes on roughly [-0.13, 1.51]; at both ends the motor
    // angle stops following the knee
    assert!(rows.iter().any(|r| r.singular), "no singular row in the sweep");
    assert!(rows.iter().filter(|r| r.singular).all(|r| r.angle < -0.12 || r.angle > 1.5));
    let edge = reduction_ratio(&m, "l_knee", "l_knee_motor", &[1.3, 1.45, 1.5, 1.508]).unwrap();
    assert!(edge.windows(2).all(|w| w[1].ratio.abs() > w[0].ratio.abs()), "{edge:?}");
}

#[test]
fn trajectory_file_round_trips() {
    let m = load_model("toybiped").unwrap();
    let run = run_task(&m, &TaskConfig::from_toml(POSTURE).unwrap(), &SolverSettings::default()).unwrap();
    let times = run.trajectory.times(&run.problem);
    let file = TrajectoryFile::new(&m, times, run.trajectory.clone());
    let text = write_trajectory(&file);
    let back = parse_trajectory(&text).unwrap();
    assert_eq!(back, file);
    back.check_model(&m).unwrap();
    let other = load_model("parallel-leg").unwrap();
    assert!(back.check_model(&other).is_err());
}

#[test]
fn trajectory_parser_rejects_bad_input() {
    let good = "kinloop-trajectory 1\nmodel p\nhash h\nnq 1\nnv 1\nnu 1\nnodes 2\ndata\n0 0 0.1 0 1.5 0\n1 0.1 0.1 0\n";
    assert!(parse_trajectory(good).is_ok());
    let bad = [
        good.replace("kinloop-trajectory 1", "trajectory"),
        good.replace("nq 1\n", "nq 1\nnq 1\n"),
        good.replace("nu 1\n", "nu 1\ncolor red\n"),
        good.replace("1 0.1 0.1 0\n", "1 -0.1 0.1 0\n"),
        good.replace("1 0.1 0.1 0\n", "2 0.1 0.1 0\n"),
        good.replace("1 0.1 0.1 0\n", "1 0.1 0.1 0 7\n"),
        good.replace("0 0 0.1 0 1.5 0\n", "0 0 0.1 0 1.5 2 1\n"),
        good.replace("0 0 0.1 0 1.5 0\n", "0 0 NaN 0 1.5 0\n"),
        good.replace("nodes 2", "nodes 3"),
        good.replace("nodes 2", "nodes 99999999999"),
        good.replace("data\n", ""),
        String::new(),
    ];
    for text in &bad {
        assert!(matches!(parse_trajectory(text), Err(Error::Parse { .. })), "accepted:\n{text}");
    }
}

#[test]
fn zero_motion_point_compensates_gravity() {
    let m = load_model("toybiped").unwrap();
    let config = TaskConfig::from_toml(POSTURE).unwrap();
    let cmp = compare_serial(&m, &config, 1.0, &SolverSettings::default(), &LiftSettings::default()).unwrap();
    let r = &cmp.record;
    assert!(r.closed_converged && r.serial_converged && r.lift_success, "{r:?}");
    // double support is statically indeterminate and the regularization
    // lets the optimum sag a little, so each control is checked to balance
    // gravity at the start posture up to a small fraction of the load:
    // min over λ of ‖g − S u − Jᵀλ‖ relative to ‖g‖
    let cs = &cmp.closed.problem.stages[0].constraints;
    let q0 = &cmp.closed.problem.x0.q;
    let z = DVector::zeros(m.nv);
    let g = rnea(&m, q0, &z, &z, None).unwrap();
    let (j, _) = cs.stack(&m, &forward_kinematics(&m, q0, &z, &z).unwrap()).unwrap();
    let jt = j.transpose();
    let jt_pinv = jt.clone().pseudo_inverse(1e-10).unwrap();
    let imbalance = |u: &DVector<f64>| {
        let rest = &g - joint_torques(&m, u).unwrap();
        (&rest - &jt * (&jt_pinv * &rest)).norm() / g.norm()
    };
    let worst = cmp.closed.trajectory.us.iter().chain(&cmp.lift.controls).map(imbalance).fold(0.0, f64::max);
    let u0 = static_controls(&m, cs, q0).unwrap();
    assert!(imbalance(&u0) < 1e-9);
    assert!(worst < 1e-2, "controls off gravity compensation by {worst:.3e}");
    let knee = control_indices(&m, KNEE_LABEL).unwrap();
    assert!(knee.iter().all(|&i| u0[i].abs() > 0.1), "the knees carry load");
}

#[test]
fn sweep_records_follow_the_value_order() {
    let m = load_model("toybiped").unwrap();
    let config = TaskConfig::from_toml(POSTURE).unwrap();
    let values = [1.0, 0.97, 0.99];
    let a = sweep_compare(&m, &config, "squat.relative_elevation", &values, &SolverSettings::default(), &LiftSettings::default(), false)
        .unwrap();
    let b = sweep_compare(&m, &config, "squat.relative_elevation", &values, &SolverSettings::default(), &LiftSettings::default(), false)
        .unwrap();
    assert_eq!(a.iter().map(|r| r.value).collect::<Vec<_>>(), values);
    assert_eq!(a, b);
}

#[test]
fn shipped_experiments_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("experiments");
    for (name, variable, continuation) in
        [("squat-depth.toml", "squat.relative_elevation", false), ("walk-velocity.toml", "walk.velocity", true)]
    {
        let e = ExperimentConfig::load(&dir.join(name)).unwrap();
        assert_eq!(e.sweep.variable, variable);
        assert_eq!(e.sweep.continuation, continuation);
        let config = TaskConfig::from_toml(&std::fs::read_to_string(&e.task).unwrap()).unwrap();
        for &v in &e.sweep.values {
            with_value(&config, variable, v).unwrap();
        }
        assert!(e.output.unwrap().starts_with(&dir));
    }
    assert!(ExperimentConfig::from_toml("model = \"toybiped\"\ntask = \"t.toml\"\n[sweep]\nvariable = \"dt\"\nvalues = []\n").is_err());
    assert!(ExperimentConfig::from_toml("model = \"toybiped\"\ntask = \"t.toml\"\nextra = 1\n[sweep]\nvariable = \"dt\"\nvalues = [1]\n").is_err());
}
