mod common;

use common::*;
use kinloop::model::load_model;
use kinloop::rba::*;
use kinloop::spatial::Force;
use nalgebra::{DMatrix, DVector};

const H: f64 = 1e-6;

fn local_forces(n: usize, seed: u64) -> Vec<Force> {
    let mut r = rng(seed);
    (0..n).map(|_| Force::from_vector(&random_vector(&mut r, 6, 5.0).fixed_rows::<6>(0).into())).collect()
}

#[test]
fn rnea_derivatives_match_finite_differences() {
    for name in ["fourbar", "toybiped", "parallel-leg"] {
        let m = load_model(name).unwrap();
        let mut r = rng(7);
        for trial in 0..3 {
            let q = random_configuration(&m, &mut r, 0.3);
            let v = random_vector(&mut r, m.nv, 1.0);
            let a = random_vector(&mut r, m.nv, 1.0);
            let fext = local_forces(m.joints.len(), trial);
            let d = rnea_derivatives(&m, &q, &v, &a, Some(&fext)).unwrap();
            let fq = fd_config(&m, &q, H, |q| rnea(&m, q, &v, &a, Some(&fext)).unwrap());
            let fv = fd_vector(&v, H, |v| rnea(&m, &q, v, &a, Some(&fext)).unwrap());
            let fa = fd_vector(&a, H, |a| rnea(&m, &q, &v, a, Some(&fext)).unwrap());
            assert!(rel_err(&d.dtau_dq, &fq) < 1e-6, "{name} dq {}", rel_err(&d.dtau_dq, &fq));
            assert!(rel_err(&d.dtau_dv, &fv) < 1e-6, "{name} dv {}", rel_err(&d.dtau_dv, &fv));
            assert!(rel_err(&d.dtau_da, &fa) < 1e-6, "{name} da {}", rel_err(&d.dtau_da, &fa));
        }
    }
}

#[test]
fn crba_is_symmetric_positive_definite() {
    let m = load_model("toybiped").unwrap();
    let mut r = rng(3);
    for _ in 0..10 {
        let q = random_configuration(&m, &mut r, 0.5);
        let mm = joint_space_inertia(&m, &q).unwrap();
        assert!((&mm - mm.transpose()).amax() < 1e-14);
        assert!(mm.clone().cholesky().is_some());
    }
}

#[test]
fn external_force_enters_as_jacobian_transpose() {
    let m = load_model("toybiped").unwrap();
    let mut r = rng(11);
    let q = random_configuration(&m, &mut r, 0.3);
    let z = DVector::zeros(m.nv);
    let foot = m.body_index("l_foot").unwrap();
    let mut fext = vec![Force::zero(); m.joints.len()];
    let phi = Force::from_vector(&nalgebra::Vector6::new(1.0, -2.0, 3.0, 0.5, -0.3, 0.2));
    fext[foot] = phi;
    let t1 = rnea(&m, &q, &z, &z, Some(&fext)).unwrap();
    let t0 = rnea(&m, &q, &z, &z, None).unwrap();
    let cache = forward_kinematics(&m, &q, &z, &z).unwrap();
    // local Jacobian of the foot body frame
    let jw = body_world_jacobian(&m, &cache, Some(foot));
    let x = cache.placements[foot].inverse().action_matrix();
    let jl: DMatrix<f64> = DMatrix::from_fn(6, 6, |i, j| x[(i, j)]) * jw;
    let expect = jl.transpose() * phi.to_vector();
    assert!(((t1 - t0) - expect).amax() < 1e-12);
}

#[test]
fn com_quantities_match_finite_differences() {
    let m = load_model("toybiped").unwrap();
    let mut r = rng(5);
    let q = random_configuration(&m, &mut r, 0.3);
    let v = random_vector(&mut r, m.nv, 1.0);
    let z = DVector::zeros(m.nv);
    let com = |q: &DVector<f64>| {
        let c = forward_kinematics(&m, q, &z, &z).unwrap();
        DVector::from_column_slice(center_of_mass(&m, &c).as_slice())
    };
    let vcom = |q: &DVector<f64>| {
        let c = forward_kinematics(&m, q, &v, &z).unwrap();
        DVector::from_column_slice(com_velocity(&m, &c).as_slice())
    };
    let cache = forward_kinematics(&m, &q, &v, &z).unwrap();
    let jc = com_jacobian(&m, &cache);
    assert!(rel_err(&jc, &fd_config(&m, &q, H, com)) < 1e-7);
    assert!(rel_err(&com_velocity_dq(&m, &cache), &fd_config(&m, &q, H, vcom)) < 1e-7);
    let vc = com_velocity(&m, &cache);
    assert!(((&jc * &v) - DVector::from_column_slice(vc.as_slice())).amax() < 1e-12);
}

#[test]
fn body_motion_derivatives_match_finite_differences() {
    let m = load_model("fourbar").unwrap();
    let mut r = rng(9);
    let q = random_configuration(&m, &mut r, 0.4);
    let v = random_vector(&mut r, m.nv, 1.0);
    let a = random_vector(&mut r, m.nv, 1.0);
    let body = Some(m.body_index("coupler_a").unwrap());
    let vel = |q: &DVector<f64>, v: &DVector<f64>| {
        let c = forward_kinematics(&m, q, v, &a).unwrap();
        DVector::from_column_slice(c.body_velocity(body).to_vector().as_slice())
    };
    let acc = |q: &DVector<f64>, v: &DVector<f64>| {
        let c = forward_kinematics(&m, q, v, &a).unwrap();
        DVector::from_column_slice(c.body_acceleration(body).to_vector().as_slice())
    };
    let cache = forward_kinematics(&m, &q, &v, &a).unwrap();
    let d = body_motion_derivatives(&m, &cache, body);
    let stack = |ms: &[kinloop::spatial::Motion]| DMatrix::from_fn(6, m.nv, |i, j| ms[j].to_vector()[i]);
    let fq = fd_config(&m, &q, H, |q| vel(q, &v));
    assert!(rel_err(&stack(&d.dvel_dq), &fq) < 1e-7);
    let fq = fd_config(&m, &q, H, |q| acc(q, &v));
    assert!(rel_err(&stack(&d.dacc_dq), &fq) < 1e-7);
    let fv = fd_vector(&v, H, |v| vel(&q, v));
    assert!(rel_err(&stack(&d.dvel_dv), &fv) < 1e-7);
    let fv = fd_vector(&v, H, |v| acc(&q, v));
    assert!(rel_err(&stack(&d.dacc_dv), &fv) < 1e-7);
}

#[test]
fn pendulum_energy_is_conserved() {
    let m = load_model("pendulum").unwrap();
    let dt = 1e-4;
    let mut q = DVector::from_element(1, 0.1);
    let mut v = DVector::zeros(1);
    let u = DVector::zeros(1);
    let e0 = kinetic_energy(&m, &q, &v).unwrap() + potential_energy(&m, &q).unwrap();
    let mut drift: f64 = 0.0;
    for _ in 0..20000 {
        let a = forward_dynamics(&m, &q, &v, &u).unwrap();
        v += a * dt;
        q = m.integrate(&q, &(&v * dt));
        let e = kinetic_energy(&m, &q, &v).unwrap() + potential_energy(&m, &q).unwrap();
        drift = drift.max((e - e0).abs());
    }
    assert!(drift < 1e-3, "{drift}");
}
