//! Finite-difference certification of the analytical derivatives, plus the
//! KKT and Gauss-principle checks on the same sampled states.

use kinloop::closure::{acc_derivatives_with, constraint_acceleration, GammaAssembly, DEFAULT_BAUMGARTE};
use kinloop::condyn::{constrained_dynamics_derivatives, constrained_forward_dynamics, project_to_manifold, ConstraintSet};
use kinloop::rba::{forward_kinematics, rnea, rnea_derivatives};
use kinloop::{Error, MechState, Model, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Clone, Debug)]
pub struct CertifySettings {
    pub samples: usize,
    pub seed: u64,
    /// Central-difference step along tangent directions.
    pub step: f64,
    pub tolerance: f64,
    /// Spread of the random configurations around the reference one.
    pub spread: f64,
    pub baumgarte: Option<f64>,
    /// Number of random feasible directions of the Gauss check.
    pub directions: usize,
    pub signs: GammaAssembly,
}

impl Default for CertifySettings {
    fn default() -> Self {
        Self {
            samples: 20,
            seed: 0,
            step: 1e-6,
            tolerance: 1e-5,
            spread: 0.1,
            baumgarte: Some(DEFAULT_BAUMGARTE),
            directions: 100,
            signs: GammaAssembly::default(),
        }
    }
}

/// Support case: a name and the contact frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportCase {
    pub name: String,
    pub contacts: Vec<String>,
}

/// Double and single support for models with `feet`, the bare loops otherwise.
pub fn support_cases(model: &Model) -> Vec<SupportCase> {
    match model.label("feet") {
        Ok(feet) if !feet.is_empty() => vec![
            SupportCase { name: "double".into(), contacts: feet.to_vec() },
            SupportCase { name: "single".into(), contacts: feet[..1].to_vec() },
        ],
        _ if model.closures.is_empty() => vec![SupportCase { name: "free".into(), contacts: Vec::new() }],
        _ => vec![SupportCase { name: "closures".into(), contacts: Vec::new() }],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub case: String,
    pub sample: usize,
    pub block: String,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub case: String,
    pub constraints: ConstraintSet,
    pub state: MechState,
    pub u: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct CertReport {
    pub cases: Vec<String>,
    pub samples: usize,
    /// Worst error of every block over all samples.
    pub blocks: Vec<BlockError>,
    pub kkt_residual: f64,
    pub constraint_error: f64,
    /// Smallest `G(q̈ + d) − G(q̈)` over the feasible directions; negative
    /// values mean the returned acceleration is not the minimizer.
    pub gauss_margin: f64,
    pub tolerance: f64,
}

impl CertReport {
    pub fn worst(&self) -> Option<&BlockError> {
        self.blocks.iter().max_by(|a, b| a.error.total_cmp(&b.error))
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.error < self.tolerance)
    }

    pub fn failing(&self) -> Vec<&BlockError> {
        self.blocks.iter().filter(|b| !(b.error < self.tolerance)).collect()
    }

    /// KKT residual and constraint error below `tol`.
    pub fn kkt_passed(&self, tol: f64) -> bool {
        self.kkt_residual < tol && self.constraint_error < tol
    }

    /// No feasible direction lowers the Gauss function by more than `slack`.
    pub fn gauss_passed(&self, slack: f64) -> bool {
        self.gauss_margin >= -slack
    }
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}

fn fd_config<F: Fn(&DVector<f64>) -> DVector<f64>>(model: &Model, q: &DVector<f64>, h: f64, f: F) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(model.nv);
    for i in 0..model.nv {
        let mut e = DVector::zeros(model.nv);
        e[i] = h;
        let fp = f(&model.integrate(q, &e));
        let fm = f(&model.integrate(q, &(-&e)));
        cols.push((fp - fm) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

fn fd_vector<F: Fn(&DVector<f64>) -> DVector<f64>>(x: &DVector<f64>, h: f64, f: F) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        cols.push((f(&xp) - f(&xm)) / (2.0 * h));
    }
    if cols.is_empty() {
        return DMatrix::zeros(f(x).len(), 0);
    }
    DMatrix::from_columns(&cols)
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Remove the row-space components of `j` from `x`.
fn null_space_part(j: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    if j.nrows() == 0 {
        return x.clone();
    }
    let svd = j.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    let tol = 1e-7 * svd.singular_values.max();
    let mut out = x.clone();
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > tol {
            let row = vt.row(k).transpose();
            out -= &row * row.dot(x);
        }
    }
    out
}

/// A random legal state: configuration on the loops, contacts pinned where
/// the feet are, velocity in the constraint null space.
pub fn sample_state(model: &Model, case: &SupportCase, settings: &CertifySettings, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let loops = ConstraintSet::closures(model);
    let dq = random_vector(rng, model.nv, settings.spread);
    let guess = model.integrate(&model.reference_configuration(), &dq);
    let q = project_to_manifold(model, &loops, &guess)?;
    let feet: Vec<&str> = case.contacts.iter().map(String::as_str).collect();
    let mut cs = ConstraintSet::with_contacts(model, &q, &feet)?;
    cs.baumgarte = settings.baumgarte;
    cs.signs = settings.signs;
    let z = DVector::zeros(model.nv);
    let cache = forward_kinematics(model, &q, &z, &z)?;
    let (j, _) = cs.stack(model, &cache)?;
    let v = null_space_part(&j, &random_vector(rng, model.nv, 1.0));
    let u = random_vector(rng, model.nu(), 2.0);
    Ok(Sample { case: case.name.clone(), constraints: cs, state: MechState::new(q, v), u })
}

/// All sampled states of a certification run, in a fixed order.
pub fn samples(model: &Model, settings: &CertifySettings) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (ci, case) in support_cases(model).iter().enumerate() {
        for i in 0..settings.samples {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_mul(1_000_003) ^ ((ci as u64) << 32 | i as u64));
            out.push(sample_state(model, case, settings, &mut rng)?);
        }
    }
    Ok(out)
}

struct SampleResult {
    blocks: Vec<(String, f64)>,
    kkt: f64,
    constraint: f64,
    gauss: f64,
}

fn check_sample(model: &Model, s: &Sample, settings: &CertifySettings, seed: u64) -> Result<SampleResult> {
    let h = settings.step;
    let (x, u, cs) = (&s.state, &s.u, &s.constraints);
    let mut blocks = Vec::new();

    // inverse dynamics
    let a = constrained_forward_dynamics(model, cs, &x.q, &x.v, u)?.qdd;
    let rd = rnea_derivatives(model, &x.q, &x.v, &a, None)?;
    let tau = |q: &DVector<f64>, v: &DVector<f64>, a: &DVector<f64>| rnea(model, q, v, a, None).expect("valid state");
    blocks.push(("∂τ/∂q".to_string(), rel_err(&rd.dtau_dq, &fd_config(model, &x.q, h, |q| tau(q, &x.v, &a)))));
    blocks.push(("∂τ/∂v".to_string(), rel_err(&rd.dtau_dv, &fd_vector(&x.v, h, |v| tau(&x.q, v, &a)))));
    blocks.push(("∂τ/∂a".to_string(), rel_err(&rd.dtau_da, &fd_vector(&a, h, |a| tau(&x.q, &x.v, a)))));

    // constraint accelerations at fixed q̈
    let cache = forward_kinematics(model, &x.q, &x.v, &a)?;
    let (mut eq, mut ev) = (0.0f64, 0.0f64);
    for c in &cs.constraints {
        let acc = |q: &DVector<f64>, v: &DVector<f64>| {
            let cache = forward_kinematics(model, q, v, &a).expect("valid state");
            DVector::from_column_slice(constraint_acceleration(&cache, c).to_vector().as_slice())
        };
        let (dq, dv) = acc_derivatives_with(model, &cache, c, cs.signs);
        eq = eq.max(rel_err(&dq, &fd_config(model, &x.q, h, |q| acc(q, &x.v))));
        ev = ev.max(rel_err(&dv, &fd_vector(&x.v, h, |v| acc(&x.q, v))));
    }
    if !cs.constraints.is_empty() {
        blocks.push(("∂a_c/∂q".to_string(), eq));
        blocks.push(("∂a_c/∂v".to_string(), ev));
    }

    // constrained dynamics
    let sol = constrained_forward_dynamics(model, cs, &x.q, &x.v, u)?;
    let names_qdd = ["∂q̈/∂q", "∂q̈/∂v", "∂q̈/∂u"];
    let names_lambda = ["∂λ/∂q", "∂λ/∂v", "∂λ/∂u"];
    let constrained = !cs.constraints.is_empty();
    match constrained_dynamics_derivatives(model, cs, &sol) {
        Ok(d) => {
            let nq = sol.qdd.len();
            let both = |q: &DVector<f64>, v: &DVector<f64>, u: &DVector<f64>| {
                let s = constrained_forward_dynamics(model, cs, q, v, u).expect("valid state");
                DVector::from_iterator(nq + s.lambda.len(), s.qdd.iter().chain(s.lambda.iter()).cloned())
            };
            let split = |m: DMatrix<f64>| (m.rows(0, nq).into_owned(), m.rows(nq, m.nrows() - nq).into_owned());
            let (fq, lq) = split(fd_config(model, &x.q, h, |q| both(q, &x.v, u)));
            let (fv, lv) = split(fd_vector(&x.v, h, |v| both(&x.q, v, u)));
            let (fu, lu) = split(fd_vector(u, h, |u| both(&x.q, &x.v, u)));
            let qdd = [rel_err(&d.dqdd_dq, &fq), rel_err(&d.dqdd_dv, &fv), rel_err(&d.dqdd_du, &fu)];
            let lam = [rel_err(&d.dlambda_dq, &lq), rel_err(&d.dlambda_dv, &lv), rel_err(&d.dlambda_du, &lu)];
            blocks.extend(names_qdd.iter().zip(qdd).map(|(n, e)| (n.to_string(), e)));
            if constrained {
                blocks.extend(names_lambda.iter().zip(lam).map(|(n, e)| (n.to_string(), e)));
            }
        }
        // derivatives assembled from wrong pieces can leave the KKT system
        // without a solution; that fails every dependent block
        Err(Error::RankDeficient { .. }) => {
            blocks.extend(names_qdd.iter().map(|n| (n.to_string(), f64::INFINITY)));
            if constrained {
                blocks.extend(names_lambda.iter().map(|n| (n.to_string(), f64::INFINITY)));
            }
        }
        Err(e) => return Err(e),
    }

    // Gauss: q̈ minimizes ‖q̈ − q̈_free‖²_M over J q̈ = −a₀
    let free = sol.free_acceleration();
    let m = sol.mass();
    let g = |a: &DVector<f64>| {
        let e = a - &free;
        e.dot(&(m * &e))
    };
    let g0 = g(&sol.qdd);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = f64::INFINITY;
    for _ in 0..settings.directions {
        let dir = null_space_part(sol.jacobian(), &random_vector(&mut rng, model.nv, 1.0));
        let dir = match dir.norm() {
            n if n > 1e-12 => dir / n,
            _ => continue,
        };
        for eps in [1e-3, 1e-1, 1.0] {
            gauss = gauss.min(g(&(&sol.qdd + &dir * eps)) - g0);
        }
    }

    Ok(SampleResult { blocks, kkt: sol.kkt_residual(), constraint: sol.constraint_error(), gauss })
}

pub fn certify(model: &Model, settings: &CertifySettings) -> Result<CertReport> {
    let all = samples(model, settings)?;
    let cases = support_cases(model).into_iter().map(|c| c.name).collect();
    let results: Vec<SampleResult> = all
        .par_iter()
        .enumerate()
        .map(|(i, s)| check_sample(model, s, settings, settings.seed ^ (i as u64 + 1)))
        .collect::<Result<_>>()?;
    let mut blocks: Vec<BlockError> = Vec::new();
    let mut report = CertReport {
        cases,
        samples: settings.samples,
        blocks: Vec::new(),
        kkt_residual: 0.0,
        constraint_error: 0.0,
        gauss_margin: f64::INFINITY,
        tolerance: settings.tolerance,
    };
    for (i, (s, r)) in all.iter().zip(&results).enumerate() {
        for (name, e) in &r.blocks {
            let sample = i % settings.samples.max(1);
            match blocks.iter_mut().find(|b| &b.block == name) {
                Some(b) if b.error >= *e && !e.is_nan() => {}
                Some(b) => *b = BlockError { case: s.case.clone(), sample, block: name.clone(), error: *e },
                None => blocks.push(BlockError { case: s.case.clone(), sample, block: name.clone(), error: *e }),
            }
        }
        report.kkt_residual = report.kkt_residual.max(r.kkt);
        report.constraint_error = report.constraint_error.max(r.constraint);
        report.gauss_margin = report.gauss_margin.min(r.gauss);
    }
    report.blocks = blocks;
    Ok(report)
}
