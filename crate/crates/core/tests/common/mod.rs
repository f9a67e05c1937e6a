#![allow(dead_code)]

use kinloop::Model;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Random configuration around the reference configuration.
pub fn random_configuration(model: &Model, rng: &mut ChaCha8Rng, scale: f64) -> DVector<f64> {
    let q0 = model.reference_configuration();
    let dq = random_vector(rng, model.nv, scale);
    model.integrate(&q0, &dq)
}

/// Central difference of `f` along tangent directions of q.
pub fn fd_config<F>(model: &Model, q: &DVector<f64>, h: f64, f: F) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let f0 = f(q);
    let mut out = DMatrix::zeros(f0.len(), model.nv);
    for i in 0..model.nv {
        let mut e = DVector::zeros(model.nv);
        e[i] = h;
        let fp = f(&model.integrate(q, &e));
        let fm = f(&model.integrate(q, &(-&e)));
        out.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    out
}

/// Central difference of `f` in a vector space.
pub fn fd_vector<F>(x: &DVector<f64>, h: f64, f: F) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let f0 = f(x);
    let mut out = DMatrix::zeros(f0.len(), x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        out.set_column(i, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    out
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}
