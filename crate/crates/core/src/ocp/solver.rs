//! Gauss-Newton FDDP: feasibility-driven DDP with gap contraction in the
//! line search.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{state_difference, state_integrate, ShootingProblem, StageData, StageDerivatives, Trajectory};
use crate::error::{Error, Result};
use crate::model::MechState;

#[derive(Clone, Debug)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Stop when the expected decrease `Σ Quᵀk` falls below
    /// `tolerance · max(1, cost)` and the gaps are closed.
    pub tolerance: f64,
    /// Gaps count as closed when their summed max-norm is below this.
    pub gap_tolerance: f64,
    pub initial_regularization: f64,
    pub max_regularization: f64,
    /// Smallest line-search step before the regularization is raised.
    pub min_step: f64,
    /// Armijo acceptance ratio.
    pub armijo: f64,
    /// Worker threads for stage derivatives (0 = rayon default).
    pub workers: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-8,
            gap_tolerance: 1e-9,
            initial_regularization: 1e-9,
            max_regularization: 1e9,
            min_step: 1.0 / 1024.0,
            armijo: 0.1,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseTiming {
    pub rollout: Duration,
    pub derivatives: Duration,
    pub backward: Duration,
}

impl PhaseTiming {
    pub fn total(&self) -> Duration {
        self.rollout + self.derivatives + self.backward
    }

    fn add(&mut self, o: &PhaseTiming) {
        self.rollout += o.rollout;
        self.derivatives += o.derivatives;
        self.backward += o.backward;
    }
}

#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub cost: f64,
    pub step: f64,
    pub regularization: f64,
    pub decrement: f64,
    pub gap: f64,
    pub timing: PhaseTiming,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    /// Cost of every dynamically feasible accepted iterate (the initial guess
    /// included when it is feasible).
    pub costs: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub timing: PhaseTiming,
    pub final_gap: f64,
    pub message: String,
}

impl SolveReport {
    pub fn final_cost(&self) -> f64 {
        *self.costs.last().unwrap_or(&f64::NAN)
    }

    /// Whether the accepted cost sequence never increases (beyond round-off).
    pub fn is_monotone(&self) -> bool {
        self.costs.windows(2).all(|w| w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()))
    }

    /// Mean wall time per iteration.
    pub fn time_per_iteration(&self) -> Duration {
        if self.history.is_empty() {
            return Duration::ZERO;
        }
        self.timing.total() / self.history.len() as u32
    }

    /// Mean wall time per iteration, split by phase.
    pub fn timing_per_iteration(&self) -> PhaseTiming {
        let n = self.history.len().max(1) as u32;
        PhaseTiming {
            rollout: self.timing.rollout / n,
            derivatives: self.timing.derivatives / n,
            backward: self.timing.backward / n,
        }
    }
}

struct Iterate {
    xs: Vec<MechState>,
    us: Vec<DVector<f64>>,
    data: Vec<StageData>,
    /// `gaps[k] = f(x[k−1], u[k−1]) ⊖ x[k]`, `gaps[0] = x0 ⊖ x[0]`.
    gaps: Vec<DVector<f64>>,
    cost: f64,
}

struct Backward {
    k: Vec<DVector<f64>>,
    gain: Vec<DMatrix<f64>>,
    qu: Vec<DVector<f64>>,
    quu: Vec<DMatrix<f64>>,
    vx: Vec<DVector<f64>>,
    vxx: Vec<DMatrix<f64>>,
}

fn gap_norm(gaps: &[DVector<f64>]) -> f64 {
    gaps.iter().map(|g| g.amax()).sum()
}

fn evaluate(problem: &ShootingProblem, xs: Vec<MechState>, us: Vec<DVector<f64>>) -> Result<Iterate> {
    let n = problem.horizon();
    let mut data = Vec::with_capacity(n);
    let mut gaps = vec![state_difference(&problem.model, &xs[0], &problem.x0)?];
    let mut cost = 0.0;
    for k in 0..n {
        let d = problem.stage_calc(k, &xs[k], &us[k])?;
        cost += d.cost;
        gaps.push(state_difference(&problem.model, &xs[k + 1], &d.next)?);
        data.push(d);
    }
    cost += problem.terminal_cost(&xs[n])?;
    Ok(Iterate { xs, us, data, gaps, cost })
}

/// Forward pass with step `alpha`; gaps of the current iterate shrink by `1 − alpha`.
fn forward_pass(problem: &ShootingProblem, it: &Iterate, bw: &Backward, alpha: f64) -> Result<Iterate> {
    let n = problem.horizon();
    let model = &problem.model;
    let mut xs = Vec::with_capacity(n + 1);
    let mut us = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n);
    let mut gaps = Vec::with_capacity(n + 1);
    let x0 = state_integrate(model, &it.xs[0], &(&it.gaps[0] * alpha));
    gaps.push(state_difference(model, &x0, &problem.x0)?);
    xs.push(x0);
    let mut cost = 0.0;
    for k in 0..n {
        let dx = state_difference(model, &it.xs[k], &xs[k])?;
        let u = &it.us[k] - &bw.k[k] * alpha - &bw.gain[k] * dx;
        let d = problem.stage_calc(k, &xs[k], &u)?;
        if !d.cost.is_finite() {
            return Err(Error::InvalidTask("non-finite cost in forward pass".into()));
        }
        cost += d.cost;
        let next = state_integrate(model, &d.next, &(&it.gaps[k + 1] * (alpha - 1.0)));
        gaps.push(state_difference(model, &next, &d.next)?);
        xs.push(next);
        us.push(u);
        data.push(d);
    }
    cost += problem.terminal_cost(&xs[n])?;
    if !cost.is_finite() {
        return Err(Error::InvalidTask("non-finite cost in forward pass".into()));
    }
    Ok(Iterate { xs, us, data, gaps, cost })
}

fn backward_pass(
    problem: &ShootingProblem,
    it: &Iterate,
    ders: &[StageDerivatives],
    terminal: &super::costs::CostModel,
    mu: f64,
) -> Option<Backward> {
    let n = problem.horizon();
    let ndx = 2 * problem.model.nv;
    let nu = problem.model.nu();
    let mut bw = Backward {
        k: vec![DVector::zeros(nu); n],
        gain: vec![DMatrix::zeros(nu, ndx); n],
        qu: vec![DVector::zeros(nu); n],
        quu: vec![DMatrix::zeros(nu, nu); n],
        vx: vec![DVector::zeros(ndx); n + 1],
        vxx: vec![DMatrix::zeros(ndx, ndx); n + 1],
    };
    bw.vx[n] = terminal.lx.clone();
    bw.vxx[n] = terminal.lxx.clone();
    for t in (0..n).rev() {
        let d = &ders[t];
        let mut vxx_p = bw.vxx[t + 1].clone();
        for i in 0..ndx {
            vxx_p[(i, i)] += mu;
        }
        let vx_p = &bw.vx[t + 1] + &bw.vxx[t + 1] * &it.gaps[t + 1];
        let fxt = d.fx.transpose();
        let fut = d.fu.transpose();
        let qx = &d.cost.lx + &fxt * &vx_p;
        let qu = &d.cost.lu + &fut * &vx_p;
        let vxx_fx = &vxx_p * &d.fx;
        let qxx = &d.cost.lxx + &fxt * &vxx_fx;
        let qux = &d.cost.lux + &fut * &vxx_fx;
        let mut quu = &d.cost.luu + &fut * &vxx_p * &d.fu;
        for i in 0..nu {
            quu[(i, i)] += mu;
        }
        let chol = quu.clone().cholesky()?;
        let k = chol.solve(&qu);
        let gain = chol.solve(&qux);
        let vx = &qx - gain.transpose() * &qu;
        let mut vxx = &qxx - qux.transpose() * &gain;
        vxx = (&vxx + vxx.transpose()) * 0.5;
        if !vx.iter().all(|x| x.is_finite()) || !vxx.iter().all(|x| x.is_finite()) {
            return None;
        }
        bw.k[t] = k;
        bw.gain[t] = gain;
        bw.qu[t] = qu;
        bw.quu[t] = quu;
        bw.vx[t] = vx;
        bw.vxx[t] = vxx;
    }
    Some(bw)
}

/// Expected cost decrease for step `alpha` (first- and second-order terms).
fn expected(problem: &ShootingProblem, it: &Iterate, trial: &Iterate, bw: &Backward) -> Result<(f64, f64)> {
    let mut dg = 0.0;
    let mut dq = 0.0;
    for t in 0..problem.horizon() {
        dg += bw.qu[t].dot(&bw.k[t]);
        dq -= bw.k[t].dot(&(&bw.quu[t] * &bw.k[t]));
    }
    if gap_norm(&it.gaps) > 0.0 {
        for t in 0..=problem.horizon() {
            let dx = state_difference(&problem.model, &trial.xs[t], &it.xs[t])?;
            let f = &it.gaps[t];
            dg -= bw.vx[t].dot(f);
            dq += f.dot(&(&bw.vxx[t] * dx));
        }
    }
    Ok((dg, dq))
}

fn derivatives(
    problem: &ShootingProblem,
    it: &Iterate,
    pool: &rayon::ThreadPool,
) -> Result<(Vec<StageDerivatives>, super::costs::CostModel)> {
    let n = problem.horizon();
    let ders: Result<Vec<StageDerivatives>> = pool.install(|| {
        (0..n).into_par_iter().map(|k| problem.stage_diff(k, &it.xs[k], &it.data[k])).collect()
    });
    Ok((ders?, problem.terminal_diff(&it.xs[n])?))
}

/// Solve from an initial guess. An empty `xs` guess repeats `x0` at every
/// node (gaps are closed by the first full step); an empty `us` guess means
/// quasi-static controls.
pub fn solve(
    problem: &ShootingProblem,
    xs_init: &[MechState],
    us_init: &[DVector<f64>],
    settings: &SolverSettings,
) -> Result<(Trajectory, SolveReport)> {
    problem.validate()?;
    let n = problem.horizon();
    let us = if us_init.is_empty() { problem.quasi_static_controls()? } else { us_init.to_vec() };
    if us.len() != n {
        return Err(Error::Dimension { what: "initial controls", expected: n, got: us.len() });
    }
    let mut timing = PhaseTiming::default();
    let t0 = Instant::now();
    let mut it = if xs_init.is_empty() {
        evaluate(problem, vec![problem.x0.clone(); n + 1], us)?
    } else {
        if xs_init.len() != n + 1 {
            return Err(Error::Dimension { what: "initial states", expected: n + 1, got: xs_init.len() });
        }
        for x in xs_init {
            problem.model.check_state(x)?;
        }
        let mut xs = xs_init.to_vec();
        xs[0] = problem.x0.clone();
        evaluate(problem, xs, us)?
    };
    timing.rollout += t0.elapsed();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers)
        .build()
        .map_err(|e| Error::InvalidTask(format!("thread pool: {e}")))?;

    let mut report = SolveReport {
        converged: false,
        iterations: 0,
        costs: Vec::new(),
        history: Vec::new(),
        timing: PhaseTiming::default(),
        final_gap: gap_norm(&it.gaps),
        message: String::new(),
    };
    if report.final_gap < settings.gap_tolerance {
        report.costs.push(it.cost);
    }
    if n == 0 {
        report.converged = true;
        report.timing = timing;
        report.message = "empty horizon".into();
        return Ok((finish(it), report));
    }

    let mut mu = settings.initial_regularization;
    let mut need_diff = true;
    let mut ders = Vec::new();
    let mut terminal = None;
    while report.iterations < settings.max_iterations {
        let mut iter_time = PhaseTiming::default();
        if need_diff {
            let t = Instant::now();
            let (d, term) = derivatives(problem, &it, &pool)?;
            ders = d;
            terminal = Some(term);
            iter_time.derivatives += t.elapsed();
            need_diff = false;
        }
        let t = Instant::now();
        let bw = backward_pass(problem, &it, &ders, terminal.as_ref().unwrap(), mu);
        iter_time.backward += t.elapsed();
        let Some(bw) = bw else {
            mu *= 10.0;
            timing.add(&iter_time);
            if mu > settings.max_regularization {
                report.message = "backward pass failed at maximum regularization".into();
                break;
            }
            continue;
        };
        let decrement: f64 = (0..n).map(|t| bw.qu[t].dot(&bw.k[t])).sum();
        let gap = gap_norm(&it.gaps);
        if decrement.abs() < settings.tolerance * it.cost.max(1.0) && gap < settings.gap_tolerance {
            report.converged = true;
            report.message = "converged".into();
            timing.add(&iter_time);
            break;
        }

        let t = Instant::now();
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= settings.min_step {
            if let Ok(trial) = forward_pass(problem, &it, &bw, alpha) {
                let (dg, dq) = expected(problem, &it, &trial, &bw)?;
                let exp = alpha * (dg + 0.5 * alpha * dq);
                let actual = it.cost - trial.cost;
                let feasible_now = gap_norm(&it.gaps) < settings.gap_tolerance;
                // while gaps are open the model is not a descent predictor:
                // any decrease is taken, and a predicted increase may be at
                // most doubled
                let ok = if feasible_now {
                    exp > 0.0 && actual >= settings.armijo * exp
                } else if exp > 0.0 {
                    actual > 0.0
                } else {
                    actual >= 2.0 * exp
                };
                if ok && (trial.cost <= it.cost || !feasible_now) {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        iter_time.rollout += t.elapsed();
        timing.add(&iter_time);

        match accepted {
            Some(trial) => {
                it = trial;
                need_diff = true;
                report.iterations += 1;
                if gap_norm(&it.gaps) < settings.gap_tolerance {
                    report.costs.push(it.cost);
                }
                report.history.push(IterationRecord {
                    cost: it.cost,
                    step: alpha,
                    regularization: mu,
                    decrement,
                    gap: gap_norm(&it.gaps),
                    timing: iter_time,
                });
                if alpha == 1.0 {
                    mu = (mu / 10.0).max(settings.initial_regularization);
                }
            }
            None => {
                mu *= 10.0;
                if mu > settings.max_regularization {
                    report.message = "line search failed at maximum regularization".into();
                    break;
                }
            }
        }
    }
    if !report.converged && report.message.is_empty() {
        report.message = "iteration limit reached".into();
    }
    report.final_gap = gap_norm(&it.gaps);
    report.timing = timing;
    Ok((finish(it), report))
}

fn finish(it: Iterate) -> Trajectory {
    let lambdas = it.data.iter().map(|d| d.sol.lambda.clone()).collect();
    Trajectory { xs: it.xs, us: it.us, lambdas }
}
