//! Weighted least-squares cost terms with analytic Gauss-Newton Jacobians.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::condyn::{DynDerivatives, KktSolution};
use crate::error::Result;
use crate::model::{Model, SerialProjection};
use crate::rba::{
    body_motion_derivatives, center_of_mass, com_jacobian, com_velocity, com_velocity_dq, frame_jacobian,
    frame_velocity, point_column, KinematicsCache,
};
use crate::spatial::{jr3_inv, jr6_inv, log3, log6, Se3};

#[derive(Clone, Debug)]
pub enum Residual {
    /// `x ⊖ x_ref` (tangent difference of q, plain difference of v).
    State { q_ref: DVector<f64>, v_ref: DVector<f64> },
    Control { u_ref: DVector<f64> },
    /// Constraint force of block `index` of the stage's constraint set.
    Force { index: usize, reference: DVector<f64> },
    ComVelocity { reference: Vector3<f64> },
    /// CoM elevation (world z).
    ComHeight { reference: f64 },
    /// CoM forward (world x) position.
    ComForward { reference: f64 },
    /// `Log(M_ref⁻¹ oMf)`.
    FramePlacement { frame: usize, reference: Se3 },
    /// `Log(R_refᵀ R_f)`.
    FrameOrientation { frame: usize, reference: Matrix3<f64> },
    /// Frame spatial velocity in local coordinates.
    FrameVelocity { frame: usize },
    /// Frame elevation minus `reference`.
    FrameHeight { frame: usize, reference: f64 },
    /// `max(0, clearance − z_f)`.
    FlyHigh { frame: usize, clearance: f64 },
    /// `max(0, |u_i| − bound_i)` with sign.
    ControlBounds { bound: DVector<f64> },
    /// Serial coordinates of the closed state against a serial state.
    SerialTracking {
        serial: Box<Model>,
        projection: SerialProjection,
        q_ref: DVector<f64>,
        v_ref: DVector<f64>,
    },
}

impl Residual {
    pub fn kind(&self) -> &'static str {
        match self {
            Residual::State { .. } => "state-reg",
            Residual::Control { .. } => "control-reg",
            Residual::Force { .. } => "force-reg",
            Residual::ComVelocity { .. } => "com-velocity",
            Residual::ComHeight { .. } => "com-elevation",
            Residual::ComForward { .. } => "terminal-forward-displacement",
            Residual::FramePlacement { .. } => "foot-placement",
            Residual::FrameOrientation { .. } => "foot-orientation",
            Residual::FrameVelocity { .. } => "foot-velocity",
            Residual::FrameHeight { .. } => "foot-step-height",
            Residual::FlyHigh { .. } => "fly-high",
            Residual::ControlBounds { .. } => "control-bounds",
            Residual::SerialTracking { .. } => "serial-tracking",
        }
    }

    /// Whether the residual reads the control or the constraint forces, and
    /// therefore cannot sit on a terminal node.
    pub fn needs_control(&self) -> bool {
        matches!(self, Residual::Control { .. } | Residual::Force { .. } | Residual::ControlBounds { .. })
    }
}

#[derive(Clone, Debug)]
pub struct CostTerm {
    pub name: String,
    pub weight: f64,
    /// Per-coordinate weights of the residual (all ones when `None`).
    pub activation: Option<DVector<f64>>,
    pub residual: Residual,
}

impl CostTerm {
    pub fn new(name: impl Into<String>, weight: f64, residual: Residual) -> Self {
        Self { name: name.into(), weight, activation: None, residual }
    }

    pub fn with_activation(mut self, a: DVector<f64>) -> Self {
        self.activation = Some(a);
        self
    }
}

/// Everything a residual can read at one node.
pub struct NodeContext<'a> {
    pub model: &'a Model,
    pub q: &'a DVector<f64>,
    pub v: &'a DVector<f64>,
    pub u: Option<&'a DVector<f64>>,
    /// Built with `(q, v, 0)`.
    pub cache: &'a KinematicsCache,
    pub sol: Option<&'a KktSolution>,
    pub derivatives: Option<&'a DynDerivatives>,
}

/// Residual value and (optionally) its Jacobians.
#[derive(Clone, Debug)]
pub struct ResidualEval {
    pub r: DVector<f64>,
    pub rq: DMatrix<f64>,
    pub rv: DMatrix<f64>,
    pub ru: DMatrix<f64>,
}

fn rows_of(src: &DMatrix<f64>, rows: std::ops::Range<usize>) -> DMatrix<f64> {
    src.rows(rows.start, rows.len()).into_owned()
}

fn vec3(v: &Vector3<f64>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

fn mat<const R: usize>(m: nalgebra::SMatrix<f64, R, R>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, R, m.as_slice())
}

fn frame_point_jacobian(model: &Model, cache: &KinematicsCache, frame: usize) -> DMatrix<f64> {
    let f = &model.frames[frame];
    let p = cache.frame_placements[frame].translation;
    let mut j = DMatrix::zeros(3, model.nv);
    if let Some(b) = f.body {
        for ji in model.support_path(b) {
            let joint = &model.joints[ji];
            for c in joint.idx_v..joint.idx_v + joint.nv() {
                let col = point_column(cache, c, &p);
                j.column_mut(c).copy_from(&col);
            }
        }
    }
    j
}

pub fn evaluate(term: &Residual, ctx: &NodeContext, jac: bool) -> Result<ResidualEval> {
    let model = ctx.model;
    let nv = model.nv;
    let nu = model.nu();
    let zeros = |d: usize| (DMatrix::zeros(d, nv), DMatrix::zeros(d, nv), DMatrix::zeros(d, nu));
    let out = match term {
        Residual::State { q_ref, v_ref } => {
            let dq = model.difference(q_ref, ctx.q)?;
            let r = DVector::from_iterator(2 * nv, dq.iter().chain((ctx.v - v_ref).iter()).cloned());
            let (mut rq, mut rv, ru) = zeros(2 * nv);
            if jac {
                let (_, j2) = model.difference_jacobians(q_ref, ctx.q)?;
                rq.view_mut((0, 0), (nv, nv)).copy_from(&j2);
                rv.view_mut((nv, 0), (nv, nv)).fill_with_identity();
            }
            ResidualEval { r, rq, rv, ru }
        }
        Residual::Control { u_ref } => {
            let u = ctx.u.expect("control residual on a node with control");
            let (rq, rv, _) = zeros(nu);
            ResidualEval { r: u - u_ref, rq, rv, ru: DMatrix::identity(nu, nu) }
        }
        Residual::ControlBounds { bound } => {
            let u = ctx.u.expect("control residual on a node with control");
            let (rq, rv, mut ru) = zeros(nu);
            let mut r = DVector::zeros(nu);
            for i in 0..nu {
                let excess = u[i].abs() - bound[i];
                if excess > 0.0 {
                    r[i] = excess * u[i].signum();
                    ru[(i, i)] = 1.0;
                }
            }
            ResidualEval { r, rq, rv, ru }
        }
        Residual::Force { index, reference } => {
            let sol = ctx.sol.expect("force residual on a node with dynamics");
            let r = sol.lambda.rows(6 * index, 6) - reference;
            let (mut rq, mut rv, mut ru) = zeros(6);
            if jac {
                let d = ctx.derivatives.expect("derivatives requested");
                rq = rows_of(&d.dlambda_dq, 6 * index..6 * index + 6);
                rv = rows_of(&d.dlambda_dv, 6 * index..6 * index + 6);
                ru = rows_of(&d.dlambda_du, 6 * index..6 * index + 6);
            }
            ResidualEval { r, rq, rv, ru }
        }
        Residual::ComVelocity { reference } => {
            let r = vec3(&(com_velocity(model, ctx.cache) - reference));
            let (mut rq, mut rv, ru) = zeros(3);
            if jac {
                rq = com_velocity_dq(model, ctx.cache);
                rv = com_jacobian(model, ctx.cache);
            }
            ResidualEval { r, rq, rv, ru }
        }
        Residual::ComHeight { reference } => {
            let c = center_of_mass(model, ctx.cache);
            let (mut rq, rv, ru) = zeros(1);
            if jac {
                rq = rows_of(&com_jacobian(model, ctx.cache), 2..3);
            }
            ResidualEval { r: DVector::from_element(1, c.z - reference), rq, rv, ru }
        }
        Residual::ComForward { reference } => {
            let c = center_of_mass(model, ctx.cache);
            let (mut rq, rv, ru) = zeros(1);
            if jac {
                rq = rows_of(&com_jacobian(model, ctx.cache), 0..1);
            }
            ResidualEval { r: DVector::from_element(1, c.x - reference), rq, rv, ru }
        }
        Residual::FramePlacement { frame, reference } => {
            let rel = reference.inv_compose(&ctx.cache.frame_placements[*frame]);
            let d = log6(&rel)?;
            let (mut rq, rv, ru) = zeros(6);
            if jac {
                let jinv = mat(jr6_inv(&d));
                rq = jinv * frame_jacobian(model, ctx.cache, *frame);
            }
            ResidualEval { r: DVector::from_column_slice(d.to_vector().as_slice()), rq, rv, ru }
        }
        Residual::FrameOrientation { frame, reference } => {
            let rot = reference.transpose() * ctx.cache.frame_placements[*frame].rotation;
            let w = log3(&rot)?;
            let (mut rq, rv, ru) = zeros(3);
            if jac {
                let j = frame_jacobian(model, ctx.cache, *frame);
                rq = mat(jr3_inv(&w)) * rows_of(&j, 3..6);
            }
            ResidualEval { r: vec3(&w), rq, rv, ru }
        }
        Residual::FrameVelocity { frame } => {
            let nu_f = frame_velocity(model, ctx.cache, *frame);
            let (mut rq, mut rv, ru) = zeros(6);
            if jac {
                let f = &model.frames[*frame];
                let of = ctx.cache.frame_placements[*frame];
                let ov = ctx.cache.body_velocity(f.body);
                let d = body_motion_derivatives(model, ctx.cache, f.body);
                if let Some(b) = f.body {
                    for ji in model.support_path(b) {
                        let joint = &model.joints[ji];
                        for c in joint.idx_v..joint.idx_v + joint.nv() {
                            let w = d.dvel_dq[c] - ctx.cache.columns[c].cross(&ov);
                            rq.column_mut(c).copy_from(&of.inv_act_motion(&w).to_vector());
                        }
                    }
                }
                rv = frame_jacobian(model, ctx.cache, *frame);
            }
            ResidualEval { r: DVector::from_column_slice(nu_f.to_vector().as_slice()), rq, rv, ru }
        }
        Residual::FrameHeight { frame, reference } => {
            let z = ctx.cache.frame_placements[*frame].translation.z;
            let (mut rq, rv, ru) = zeros(1);
            if jac {
                rq = rows_of(&frame_point_jacobian(model, ctx.cache, *frame), 2..3);
            }
            ResidualEval { r: DVector::from_element(1, z - reference), rq, rv, ru }
        }
        Residual::FlyHigh { frame, clearance } => {
            let z = ctx.cache.frame_placements[*frame].translation.z;
            let gap = clearance - z;
            let (mut rq, rv, ru) = zeros(1);
            if gap <= 0.0 {
                return Ok(ResidualEval { r: DVector::zeros(1), rq, rv, ru });
            }
            if jac {
                rq = -rows_of(&frame_point_jacobian(model, ctx.cache, *frame), 2..3);
            }
            ResidualEval { r: DVector::from_element(1, gap), rq, rv, ru }
        }
        Residual::SerialTracking { serial, projection, q_ref, v_ref } => {
            let ns = serial.nv;
            let qs = projection.project_q(ctx.q);
            let vs = projection.project_v(ctx.v);
            let dq = serial.difference(q_ref, &qs)?;
            let r = DVector::from_iterator(2 * ns, dq.iter().chain((vs - v_ref).iter()).cloned());
            let (mut rq, mut rv, ru) = zeros(2 * ns);
            if jac {
                let (_, j2) = serial.difference_jacobians(q_ref, &qs)?;
                for (k, &iv) in projection.v_indices.iter().enumerate() {
                    for row in 0..ns {
                        rq[(row, iv)] = j2[(row, k)];
                    }
                    rv[(ns + k, iv)] = 1.0;
                }
            }
            ResidualEval { r, rq, rv, ru }
        }
    };
    Ok(out)
}

/// Cost value and Gauss-Newton quadratic model of a list of terms.
#[derive(Clone, Debug)]
pub struct CostModel {
    pub value: f64,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

pub fn cost_value(terms: &[CostTerm], ctx: &NodeContext) -> Result<f64> {
    let mut total = 0.0;
    for t in terms {
        let e = evaluate(&t.residual, ctx, false)?;
        total += weighted_square(t, &e.r);
    }
    Ok(total)
}

fn weighted_square(t: &CostTerm, r: &DVector<f64>) -> f64 {
    let s: f64 = match &t.activation {
        Some(a) => r.iter().zip(a.iter()).map(|(x, w)| w * x * x).sum(),
        None => r.norm_squared(),
    };
    0.5 * t.weight * s
}

pub fn cost_model(terms: &[CostTerm], ctx: &NodeContext) -> Result<CostModel> {
    let nv = ctx.model.nv;
    let nu = ctx.model.nu();
    let mut out = CostModel {
        value: 0.0,
        lx: DVector::zeros(2 * nv),
        lu: DVector::zeros(nu),
        lxx: DMatrix::zeros(2 * nv, 2 * nv),
        luu: DMatrix::zeros(nu, nu),
        lux: DMatrix::zeros(nu, 2 * nv),
    };
    for t in terms {
        let e = evaluate(&t.residual, ctx, true)?;
        out.value += weighted_square(t, &e.r);
        let dim = e.r.len();
        let mut rx = DMatrix::zeros(dim, 2 * nv);
        rx.view_mut((0, 0), (dim, nv)).copy_from(&e.rq);
        rx.view_mut((0, nv), (dim, nv)).copy_from(&e.rv);
        let w = match &t.activation {
            Some(a) => a * t.weight,
            None => DVector::from_element(dim, t.weight),
        };
        let wr = e.r.component_mul(&w);
        let wrx = DMatrix::from_fn(dim, 2 * nv, |i, j| rx[(i, j)] * w[i]);
        let wru = DMatrix::from_fn(dim, nu, |i, j| e.ru[(i, j)] * w[i]);
        out.lx += rx.transpose() * &wr;
        out.lu += e.ru.transpose() * &wr;
        out.lxx += rx.transpose() * &wrx;
        out.luu += e.ru.transpose() * &wru;
        out.lux += e.ru.transpose() * &wrx;
    }
    Ok(out)
}
