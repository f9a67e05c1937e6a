//! Kinematic tree, closure pairs and configuration-space operations.
//!
//! Joint `i` moves body `i`; the parent of a joint is a body index or the
//! world. Joints are kept in document order and every parent precedes its
//! children, so forward passes are plain index loops.

mod document;
mod serial;

pub use document::{load_model, load_model_str, model_hash, BUNDLED_MODELS};
pub use serial::{build_serial_approximation, SerialProjection};

use nalgebra::{DVector, UnitQuaternion, Vector3};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::spatial::{exp6, log6, Inertia, Motion, Se3};

/// Tolerance on quaternion norms in configurations and documents.
pub const QUATERNION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum JointKind {
    /// Rotation about a unit axis expressed in the joint frame.
    Revolute { axis: Vector3<f64> },
    /// Six-dof root joint; q = (x, y, z, qx, qy, qz, qw), v = local twist.
    FreeFlyer,
}

impl JointKind {
    pub fn nq(&self) -> usize {
        match self {
            JointKind::Revolute { .. } => 1,
            JointKind::FreeFlyer => 7,
        }
    }

    pub fn nv(&self) -> usize {
        match self {
            JointKind::Revolute { .. } => 1,
            JointKind::FreeFlyer => 6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    /// Parent body, `None` for the world.
    pub parent: Option<usize>,
    /// Placement of the joint frame in the parent body frame.
    pub placement: Se3,
    pub actuated: bool,
    pub idx_q: usize,
    pub idx_v: usize,
    /// Nominal configuration used to seed projections.
    pub q0: Vec<f64>,
    /// Symmetric effort bound for actuated joints, if declared.
    pub effort: Option<f64>,
}

impl Joint {
    pub fn nq(&self) -> usize {
        self.kind.nq()
    }
    pub fn nv(&self) -> usize {
        self.kind.nv()
    }
}

#[derive(Clone, Debug)]
pub struct Body {
    pub name: String,
    pub inertia: Inertia,
}

/// Operational frame rigidly attached to a body (or to the world).
#[derive(Clone, Debug)]
pub struct Frame {
    pub name: String,
    pub body: Option<usize>,
    pub placement: Se3,
}

/// A 6D loop-closure pair between two frames.
#[derive(Clone, Debug)]
pub struct ClosurePair {
    pub name: String,
    pub frame1: usize,
    pub frame2: usize,
}

/// Linkage joints that are frozen when building the approximate serial model.
#[derive(Clone, Debug, Default)]
pub struct SerialChain {
    pub linkage: Vec<String>,
    /// Labels renamed for the serial model, e.g. a knee motor label pointing
    /// at the knee joint once the transmission is removed.
    pub relabel: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub name: String,
    pub joints: Vec<Joint>,
    pub bodies: Vec<Body>,
    pub frames: Vec<Frame>,
    pub closures: Vec<ClosurePair>,
    /// Tangent indices driven by the controls, in control order.
    pub actuation: Vec<usize>,
    pub gravity: Vector3<f64>,
    pub nq: usize,
    pub nv: usize,
    pub serial: Option<SerialChain>,
    /// Named groups of frames/joints used by tasks (feet, knee motors, ...).
    pub labels: BTreeMap<String, Vec<String>>,
    /// Hex digest of the source document.
    pub hash: String,
}

/// Configuration and tangent velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct MechState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl MechState {
    pub fn new(q: DVector<f64>, v: DVector<f64>) -> Self {
        Self { q, v }
    }

    pub fn at_rest(q: DVector<f64>, nv: usize) -> Self {
        Self { q, v: DVector::zeros(nv) }
    }
}

impl Model {
    pub fn nu(&self) -> usize {
        self.actuation.len()
    }

    pub fn joint_index(&self, name: &str) -> Result<usize> {
        self.joints
            .iter()
            .position(|j| j.name == name)
            .ok_or_else(|| Error::DanglingReference { kind: "joint", name: name.into() })
    }

    pub fn body_index(&self, name: &str) -> Result<usize> {
        self.bodies
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::DanglingReference { kind: "body", name: name.into() })
    }

    pub fn frame_index(&self, name: &str) -> Result<usize> {
        self.frames
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::DanglingReference { kind: "frame", name: name.into() })
    }

    pub fn label(&self, key: &str) -> Result<&[String]> {
        self.labels
            .get(key)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::DanglingReference { kind: "label", name: key.into() })
    }

    /// Position of tangent index `iv` in the control vector.
    pub fn control_index(&self, iv: usize) -> Option<usize> {
        self.actuation.iter().position(|&a| a == iv)
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.inertia.mass).sum()
    }

    pub fn has_free_flyer(&self) -> bool {
        self.joints.first().map(|j| j.kind == JointKind::FreeFlyer).unwrap_or(false)
    }

    /// True if body `ancestor` supports body `body` (or equals it).
    pub fn supports(&self, ancestor: usize, body: usize) -> bool {
        let mut b = Some(body);
        while let Some(i) = b {
            if i == ancestor {
                return true;
            }
            if i < ancestor {
                return false;
            }
            b = self.joints[i].parent;
        }
        false
    }

    /// Joint indices from the root down to `body`.
    pub fn support_path(&self, body: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut b = Some(body);
        while let Some(i) = b {
            path.push(i);
            b = self.joints[i].parent;
        }
        path.reverse();
        path
    }

    /// Configuration assembled from each joint's nominal value.
    pub fn reference_configuration(&self) -> DVector<f64> {
        let mut q = DVector::zeros(self.nq);
        for j in &self.joints {
            q.rows_mut(j.idx_q, j.nq()).copy_from_slice(&j.q0);
        }
        q
    }

    pub fn neutral_configuration(&self) -> DVector<f64> {
        let mut q = DVector::zeros(self.nq);
        for j in &self.joints {
            if j.kind == JointKind::FreeFlyer {
                q[j.idx_q + 6] = 1.0;
            }
        }
        q
    }

    pub fn check_configuration(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.nq {
            return Err(Error::Dimension { what: "configuration", expected: self.nq, got: q.len() });
        }
        for j in &self.joints {
            if j.kind == JointKind::FreeFlyer {
                let n = q.rows(j.idx_q + 3, 4).norm();
                if (n - 1.0).abs() > QUATERNION_TOLERANCE {
                    return Err(Error::InvalidModel(format!(
                        "quaternion of joint `{}` has norm {n}",
                        j.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn check_state(&self, x: &MechState) -> Result<()> {
        self.check_configuration(&x.q)?;
        if x.v.len() != self.nv {
            return Err(Error::Dimension { what: "velocity", expected: self.nv, got: x.v.len() });
        }
        Ok(())
    }

    /// Placement of joint `j`'s motion at configuration `q` (relative to the
    /// joint frame).
    pub fn joint_motion(&self, j: usize, q: &DVector<f64>) -> Se3 {
        let joint = &self.joints[j];
        match &joint.kind {
            JointKind::Revolute { axis } => {
                Se3::from_rotation(crate::spatial::exp3(&(axis * q[joint.idx_q])))
            }
            JointKind::FreeFlyer => free_flyer_placement(q.rows(joint.idx_q, 7).as_slice()),
        }
    }

    /// `q ⊕ dv`.
    pub fn integrate(&self, q: &DVector<f64>, dv: &DVector<f64>) -> DVector<f64> {
        let mut out = q.clone();
        for j in &self.joints {
            match j.kind {
                JointKind::Revolute { .. } => out[j.idx_q] += dv[j.idx_v],
                JointKind::FreeFlyer => {
                    let m = free_flyer_placement(q.rows(j.idx_q, 7).as_slice());
                    let d = Motion::from_slice(dv.rows(j.idx_v, 6).as_slice());
                    let n = m * exp6(&d);
                    write_free_flyer(&n, &mut out.as_mut_slice()[j.idx_q..j.idx_q + 7]);
                }
            }
        }
        out
    }

    /// `q2 ⊖ q1`, the tangent displacement taking `q1` to `q2`.
    pub fn difference(&self, q1: &DVector<f64>, q2: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.nv);
        for j in &self.joints {
            match j.kind {
                JointKind::Revolute { .. } => out[j.idx_v] = q2[j.idx_q] - q1[j.idx_q],
                JointKind::FreeFlyer => {
                    let m1 = free_flyer_placement(q1.rows(j.idx_q, 7).as_slice());
                    let m2 = free_flyer_placement(q2.rows(j.idx_q, 7).as_slice());
                    let d = log6(&m1.inv_compose(&m2))?;
                    out.rows_mut(j.idx_v, 6).copy_from(&d.to_vector());
                }
            }
        }
        Ok(out)
    }

    /// Jacobians of `integrate(q, dv)` with respect to tangent perturbations
    /// of `q` and of `dv`, returned as block-diagonal nv×nv matrices.
    pub fn integrate_jacobians(
        &self,
        q: &DVector<f64>,
        dv: &DVector<f64>,
    ) -> (nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>) {
        let mut jq = nalgebra::DMatrix::identity(self.nv, self.nv);
        let mut jv = nalgebra::DMatrix::identity(self.nv, self.nv);
        let _ = q;
        for j in &self.joints {
            if j.kind == JointKind::FreeFlyer {
                let d = Motion::from_slice(dv.rows(j.idx_v, 6).as_slice());
                let ad_inv = exp6(&d).inverse().action_matrix();
                jq.view_mut((j.idx_v, j.idx_v), (6, 6)).copy_from(&ad_inv);
                jv.view_mut((j.idx_v, j.idx_v), (6, 6)).copy_from(&crate::spatial::jr6(&d));
            }
        }
        (jq, jv)
    }

    /// Jacobians of `difference(q1, q2)` with respect to tangent
    /// perturbations of `q1` and `q2`.
    pub fn difference_jacobians(
        &self,
        q1: &DVector<f64>,
        q2: &DVector<f64>,
    ) -> Result<(nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>)> {
        let mut j1 = -nalgebra::DMatrix::identity(self.nv, self.nv);
        let mut j2 = nalgebra::DMatrix::identity(self.nv, self.nv);
        for j in &self.joints {
            if j.kind == JointKind::FreeFlyer {
                let m1 = free_flyer_placement(q1.rows(j.idx_q, 7).as_slice());
                let m2 = free_flyer_placement(q2.rows(j.idx_q, 7).as_slice());
                let rel = m1.inv_compose(&m2);
                let d = log6(&rel)?;
                let jinv = crate::spatial::jr6_inv(&d);
                let b2 = jinv;
                let b1 = -(jinv * rel.inverse().action_matrix());
                j1.view_mut((j.idx_v, j.idx_v), (6, 6)).copy_from(&b1);
                j2.view_mut((j.idx_v, j.idx_v), (6, 6)).copy_from(&b2);
            }
        }
        Ok((j1, j2))
    }

    /// Sum of closure-pair dimensions (6 per pair).
    pub fn closure_dim(&self) -> usize {
        6 * self.closures.len()
    }
}

pub(crate) fn free_flyer_placement(q: &[f64]) -> Se3 {
    let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[6], q[3], q[4], q[5]));
    Se3::from_quaternion(&quat, Vector3::new(q[0], q[1], q[2]))
}

pub(crate) fn write_free_flyer(m: &Se3, out: &mut [f64]) {
    let quat = m.quaternion();
    let c = quat.as_ref().coords; // (i, j, k, w)
    out[0] = m.translation.x;
    out[1] = m.translation.y;
    out[2] = m.translation.z;
    // keep w ≥ 0 so the stored representation is unique
    let s = if c[3] < 0.0 { -1.0 } else { 1.0 };
    out[3] = s * c[0];
    out[4] = s * c[1];
    out[5] = s * c[2];
    out[6] = s * c[3];
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn five_dof() -> Model {
        load_model_str(
            r#"
name = "ff-chain"
[[joint]]
name = "root"
type = "free-flyer"
parent = "world"
body = "base"
[[body]]
name = "base"
mass = 2.0
com = [0.0, 0.0, 0.0]
inertia = [0.1, 0.1, 0.1, 0.0, 0.0, 0.0]
[[joint]]
name = "hinge"
type = "revolute"
axis = [0.0, 1.0, 0.0]
parent = "base"
body = "arm"
xyz = [0.0, 0.0, -0.1]
actuated = true
[[body]]
name = "arm"
mass = 1.0
com = [0.0, 0.0, -0.2]
inertia = [0.01, 0.01, 0.001, 0.0, 0.0, 0.0]
"#,
        )
        .unwrap()
    }

    #[test]
    fn integrate_zero_is_identity() {
        let m = five_dof();
        let q = m.neutral_configuration();
        assert_eq!(m.integrate(&q, &DVector::zeros(m.nv)), q);
    }

    #[test]
    fn free_flyer_quarter_turn() {
        let m = five_dof();
        let q = m.neutral_configuration();
        let mut dv = DVector::zeros(m.nv);
        dv[5] = FRAC_PI_2;
        let out = m.integrate(&q, &dv);
        let s = (0.5f64).sqrt();
        let expect = [0.0, 0.0, 0.0, 0.0, 0.0, s, s];
        for (a, b) in out.rows(0, 7).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn revolute_difference() {
        let m = five_dof();
        let mut q1 = m.neutral_configuration();
        let mut q2 = q1.clone();
        q1[7] = 0.2;
        q2[7] = 0.5;
        let d = m.difference(&q1, &q2).unwrap();
        assert!((d[6] - 0.3).abs() < 1e-15);
        assert_eq!(m.difference(&q1, &q1).unwrap(), DVector::zeros(m.nv));
    }

    #[test]
    fn difference_rejects_half_turn() {
        let m = five_dof();
        let q1 = m.neutral_configuration();
        let mut q2 = q1.clone();
        q2[3] = 1.0;
        q2[6] = 0.0;
        assert!(matches!(m.difference(&q1, &q2), Err(Error::SingularRetraction { .. })));
    }

    #[test]
    fn bad_quaternion_is_rejected() {
        let m = five_dof();
        let mut q = m.neutral_configuration();
        q[6] = 1.0 + 1e-6;
        assert!(m.check_configuration(&q).is_err());
    }
}
