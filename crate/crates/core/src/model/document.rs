//! TOML model documents.
//!
//! ```toml
//! name = "pendulum"
//! gravity = [0.0, 0.0, -9.81]          # optional
//!
//! [[joint]]
//! name = "hinge"
//! type = "revolute"                    # or "free-flyer"
//! axis = [0.0, 1.0, 0.0]               # revolute only
//! parent = "world"                     # body name or "world"
//! body = "link"                        # body moved by this joint
//! xyz = [0.0, 0.0, 0.0]                # placement in the parent body
//! rpy = [0.0, 0.0, 0.0]                # or quat = [x, y, z, w]
//! actuated = true
//! q0 = [0.0]                           # nominal configuration (optional)
//! effort = 40.0                        # actuator bound (optional)
//!
//! [[body]]
//! name = "link"
//! mass = 1.0
//! com = [0.0, 0.0, -0.5]
//! inertia = [ixx, iyy, izz, ixy, ixz, iyz]   # about the center of mass
//!
//! [[frame]]
//! name = "tip"
//! body = "link"
//! xyz = [0.0, 0.0, -1.0]
//!
//! [[closure]]
//! name = "lock"
//! frame1 = "a"
//! frame2 = "b"
//!
//! [serial]
//! linkage = ["motor", "rod"]           # joints frozen in the serial model
//!
//! [labels]
//! feet = ["foot_l", "foot_r"]
//! ```
//!
//! Joints keep document order and must list their parent body before
//! themselves. Quaternions are stored (x, y, z, w) and must be unit norm to
//! within 1e-9.

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use super::{Body, ClosurePair, Frame, Joint, JointKind, Model, SerialChain, QUATERNION_TOLERANCE};
use crate::error::{Error, Result};
use crate::spatial::{Inertia, Se3};

/// Models shipped with the crate, by name.
pub const BUNDLED_MODELS: &[(&str, &str)] = &[
    ("pendulum", include_str!("../../models/pendulum.toml")),
    ("fourbar", include_str!("../../models/fourbar.toml")),
    ("toybiped", include_str!("../../models/toybiped.toml")),
    ("parallel-leg", include_str!("../../models/parallel-leg.toml")),
];

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    name: String,
    gravity: Option<[f64; 3]>,
    #[serde(default)]
    joint: Vec<JointDoc>,
    #[serde(default)]
    body: Vec<BodyDoc>,
    #[serde(default)]
    frame: Vec<FrameDoc>,
    #[serde(default)]
    closure: Vec<ClosureDoc>,
    serial: Option<SerialDoc>,
    #[serde(default)]
    labels: BTreeMap<String, Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    axis: Option<[f64; 3]>,
    parent: String,
    body: String,
    xyz: Option<[f64; 3]>,
    rpy: Option<[f64; 3]>,
    quat: Option<[f64; 4]>,
    #[serde(default)]
    actuated: bool,
    q0: Option<Vec<f64>>,
    effort: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BodyDoc {
    name: String,
    mass: f64,
    #[serde(default)]
    com: [f64; 3],
    #[serde(default)]
    inertia: [f64; 6],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDoc {
    name: String,
    body: String,
    xyz: Option<[f64; 3]>,
    rpy: Option<[f64; 3]>,
    quat: Option<[f64; 4]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClosureDoc {
    name: String,
    frame1: String,
    frame2: String,
    dimension: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SerialDoc {
    linkage: Vec<String>,
    #[serde(default)]
    relabel: BTreeMap<String, Vec<String>>,
}

pub fn model_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Load a model from a path, or from a bundled model name.
pub fn load_model(path_or_name: &str) -> Result<Model> {
    if let Some((_, text)) = BUNDLED_MODELS.iter().find(|(n, _)| *n == path_or_name) {
        return load_model_str(text);
    }
    let text = std::fs::read_to_string(path_or_name)
        .map_err(|e| Error::Parse { line: 0, message: format!("{path_or_name}: {e}") })?;
    load_model_str(&text)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn placement(
    what: &str,
    xyz: Option<[f64; 3]>,
    rpy: Option<[f64; 3]>,
    quat: Option<[f64; 4]>,
) -> Result<Se3> {
    let t = Vector3::from(xyz.unwrap_or([0.0; 3]));
    if !t.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidModel(format!("{what}: non-finite translation")));
    }
    match (rpy, quat) {
        (Some(_), Some(_)) => {
            Err(Error::InvalidModel(format!("{what}: give either `rpy` or `quat`, not both")))
        }
        (Some(r), None) => {
            let r = Vector3::from(r);
            if !r.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidModel(format!("{what}: non-finite rpy")));
            }
            Ok(Se3::from_rpy(&r, t))
        }
        (None, Some(q)) => Ok(Se3::from_quaternion(&unit_quaternion(what, q)?, t)),
        (None, None) => Ok(Se3::from_translation(t)),
    }
}

fn unit_quaternion(what: &str, q: [f64; 4]) -> Result<UnitQuaternion<f64>> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !n.is_finite() || (n - 1.0).abs() > QUATERNION_TOLERANCE {
        return Err(Error::InvalidModel(format!("{what}: quaternion norm {n} is not 1")));
    }
    Ok(UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2])))
}

fn inertia(b: &BodyDoc) -> Result<Inertia> {
    let [ixx, iyy, izz, ixy, ixz, iyz] = b.inertia;
    let all = [b.mass, ixx, iyy, izz, ixy, ixz, iyz, b.com[0], b.com[1], b.com[2]];
    if !all.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidModel(format!("body `{}`: non-finite inertial data", b.name)));
    }
    if b.mass < 0.0 {
        return Err(Error::InvalidModel(format!("body `{}`: negative mass", b.name)));
    }
    let rot = Matrix3::new(ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz);
    let eig = SymmetricEigen::new(rot).eigenvalues;
    let scale = eig.amax().max(1e-12);
    if eig.iter().any(|&e| e < -1e-12 * scale) {
        return Err(Error::InvalidModel(format!("body `{}`: inertia is not positive semi-definite", b.name)));
    }
    let (a, bb, c) = (eig[0], eig[1], eig[2]);
    let tol = 1e-9 * scale;
    if a + bb < c - tol || a + c < bb - tol || bb + c < a - tol {
        return Err(Error::InvalidModel(format!(
            "body `{}`: principal moments violate the triangle inequality",
            b.name
        )));
    }
    Ok(Inertia::new(b.mass, Vector3::from(b.com), rot))
}

pub fn load_model_str(text: &str) -> Result<Model> {
    let doc: Document = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    build(doc, model_hash(text))
}

fn build(doc: Document, hash: String) -> Result<Model> {
    let mut body_docs: BTreeMap<&str, &BodyDoc> = BTreeMap::new();
    for b in &doc.body {
        if body_docs.insert(b.name.as_str(), b).is_some() {
            return Err(Error::InvalidModel(format!("duplicate body `{}`", b.name)));
        }
    }
    let mut joints: Vec<Joint> = Vec::new();
    let mut bodies: Vec<Body> = Vec::new();
    let mut idx_q = 0;
    let mut idx_v = 0;
    for (k, jd) in doc.joint.iter().enumerate() {
        let what = format!("joint `{}`", jd.name);
        if joints.iter().any(|j| j.name == jd.name) {
            return Err(Error::InvalidModel(format!("duplicate {what}")));
        }
        let parent = if jd.parent == "world" {
            None
        } else {
            Some(bodies.iter().position(|b| b.name == jd.parent).ok_or_else(|| {
                Error::DanglingReference { kind: "parent body", name: jd.parent.clone() }
            })?)
        };
        if bodies.iter().any(|b| b.name == jd.body) {
            return Err(Error::InvalidModel(format!("{what}: body `{}` already has a joint", jd.body)));
        }
        let bd = body_docs
            .get(jd.body.as_str())
            .ok_or_else(|| Error::DanglingReference { kind: "body", name: jd.body.clone() })?;
        let kind = match jd.kind.as_str() {
            "revolute" => {
                let a = Vector3::from(jd.axis.ok_or_else(|| {
                    Error::InvalidModel(format!("{what}: revolute joint needs `axis`"))
                })?);
                let n = a.norm();
                if !n.is_finite() || n < 1e-12 {
                    return Err(Error::InvalidModel(format!("{what}: zero axis")));
                }
                JointKind::Revolute { axis: a / n }
            }
            "free-flyer" => {
                if k != 0 || parent.is_some() {
                    return Err(Error::InvalidModel(format!(
                        "{what}: a free-flyer must be the first joint and attach to the world"
                    )));
                }
                JointKind::FreeFlyer
            }
            other => {
                return Err(Error::InvalidModel(format!("{what}: unknown joint type `{other}`")))
            }
        };
        let nq = kind.nq();
        let q0 = match (&kind, &jd.q0) {
            (_, Some(v)) if v.len() != nq => {
                return Err(Error::Dimension { what: "joint q0", expected: nq, got: v.len() })
            }
            (JointKind::FreeFlyer, Some(v)) => {
                unit_quaternion(&what, [v[3], v[4], v[5], v[6]])?;
                v.clone()
            }
            (_, Some(v)) => v.clone(),
            (JointKind::FreeFlyer, None) => vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            (_, None) => vec![0.0],
        };
        if !q0.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidModel(format!("{what}: non-finite q0")));
        }
        if let Some(e) = jd.effort.filter(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidModel(format!("{what}: effort must be positive, got {e}")));
        }
        let nv = kind.nv();
        joints.push(Joint {
            name: jd.name.clone(),
            kind,
            parent,
            placement: placement(&what, jd.xyz, jd.rpy, jd.quat)?,
            actuated: jd.actuated,
            idx_q,
            idx_v,
            q0,
            effort: jd.effort,
        });
        bodies.push(Body { name: bd.name.clone(), inertia: inertia(bd)? });
        idx_q += nq;
        idx_v += nv;
    }
    if let Some(unused) = doc.body.iter().find(|b| !bodies.iter().any(|x| x.name == b.name)) {
        return Err(Error::InvalidModel(format!("body `{}` is not moved by any joint", unused.name)));
    }
    if joints.is_empty() {
        return Err(Error::InvalidModel("model has no joints".into()));
    }

    let mut frames: Vec<Frame> = Vec::new();
    for fd in &doc.frame {
        if frames.iter().any(|f| f.name == fd.name) {
            return Err(Error::InvalidModel(format!("duplicate frame `{}`", fd.name)));
        }
        let body = if fd.body == "world" {
            None
        } else {
            Some(bodies.iter().position(|b| b.name == fd.body).ok_or_else(|| {
                Error::DanglingReference { kind: "body", name: fd.body.clone() }
            })?)
        };
        let what = format!("frame `{}`", fd.name);
        frames.push(Frame { name: fd.name.clone(), body, placement: placement(&what, fd.xyz, fd.rpy, fd.quat)? });
    }

    let find_frame = |name: &str| {
        frames
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::DanglingReference { kind: "frame", name: name.to_string() })
    };
    let mut closures = Vec::new();
    for cd in &doc.closure {
        if let Some(d) = cd.dimension {
            if d != 6 {
                return Err(Error::InvalidModel(format!("closure `{}`: only 6D closures are supported", cd.name)));
            }
        }
        let f1 = find_frame(&cd.frame1)?;
        let f2 = find_frame(&cd.frame2)?;
        if frames[f1].body == frames[f2].body {
            return Err(Error::InvalidModel(format!(
                "closure `{}`: frames must attach to distinct bodies",
                cd.name
            )));
        }
        closures.push(ClosurePair { name: cd.name.clone(), frame1: f1, frame2: f2 });
    }

    let serial = match doc.serial {
        Some(s) => {
            for name in &s.linkage {
                if !joints.iter().any(|j| &j.name == name) {
                    return Err(Error::DanglingReference { kind: "linkage joint", name: name.clone() });
                }
            }
            Some(SerialChain { linkage: s.linkage, relabel: s.relabel })
        }
        None => None,
    };

    for (key, names) in &doc.labels {
        for n in names {
            let known = joints.iter().any(|j| &j.name == n) || frames.iter().any(|f| &f.name == n);
            if !known {
                return Err(Error::DanglingReference { kind: "label target", name: format!("{key}: {n}") });
            }
        }
    }

    let actuation = actuation_of(&joints);
    let gravity = Vector3::from(doc.gravity.unwrap_or([0.0, 0.0, -9.81]));
    Ok(Model {
        name: doc.name,
        joints,
        bodies,
        frames,
        closures,
        actuation,
        gravity,
        nq: idx_q,
        nv: idx_v,
        serial,
        labels: doc.labels,
        hash,
    })
}

pub(super) fn actuation_of(joints: &[Joint]) -> Vec<usize> {
    joints
        .iter()
        .filter(|j| j.actuated)
        .flat_map(|j| j.idx_v..j.idx_v + j.nv())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_models_load() {
        for (name, text) in BUNDLED_MODELS {
            let m = load_model_str(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&m.name, name);
        }
    }

    #[test]
    fn pendulum_dimensions() {
        let m = load_model("pendulum").unwrap();
        assert_eq!((m.nq, m.nv, m.nu()), (1, 1, 1));
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "name = \"x\"\n[[joint]]\nname = 3\n";
        match load_model_str(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nonpositive_effort_is_rejected() {
        let text = BUNDLED_MODELS.iter().find(|(n, _)| *n == "pendulum").unwrap().1;
        assert!(load_model_str(text).is_ok());
        let bad = text.replacen("actuated = true", "actuated = true\neffort = -1.0", 1);
        assert!(bad != text, "pendulum model has no actuated joint line");
        assert!(matches!(load_model_str(&bad), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn dangling_parent_is_reported() {
        let text = r#"
name = "x"
[[joint]]
name = "j"
type = "revolute"
axis = [0.0, 1.0, 0.0]
parent = "nowhere"
body = "b"
[[body]]
name = "b"
mass = 1.0
"#;
        assert!(matches!(load_model_str(text), Err(Error::DanglingReference { .. })));
    }

    #[test]
    fn non_psd_inertia_is_rejected() {
        let text = r#"
name = "x"
[[joint]]
name = "j"
type = "revolute"
axis = [0.0, 1.0, 0.0]
parent = "world"
body = "b"
[[body]]
name = "b"
mass = 1.0
inertia = [1.0, 1.0, -1.0, 0.0, 0.0, 0.0]
"#;
        assert!(matches!(load_model_str(text), Err(Error::InvalidModel(_))));
        let tri = text.replace("[1.0, 1.0, -1.0", "[1.0, 1.0, 3.0");
        assert!(matches!(load_model_str(&tri), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn non_unit_quaternion_is_rejected() {
        let text = r#"
name = "x"
[[joint]]
name = "j"
type = "revolute"
axis = [0.0, 1.0, 0.0]
parent = "world"
body = "b"
quat = [0.0, 0.0, 0.0, 1.001]
[[body]]
name = "b"
mass = 1.0
"#;
        assert!(load_model_str(text).is_err());
    }
}
