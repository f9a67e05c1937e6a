//! Approximate serial model: linkage joints welded at frozen angles.

use nalgebra::DVector;
use std::collections::BTreeMap;

use super::{document::actuation_of, Body, Frame, Joint, JointKind, Model};
use crate::error::{Error, Result};
use crate::spatial::{exp3, Inertia, Se3};

/// Build the tree-only serial model. `frozen` must give an angle for exactly
/// the designated linkage joints. Remaining revolute joints all become
/// directly actuated and every closure pair is dropped.
pub fn build_serial_approximation(model: &Model, frozen: &BTreeMap<String, f64>) -> Result<Model> {
    let chain = model.serial.as_ref().ok_or(Error::NoSerialChain)?;
    let mut expected: Vec<&str> = chain.linkage.iter().map(|s| s.as_str()).collect();
    expected.sort_unstable();
    let mut given: Vec<&str> = frozen.keys().map(|s| s.as_str()).collect();
    given.sort_unstable();
    if expected != given {
        return Err(Error::InvalidModel(format!(
            "frozen joints {given:?} differ from the designated linkage {expected:?}"
        )));
    }

    let n = model.joints.len();
    // host body in the new model (None = world) and placement of the old
    // body frame in that host
    let mut host: Vec<Option<usize>> = vec![None; n];
    let mut rel: Vec<Se3> = vec![Se3::identity(); n];
    let mut joints: Vec<Joint> = Vec::new();
    let mut inertias: Vec<Inertia> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let (mut idx_q, mut idx_v) = (0, 0);

    for (i, j) in model.joints.iter().enumerate() {
        let (p_host, p_rel) = match j.parent {
            Some(p) => (host[p], rel[p]),
            None => (None, Se3::identity()),
        };
        if let Some(&angle) = frozen.get(&j.name) {
            let JointKind::Revolute { axis } = &j.kind else {
                return Err(Error::InvalidModel(format!("linkage joint `{}` must be revolute", j.name)));
            };
            let Some(h) = p_host else {
                return Err(Error::InvalidModel(format!(
                    "linkage joint `{}` would weld mass onto the world",
                    j.name
                )));
            };
            let r = p_rel * j.placement * Se3::from_rotation(exp3(&(axis * angle)));
            host[i] = Some(h);
            rel[i] = r;
            let welded = model.bodies[i].inertia.transformed(&r);
            inertias[h] = inertias[h].combined(&welded);
        } else {
            let k = joints.len();
            let mut nj = j.clone();
            nj.parent = p_host;
            nj.placement = p_rel * j.placement;
            nj.actuated = matches!(j.kind, JointKind::Revolute { .. });
            nj.idx_q = idx_q;
            nj.idx_v = idx_v;
            idx_q += nj.nq();
            idx_v += nj.nv();
            joints.push(nj);
            inertias.push(model.bodies[i].inertia);
            names.push(model.bodies[i].name.clone());
            host[i] = Some(k);
        }
    }

    let bodies = names
        .into_iter()
        .zip(inertias)
        .map(|(name, inertia)| Body { name, inertia })
        .collect();
    let frames = model
        .frames
        .iter()
        .map(|f| match f.body {
            Some(b) => Frame { name: f.name.clone(), body: host[b], placement: rel[b] * f.placement },
            None => f.clone(),
        })
        .collect::<Vec<_>>();

    let mut labels = model.labels.clone();
    for (k, v) in &chain.relabel {
        labels.insert(k.clone(), v.clone());
    }
    labels.retain(|_, v| {
        v.iter().all(|n| joints.iter().any(|j| &j.name == n) || frames.iter().any(|f| &f.name == n))
    });

    let actuation = actuation_of(&joints);
    Ok(Model {
        name: format!("{}-serial", model.name),
        joints,
        bodies,
        frames,
        closures: Vec::new(),
        actuation,
        gravity: model.gravity,
        nq: idx_q,
        nv: idx_v,
        serial: None,
        labels,
        hash: format!("{}s", model.hash),
    })
}

/// Correspondence between the serial coordinates of a closed model and the
/// coordinates of its serial approximation (matched by joint name).
#[derive(Clone, Debug)]
pub struct SerialProjection {
    /// Closed-model configuration indices, in serial-model order.
    pub q_indices: Vec<usize>,
    /// Closed-model tangent indices, in serial-model order.
    pub v_indices: Vec<usize>,
}

impl SerialProjection {
    pub fn new(closed: &Model, serial: &Model) -> Result<Self> {
        let mut q_indices = Vec::with_capacity(serial.nq);
        let mut v_indices = Vec::with_capacity(serial.nv);
        for sj in &serial.joints {
            let cj = &closed.joints[closed.joint_index(&sj.name)?];
            if cj.kind != sj.kind {
                return Err(Error::InvalidModel(format!("joint `{}` changes kind", sj.name)));
            }
            q_indices.extend(cj.idx_q..cj.idx_q + cj.nq());
            v_indices.extend(cj.idx_v..cj.idx_v + cj.nv());
        }
        Ok(Self { q_indices, v_indices })
    }

    pub fn project_q(&self, q_closed: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.q_indices.len(), self.q_indices.iter().map(|&i| q_closed[i]))
    }

    pub fn project_v(&self, v_closed: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.v_indices.len(), self.v_indices.iter().map(|&i| v_closed[i]))
    }

    /// Write serial coordinates into a closed configuration.
    pub fn embed_q(&self, q_serial: &DVector<f64>, q_closed: &mut DVector<f64>) {
        for (k, &i) in self.q_indices.iter().enumerate() {
            q_closed[i] = q_serial[k];
        }
    }

    pub fn embed_v(&self, v_serial: &DVector<f64>, v_closed: &mut DVector<f64>) {
        for (k, &i) in self.v_indices.iter().enumerate() {
            v_closed[i] = v_serial[k];
        }
    }
}
