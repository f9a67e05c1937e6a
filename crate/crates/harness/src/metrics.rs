//! Per-node metrics of a trajectory and control summaries, with CSV output.

use std::io::Write;

use kinloop::ocp::Trajectory;
use kinloop::rba::{center_of_mass, forward_kinematics};
use kinloop::{Error, Model, Result};
use nalgebra::{DVector, Vector3};

#[derive(Clone, Debug, PartialEq)]
pub struct NodeMetric {
    pub k: usize,
    pub t: f64,
    pub com: Vector3<f64>,
    /// Positions of the frames labelled `feet`, in label order.
    pub feet: Vec<Vector3<f64>>,
}

pub fn feet(model: &Model) -> Vec<String> {
    model.label("feet").map(|f| f.to_vec()).unwrap_or_default()
}

pub fn node_metrics(model: &Model, times: &[f64], traj: &Trajectory) -> Result<Vec<NodeMetric>> {
    let names = feet(model);
    let frames: Vec<usize> = names.iter().map(|f| model.frame_index(f)).collect::<Result<_>>()?;
    let z = DVector::zeros(model.nv);
    traj.xs
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let cache = forward_kinematics(model, &x.q, &x.v, &z)?;
            Ok(NodeMetric {
                k,
                t: times.get(k).copied().unwrap_or(f64::NAN),
                com: center_of_mass(model, &cache),
                feet: frames.iter().map(|&f| cache.frame_placements[f].translation).collect(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlSummary {
    pub joint: String,
    pub max: f64,
    pub mean: f64,
}

/// Max and mean absolute control of every actuated joint.
pub fn control_summary(model: &Model, us: &[DVector<f64>]) -> Vec<ControlSummary> {
    model
        .actuation
        .iter()
        .enumerate()
        .map(|(i, &iv)| {
            let joint = model.joints.iter().find(|j| j.idx_v == iv).map(|j| j.name.clone()).unwrap_or_default();
            let (mut max, mut sum) = (0.0f64, 0.0);
            for u in us {
                max = max.max(u[i].abs());
                sum += u[i].abs();
            }
            ControlSummary { joint, max, mean: if us.is_empty() { 0.0 } else { sum / us.len() as f64 } }
        })
        .collect()
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidTask(format!("writing CSV: {e}"))
}

pub fn write_node_metrics<W: Write>(out: W, model: &Model, rows: &[NodeMetric]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string(), "t".into(), "com_x".into(), "com_y".into(), "com_z".into()];
    for f in feet(model) {
        for axis in ["x", "y", "z"] {
            header.push(format!("{f}_{axis}"));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.k.to_string(), r.t.to_string()];
        rec.extend(r.com.iter().map(|x| x.to_string()));
        for p in &r.feet {
            rec.extend(p.iter().map(|x| x.to_string()));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn write_control_summary<W: Write>(out: W, rows: &[ControlSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["joint", "max_abs", "mean_abs"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.joint.clone(), r.max.to_string(), r.mean.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

/// Serialize records (one row each) as CSV with a header.
pub fn write_records<W: Write, T: serde::Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}
