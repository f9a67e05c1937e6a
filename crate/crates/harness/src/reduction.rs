//! Transmission ratio of a linkage from the null space of the loop Jacobian.

use kinloop::condyn::{project_with_fixed, ConstraintSet};
use kinloop::model::Model;
use kinloop::rba::forward_kinematics;
use kinloop::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Ratios above this magnitude are reported as singular.
pub const SINGULAR_RATIO: f64 = 1e3;
/// Relative singular-value floor of the dependent-coordinate Jacobian.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RatioRow {
    pub angle: f64,
    /// `dθ_motor / dθ_joint`; NaN when singular.
    pub ratio: f64,
    pub singular: bool,
}

/// `dθ_motor/dθ_joint` at configuration `q` (on the manifold).
pub fn ratio_at(model: &Model, q: &DVector<f64>, joint: usize, motor: usize) -> Result<(f64, bool)> {
    let z = DVector::zeros(model.nv);
    let cache = forward_kinematics(model, q, &z, &z)?;
    let (j, _) = ConstraintSet::closures(model).stack(model, &cache)?;
    let jv = model.joints[joint].idx_v;
    let mv = model.joints[motor].idx_v;
    let scale = j.amax().max(1.0);
    let nz = |x: f64| x.abs() > 1e-12 * scale;
    // rows of the loops the joint belongs to
    let mut rows = Vec::new();
    for b in 0..j.nrows() / 6 {
        if (0..6).any(|r| nz(j[(6 * b + r, jv)])) {
            rows.extend(6 * b..6 * b + 6);
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidModel(format!("joint `{}` is not in a loop", model.joints[joint].name)));
    }
    let cols: Vec<usize> = (0..model.nv).filter(|&c| c != jv && rows.iter().any(|&r| nz(j[(r, c)]))).collect();
    let Some(mpos) = cols.iter().position(|&c| c == mv) else {
        return Err(Error::InvalidModel(format!(
            "motor `{}` is not in the loop of `{}`",
            model.joints[motor].name, model.joints[joint].name
        )));
    };
    let jd = DMatrix::from_fn(rows.len(), cols.len(), |r, c| j[(rows[r], cols[c])]);
    let rhs = DVector::from_iterator(rows.len(), rows.iter().map(|&r| -j[(r, jv)]));
    let svd = jd.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= RANK_TOLERANCE * smax || svd.singular_values.len() < cols.len() {
        return Ok((f64::NAN, true));
    }
    let delta = svd.solve(&rhs, 0.0).map_err(|e| Error::InvalidModel(e.to_string()))?;
    let ratio = delta[mpos];
    if (&jd * &delta - rhs).amax() > 1e-8 * scale {
        return Ok((f64::NAN, true));
    }
    Ok((ratio, ratio.abs() > SINGULAR_RATIO))
}

/// Sweep the joint angle over `angles`, projecting the linkage onto the loop
/// at each point (continuation from the previous point).
pub fn reduction_ratio(model: &Model, joint: &str, motor: &str, angles: &[f64]) -> Result<Vec<RatioRow>> {
    if angles.is_empty() {
        return Err(Error::InvalidTask("empty angle range".into()));
    }
    let ji = model.joint_index(joint)?;
    let mi = model.joint_index(motor)?;
    let cs = ConstraintSet::closures(model);
    let fixed: Vec<usize> = model
        .joints
        .iter()
        .filter(|j| j.idx_v == model.joints[ji].idx_v || j.nv() != 1)
        .flat_map(|j| j.idx_v..j.idx_v + j.nv())
        .collect();
    // continuation: walk from the reference angle outwards in both directions
    let q_ref = model.reference_configuration();
    let iq = model.joints[ji].idx_q;
    let mut order: Vec<usize> = (0..angles.len()).collect();
    order.sort_by(|&a, &b| (angles[a] - q_ref[iq]).abs().total_cmp(&(angles[b] - q_ref[iq]).abs()));
    let mut rows: Vec<Option<RatioRow>> = vec![None; angles.len()];
    let mut solved: Vec<(f64, DVector<f64>)> = Vec::new();
    for &i in &order {
        let a = angles[i];
        let mut q = solved
            .iter()
            .min_by(|x, y| (x.0 - a).abs().total_cmp(&(y.0 - a).abs()))
            .map(|x| x.1.clone())
            .unwrap_or_else(|| q_ref.clone());
        q[iq] = a;
        rows[i] = Some(match project_with_fixed(model, &cs, &q, &fixed) {
            Ok(qp) => {
                let (ratio, singular) = ratio_at(model, &qp, ji, mi)?;
                solved.push((a, qp));
                RatioRow { angle: a, ratio, singular }
            }
            Err(_) => RatioRow { angle: a, ratio: f64::NAN, singular: true },
        });
    }
    Ok(rows.into_iter().map(|r| r.unwrap()).collect())
}
