//! Plain-text trajectory files.
//!
//! ```text
//! kinloop-trajectory 1
//! model toybiped
//! hash 3f2a9c0d11e4b7a5
//! nq 15
//! nv 14
//! nu 8
//! nodes 101
//! data
//! 0 0 <q> <v> <u> <nλ> <λ>
//! ...
//! 100 2 <q> <v>
//! ```
//!
//! Header lines are `key value`; `#` starts a comment line. Each data row
//! holds the node index, its time, the configuration and the velocity; every
//! row but the last continues with the controls of the stage, the number of
//! constraint-force entries and the forces themselves. Numbers are written
//! in shortest round-trip form.

use std::fmt::Write as _;

use kinloop::model::MechState;
use kinloop::ocp::Trajectory;
use kinloop::{Error, Model, Result};
use nalgebra::DVector;

pub const MAGIC: &str = "kinloop-trajectory";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFile {
    pub model: String,
    pub hash: String,
    pub nq: usize,
    pub nv: usize,
    pub nu: usize,
    pub times: Vec<f64>,
    pub trajectory: Trajectory,
}

impl TrajectoryFile {
    pub fn new(model: &Model, times: Vec<f64>, trajectory: Trajectory) -> Self {
        Self {
            model: model.name.clone(),
            hash: model.hash.clone(),
            nq: model.nq,
            nv: model.nv,
            nu: model.nu(),
            times,
            trajectory,
        }
    }

    /// Check that the file was written for `model`.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.hash != model.hash {
            return Err(Error::InvalidTask(format!(
                "trajectory was written for model `{}` ({}), not `{}` ({})",
                self.model, self.hash, model.name, model.hash
            )));
        }
        for x in &self.trajectory.xs {
            model.check_state(x)?;
        }
        Ok(())
    }
}

fn push_all(out: &mut String, v: &DVector<f64>) {
    for x in v.iter() {
        let _ = write!(out, " {x:e}");
    }
}

pub fn write_trajectory(file: &TrajectoryFile) -> String {
    let t = &file.trajectory;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "model {}", file.model);
    let _ = writeln!(out, "hash {}", file.hash);
    let _ = writeln!(out, "nq {}\nnv {}\nnu {}\nnodes {}", file.nq, file.nv, file.nu, t.xs.len());
    out.push_str("data\n");
    for (k, x) in t.xs.iter().enumerate() {
        let _ = write!(out, "{k} {:e}", file.times.get(k).copied().unwrap_or(f64::NAN));
        push_all(&mut out, &x.q);
        push_all(&mut out, &x.v);
        if let Some(u) = t.us.get(k) {
            push_all(&mut out, u);
            let lam = t.lambdas.get(k).cloned().unwrap_or_else(|| DVector::zeros(0));
            let _ = write!(out, " {}", lam.len());
            push_all(&mut out, &lam);
        }
        out.push('\n');
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn number(tok: &str, line: usize) -> Result<f64> {
    let x: f64 = tok.parse().map_err(|_| parse_err(line, format!("`{tok}` is not a number")))?;
    if !x.is_finite() {
        return Err(parse_err(line, format!("non-finite value `{tok}`")));
    }
    Ok(x)
}

fn count(tok: &str, line: usize) -> Result<usize> {
    tok.parse().map_err(|_| parse_err(line, format!("`{tok}` is not a count")))
}

/// Largest dimension accepted in a header; guards allocations on bad input.
const MAX_DIM: usize = 1 << 16;

pub fn parse_trajectory(text: &str) -> Result<TrajectoryFile> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (ln, first) = lines.next().ok_or_else(|| parse_err(0, "empty trajectory file"))?;
    if first != format!("{MAGIC} {VERSION}") {
        return Err(parse_err(ln, format!("expected `{MAGIC} {VERSION}`")));
    }
    let (mut model, mut hash) = (None, None);
    let (mut nq, mut nv, mut nu, mut nodes) = (None, None, None, None);
    let mut in_data = false;
    for (ln, l) in lines.by_ref() {
        if l == "data" {
            in_data = true;
            break;
        }
        let (key, value) = l.split_once(char::is_whitespace).ok_or_else(|| parse_err(ln, "expected `key value`"))?;
        let value = value.trim();
        let dim = |v: &str| -> Result<Option<usize>> {
            let n = count(v, ln)?;
            if n > MAX_DIM {
                return Err(parse_err(ln, format!("{key} {n} is too large")));
            }
            Ok(Some(n))
        };
        let slot_taken = match key {
            "model" => model.replace(value.to_string()).is_some(),
            "hash" => hash.replace(value.to_string()).is_some(),
            "nq" => std::mem::replace(&mut nq, dim(value)?).is_some(),
            "nv" => std::mem::replace(&mut nv, dim(value)?).is_some(),
            "nu" => std::mem::replace(&mut nu, dim(value)?).is_some(),
            "nodes" => std::mem::replace(&mut nodes, dim(value)?).is_some(),
            _ => return Err(parse_err(ln, format!("unknown header key `{key}`"))),
        };
        if slot_taken {
            return Err(parse_err(ln, format!("duplicate header key `{key}`")));
        }
    }
    if !in_data {
        return Err(parse_err(0, "missing `data` line"));
    }
    let missing = |k: &str| parse_err(0, format!("missing header key `{k}`"));
    let model = model.ok_or_else(|| missing("model"))?;
    let hash = hash.ok_or_else(|| missing("hash"))?;
    let nq = nq.ok_or_else(|| missing("nq"))?;
    let nv = nv.ok_or_else(|| missing("nv"))?;
    let nu = nu.ok_or_else(|| missing("nu"))?;
    let nodes = nodes.ok_or_else(|| missing("nodes"))?;
    if nodes == 0 {
        return Err(parse_err(0, "a trajectory has at least one node"));
    }

    let mut times = Vec::new();
    let mut xs = Vec::new();
    let mut us = Vec::new();
    let mut lambdas = Vec::new();
    let mut last_line = 0;
    for (ln, l) in lines {
        last_line = ln;
        let k = xs.len();
        if k == nodes {
            return Err(parse_err(ln, format!("more than {nodes} data rows")));
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        let terminal = k + 1 == nodes;
        let state_len = 2 + nq + nv;
        if toks.len() < state_len + if terminal { 0 } else { nu + 1 } {
            return Err(parse_err(ln, format!("row {k} is too short ({} fields)", toks.len())));
        }
        if count(toks[0], ln)? != k {
            return Err(parse_err(ln, format!("expected node index {k}")));
        }
        let t = number(toks[1], ln)?;
        if times.last().is_some_and(|&p| t < p) {
            return Err(parse_err(ln, "times must be non-decreasing"));
        }
        let vec = |range: std::ops::Range<usize>| -> Result<DVector<f64>> {
            let vals: Result<Vec<f64>> = toks[range].iter().map(|s| number(s, ln)).collect();
            Ok(DVector::from_vec(vals?))
        };
        let q = vec(2..2 + nq)?;
        let v = vec(2 + nq..state_len)?;
        if terminal {
            if toks.len() != state_len {
                return Err(parse_err(ln, "the last row holds only k, t, q and v"));
            }
        } else {
            us.push(vec(state_len..state_len + nu)?);
            let nl = count(toks[state_len + nu], ln)?;
            let start = state_len + nu + 1;
            if toks.len() != start + nl {
                return Err(parse_err(ln, format!("row {k}: {nl} force entries announced, {} given", toks.len() - start)));
            }
            lambdas.push(vec(start..start + nl)?);
        }
        times.push(t);
        xs.push(MechState::new(q, v));
    }
    if xs.len() != nodes {
        return Err(parse_err(last_line, format!("expected {nodes} data rows, found {}", xs.len())));
    }
    Ok(TrajectoryFile { model, hash, nq, nv, nu, times, trajectory: Trajectory { xs, us, lambdas } })
}

pub fn read_trajectory(path: &std::path::Path) -> Result<TrajectoryFile> {
    let text = std::fs::read_to_string(path).map_err(|e| parse_err(0, format!("{}: {e}", path.display())))?;
    parse_trajectory(&text)
}

pub const LIFT_MAGIC: &str = "kinloop-lift-report";

/// Structured text of a lift report: header lines, then one row per step
/// with the tracking errors and the lifted controls.
pub fn write_lift_report(report: &kinloop::lift::LiftReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{LIFT_MAGIC} {VERSION}");
    let _ = writeln!(out, "success {}", report.success);
    match report.failure_step {
        Some(k) => {
            let _ = writeln!(out, "failure_step {k}");
        }
        None => out.push_str("failure_step none\n"),
    }
    let _ = writeln!(out, "message {}", report.message);
    let _ = writeln!(out, "steps {}", report.tracking_errors.len());
    let _ = writeln!(out, "max_error {:e}", report.max_error());
    out.push_str("# k tracking_error velocity_error u...\ndata\n");
    for (k, e) in report.tracking_errors.iter().enumerate() {
        let _ = write!(out, "{k} {e:e} {:e}", report.velocity_errors.get(k).copied().unwrap_or(f64::NAN));
        if let Some(u) = report.controls.get(k) {
            push_all(&mut out, u);
        }
        out.push('\n');
    }
    out
}
