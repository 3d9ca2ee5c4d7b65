//! Trajectory CSV interchange.
//!
//! Header `t,<obs_1>,...,<obs_k>` with observable columns named `S_mu_nu`
//! for two qubits and `sx,sy,sz` for one; one row per time; floats printed
//! with 17 significant digits so a write/read round trip is exact for f64.

use std::path::Path;

use crate::error::{Error, Result};
use crate::lindblad::Trajectory;
use crate::pauli::ObservableBasis;
use crate::scalar::Real;

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trajectory_to_csv<T: Real>(traj: &Trajectory<T>) -> String {
    let n_qubits = match traj.n_obs() {
        3 => 1,
        15 => 2,
        other => panic!("trajectory with {other} observables has no CSV schema"),
    };
    let basis = ObservableBasis::<T>::new(n_qubits);
    let mut out = String::from("t");
    for name in basis.column_names() {
        out.push(',');
        out.push_str(&name);
    }
    out.push('\n');
    for (k, &t) in traj.times().iter().enumerate() {
        out.push_str(&fmt(t.to_f64()));
        for a in 0..traj.n_obs() {
            out.push(',');
            out.push_str(&fmt(traj.value(a, k).to_f64()));
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory_csv<T: Real>(traj: &Trajectory<T>, path: &Path) -> Result<()> {
    std::fs::write(path, trajectory_to_csv(traj))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses a trajectory CSV; `origin` names the source in errors.
pub fn trajectory_from_csv<T: Real>(content: &str, origin: &str) -> Result<Trajectory<T>> {
    let ingest = |line: usize, reason: String| Error::Ingest {
        path: origin.to_string(),
        line,
        reason,
    };
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| ingest(1, "empty file".to_string()))?;
    let columns: Vec<&str> = header.trim().split(',').collect();
    if columns.first() != Some(&"t") {
        return Err(ingest(1, format!("first column must be 't', got '{header}'")));
    }
    let n_qubits = match columns.len() - 1 {
        3 => 1,
        15 => 2,
        other => {
            return Err(ingest(
                1,
                format!("expected 3 or 15 observable columns, found {other}"),
            ))
        }
    };
    let expected = ObservableBasis::<T>::new(n_qubits).column_names();
    for (want, got) in expected.iter().zip(&columns[1..]) {
        if want != got.trim() {
            return Err(ingest(1, format!("column '{got}' should be '{want}'")));
        }
    }

    let n_obs = columns.len() - 1;
    let mut times: Vec<T> = Vec::new();
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != n_obs + 1 {
            return Err(ingest(
                line_no,
                format!("expected {} fields, found {}", n_obs + 1, fields.len()),
            ));
        }
        let mut parsed = Vec::with_capacity(fields.len());
        for f in &fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| ingest(line_no, format!("not a number: '{f}'")))?;
            parsed.push(v);
        }
        let t = T::from_f64(parsed[0]);
        if let Some(&last) = times.last() {
            if t <= last {
                return Err(ingest(
                    line_no,
                    format!("time {} not increasing (previous {})", parsed[0], last.to_f64()),
                ));
            }
        }
        times.push(t);
        rows.push(parsed[1..].iter().map(|&v| T::from_f64(v)).collect());
    }
    if times.is_empty() {
        return Err(ingest(2, "no data rows".to_string()));
    }

    let n_times = times.len();
    let mut values = vec![T::zero(); n_obs * n_times];
    for (k, row) in rows.iter().enumerate() {
        for (a, &v) in row.iter().enumerate() {
            values[a * n_times + k] = v;
        }
    }
    Trajectory::new(times, values, n_obs)
}

pub fn read_trajectory_csv<T: Real>(path: &Path) -> Result<Trajectory<T>> {
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    trajectory_from_csv(&content, &path.display().to_string())
}
