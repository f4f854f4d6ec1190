//! Trajectory CSV files: header `traj_id,t,x1,...,xn[,u1,...,um]`, one row per
//! time step. The action columns of the final row of each trajectory may be
//! empty.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use clf_irl::systems::{ControlAffineSystem, Trajectory};
use nalgebra::DVector;

use crate::error::{CliError, CliResult};

pub fn trajectory_header(n: usize, m: Option<usize>) -> Vec<String> {
    let mut h = vec!["traj_id".to_string(), "t".to_string()];
    h.extend((1..=n).map(|i| format!("x{i}")));
    if let Some(m) = m {
        h.extend((1..=m).map(|i| format!("u{i}")));
    }
    h
}

/// Time index, line number, state and optional action.
type Row = (u64, usize, DVector<f64>, Option<DVector<f64>>);

struct Group {
    id: String,
    rows: Vec<Row>,
}

/// Reads, validates and groups trajectories. Rows of one trajectory must have
/// consecutive, increasing `t`; groups keep the order of first appearance.
pub fn ingest_trajectories(path: &Path, system: &ControlAffineSystem) -> CliResult<Vec<Trajectory>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let data_err = |line: usize, message: String| CliError::Data { path: path.to_path_buf(), line, message };

    let headers = reader.headers().map_err(|e| CliError::file(path, e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(CliError::file(path, "file is empty"));
    }
    let n = system.state_dim();
    let m = system.input_dim();
    let header: Vec<&str> = headers.iter().collect();
    let with_actions = if header == trajectory_header(n, Some(m)) {
        true
    } else if header == trajectory_header(n, None) {
        false
    } else {
        return Err(data_err(
            1,
            format!(
                "expected header '{}' or '{}', found '{}'",
                trajectory_header(n, None).join(","),
                trajectory_header(n, Some(m)).join(","),
                header.join(",")
            ),
        ));
    };

    let mut groups: Vec<Group> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen: HashSet<(String, u64)> = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            data_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let id = record[0].to_string();
        let t: u64 = record[1].parse().map_err(|_| data_err(line, format!("invalid time index '{}'", &record[1])))?;
        let number = |k: usize| -> CliResult<f64> {
            let v: f64 = record[k]
                .parse()
                .map_err(|_| data_err(line, format!("invalid number '{}' in column {}", &record[k], &headers[k])))?;
            if !v.is_finite() {
                return Err(data_err(line, format!("non-finite value in column {}", &headers[k])));
            }
            Ok(v)
        };
        let x = DVector::from_iterator(n, (2..2 + n).map(number).collect::<CliResult<Vec<_>>>()?);
        if !system.bounds().contains(&x) {
            return Err(data_err(line, format!("state {:?} lies outside the state-space bounds", x.as_slice())));
        }
        let u = if with_actions && (2 + n..2 + n + m).any(|k| !record[k].is_empty()) {
            Some(DVector::from_iterator(m, (2 + n..2 + n + m).map(number).collect::<CliResult<Vec<_>>>()?))
        } else {
            None
        };
        if !seen.insert((id.clone(), t)) {
            return Err(data_err(line, format!("duplicate row for trajectory '{id}' at t = {t}")));
        }
        let g = *index.entry(id.clone()).or_insert_with(|| {
            groups.push(Group { id: id.clone(), rows: Vec::new() });
            groups.len() - 1
        });
        if let Some((prev, _, _, _)) = groups[g].rows.last() {
            if t <= *prev {
                return Err(data_err(
                    line,
                    format!("time index {t} of trajectory '{id}' does not increase (previous {prev})"),
                ));
            }
            if t != prev + 1 {
                return Err(data_err(line, format!("trajectory '{id}' skips from t = {prev} to t = {t}")));
            }
        }
        groups[g].rows.push((t, line, x, u));
    }
    if groups.is_empty() {
        return Err(CliError::file(path, "file contains no trajectories"));
    }

    groups
        .into_iter()
        .map(|g| {
            if g.rows.len() < 2 {
                return Err(data_err(
                    g.rows[0].1,
                    format!("trajectory '{}' has a single state and no transitions", g.id),
                ));
            }
            let steps = g.rows.len() - 1;
            let actions = if with_actions {
                let mut actions = Vec::with_capacity(steps);
                for (_, line, _, u) in &g.rows[..steps] {
                    match u {
                        Some(u) => actions.push(u.clone()),
                        None => return Err(data_err(*line, format!("missing action in trajectory '{}'", g.id))),
                    }
                }
                Some(actions)
            } else {
                None
            };
            let states = g.rows.into_iter().map(|(_, _, x, _)| x).collect();
            Trajectory::new(g.id, states, actions).map_err(|e| CliError::file(path, e.to_string()))
        })
        .collect()
}

/// Writes trajectories in the ingest format. Action columns are written when
/// every trajectory carries actions.
pub fn write_trajectories(path: &Path, trajectories: &[Trajectory], n: usize, m: usize) -> CliResult<()> {
    let with_actions = !trajectories.is_empty() && trajectories.iter().all(|t| t.actions.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(trajectory_header(n, with_actions.then_some(m))).map_err(|e| csv_err(path, e))?;
    for traj in trajectories {
        for (t, x) in traj.states.iter().enumerate() {
            let mut row = vec![traj.id.clone(), t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            if with_actions {
                let actions = traj.actions.as_ref().expect("checked above");
                match actions.get(t) {
                    Some(u) => row.extend(u.iter().map(|v| v.to_string())),
                    None => row.extend(std::iter::repeat_n(String::new(), m)),
                }
            }
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes a header and rows of numbers.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::file(path, format!("{other:?}")),
    }
}
