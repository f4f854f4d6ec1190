use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clf_irl::systems::{builtin_lqr_system, builtin_nonlinear_system, Trajectory};
use clf_irl_cli::trajectory_csv::{ingest_trajectories, write_table, write_trajectories};
use clf_irl_cli::CliError;
use nalgebra::DVector;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// `count` trajectories of `rows` states each on the nonlinear box.
fn synthetic(count: usize, rows: usize, with_actions: bool) -> String {
    let mut text = String::from(if with_actions { "traj_id,t,x1,x2,u1,u2\n" } else { "traj_id,t,x1,x2\n" });
    for k in 0..count {
        for t in 0..rows {
            let x1 = 0.1 * k as f64 + 0.37 * t as f64;
            let x2 = 5.0 - 0.41 * t as f64 + 1.0 / 3.0;
            write!(text, "traj-{k},{t},{x1},{x2}").unwrap();
            if with_actions {
                if t + 1 < rows {
                    write!(text, ",{},{}", -0.5 * x1, 0.25).unwrap();
                } else {
                    text.push_str(",,");
                }
            }
            text.push('\n');
        }
    }
    text
}

fn data_error(result: Result<Vec<Trajectory>, CliError>) -> (usize, String) {
    match result {
        Err(CliError::Data { line, message, .. }) => (line, message),
        Err(other) => panic!("expected a data error, got {other}"),
        Ok(t) => panic!("expected a data error, got {} trajectories", t.len()),
    }
}

#[test]
fn groups_rows_into_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let path = write(dir.path(), "demo.csv", &synthetic(4, 12, false));
    let trajs = ingest_trajectories(&path, &system).unwrap();
    assert_eq!(trajs.len(), 4);
    assert_eq!(trajs.iter().map(|t| t.horizon()).sum::<usize>(), 44);
    assert_eq!(trajs.iter().map(|t| t.id.as_str()).collect::<Vec<_>>(), ["traj-0", "traj-1", "traj-2", "traj-3"]);
    assert!(trajs.iter().all(|t| t.actions.is_none()));
}

#[test]
fn interleaved_rows_keep_their_order() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let text = "traj_id,t,x1,x2\nb,0,1,1\na,0,2,2\nb,1,1.5,1.5\na,1,2.5,2.5\n";
    let trajs = ingest_trajectories(&write(dir.path(), "mix.csv", text), &system).unwrap();
    assert_eq!(trajs[0].id, "b");
    assert_eq!(trajs[1].states[1], DVector::from_row_slice(&[2.5, 2.5]));
}

#[test]
fn actions_are_read_when_present() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let path = write(dir.path(), "acts.csv", &synthetic(2, 5, true));
    let trajs = ingest_trajectories(&path, &system).unwrap();
    let actions = trajs[0].actions.as_ref().unwrap();
    assert_eq!(actions.len(), 4);
    assert_eq!(actions[0][1], 0.25);
}

#[test]
fn csv_round_trip_preserves_every_digit() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let source = ingest_trajectories(&write(dir.path(), "a.csv", &synthetic(3, 7, true)), &system).unwrap();
    let copy = dir.path().join("b.csv");
    write_trajectories(&copy, &source, 2, 2).unwrap();
    let back = ingest_trajectories(&copy, &system).unwrap();
    assert_eq!(back, source);
    let thirds = vec![vec![1.0 / 3.0, std::f64::consts::PI, -1e-17]];
    let table = dir.path().join("t.csv");
    write_table(&table, &["a".into(), "b".into(), "c".into()], &thirds).unwrap();
    let text = std::fs::read_to_string(&table).unwrap();
    let parsed: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(parsed, thirds[0]);
}

#[test]
fn empty_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let err = ingest_trajectories(&write(dir.path(), "empty.csv", ""), &system).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");
    let header_only = write(dir.path(), "header.csv", "traj_id,t,x1,x2\n");
    assert!(ingest_trajectories(&header_only, &system).is_err());
}

#[test]
fn wrong_header_is_reported_on_line_one() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let path = write(dir.path(), "h.csv", "id,t,x1,x2\na,0,1,1\n");
    let (line, message) = data_error(ingest_trajectories(&path, &system));
    assert_eq!(line, 1);
    assert!(message.contains("traj_id,t,x1,x2"), "{message}");
}

#[test]
fn duplicate_rows_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let path = write(dir.path(), "dup.csv", "traj_id,t,x1,x2\nq,0,1,1\nq,1,2,2\nq,1,2,2\n");
    let (line, message) = data_error(ingest_trajectories(&path, &system));
    assert_eq!(line, 4);
    assert!(message.contains("'q'") && message.contains("t = 1"), "{message}");
}

#[test]
fn time_must_increase_without_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let back = write(dir.path(), "back.csv", "traj_id,t,x1,x2\nq,1,1,1\nq,0,2,2\n");
    let (line, message) = data_error(ingest_trajectories(&back, &system));
    assert_eq!(line, 3);
    assert!(message.contains("does not increase"), "{message}");
    let gap = write(dir.path(), "gap.csv", "traj_id,t,x1,x2\nq,0,1,1\nq,2,2,2\n");
    let (line, message) = data_error(ingest_trajectories(&gap, &system));
    assert_eq!(line, 3);
    assert!(message.contains("skips"), "{message}");
}

#[test]
fn out_of_bounds_rows_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let path = write(dir.path(), "oob.csv", "traj_id,t,x1,x2\nq,0,1,1\nq,1,2,2\nq,2,9,2\n");
    let (line, message) = data_error(ingest_trajectories(&path, &system));
    assert_eq!(line, 4);
    assert!(message.contains("outside"), "{message}");
}

#[test]
fn malformed_values_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_lqr_system();
    for (name, text) in [
        ("nan.csv", "traj_id,t,x1,x2\nq,0,NaN,1\nq,1,1,1\n"),
        ("word.csv", "traj_id,t,x1,x2\nq,0,one,1\nq,1,1,1\n"),
        ("time.csv", "traj_id,t,x1,x2\nq,zero,1,1\nq,1,1,1\n"),
    ] {
        let (line, _) = data_error(ingest_trajectories(&write(dir.path(), name, text), &system));
        assert_eq!(line, 2, "{name}");
    }
    let short = write(dir.path(), "short.csv", "traj_id,t,x1,x2\nq,0,1\n");
    assert!(ingest_trajectories(&short, &system).is_err());
}

#[test]
fn missing_actions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let path = write(dir.path(), "gap.csv", "traj_id,t,x1,x2,u1,u2\nq,0,1,1,,\nq,1,2,2,,\n");
    let (line, message) = data_error(ingest_trajectories(&path, &system));
    assert_eq!(line, 2);
    assert!(message.contains("missing action"), "{message}");
}

#[test]
fn single_state_trajectories_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let system = builtin_nonlinear_system(None).unwrap();
    let path = write(dir.path(), "one.csv", "traj_id,t,x1,x2\nq,0,1,1\n");
    let (line, message) = data_error(ingest_trajectories(&path, &system));
    assert_eq!(line, 2);
    assert!(message.contains("single state"), "{message}");
}
