//! Run-directory persistence.
//!
//! A solve is stored as a directory of plain files:
//!
//! * `spec.prob` — the problem instance (canonical problem-file text),
//! * `control.csv` — header `t,u1,…,um`, one row per time step, t the step's
//!   left endpoint,
//! * `state.csv`, `costate.csv` — header `t,x,value`, interior nodes,
//!   row-major in t,
//! * `mu.csv` — header `t,weight_1,mu_1,…`: nodal measure atoms and the
//!   reconstructed multiplier values,
//! * `log.json` — the iteration history.
//!
//! Floats are written in shortest round-trip form, so re-reading a directory
//! reproduces the solve bit for bit.

use crate::model::{
    read_problem_file, render_problem_file, Control, Field, MeasureWeights, ModelError,
    SpaceTimeGrid, ValidatedSpec,
};
use crate::optim::{ConvergenceLog, MultiplierBundle, Trajectory};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RundirError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed run directory: {0}")]
    Schema(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn schema(msg: impl Into<String>) -> RundirError {
    RundirError::Schema(msg.into())
}

/// Everything needed to re-run the condition checks on a stored solve.
#[derive(Debug)]
pub struct RunData {
    pub spec: ValidatedSpec,
    pub grid: SpaceTimeGrid,
    pub u: Control,
    pub y: Field,
    pub mu: MeasureWeights,
}

pub fn write_run_dir(
    dir: &Path,
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    trajectory: &Trajectory,
    bundle: &MultiplierBundle,
    log: &ConvergenceLog,
) -> Result<(), RundirError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("spec.prob"), render_problem_file(spec))?;

    let mut w = csv::Writer::from_path(dir.join("control.csv"))?;
    let mut header = vec!["t".to_owned()];
    header.extend((1..=spec.m).map(|i| format!("u{i}")));
    w.write_record(&header)?;
    for k in 0..grid.n_t {
        let mut row = vec![format!("{}", grid.t(k))];
        row.extend((0..spec.m).map(|i| format!("{}", trajectory.u.value(i, k))));
        w.write_record(&row)?;
    }
    w.flush()?;

    write_field(&dir.join("state.csv"), grid, &trajectory.y)?;
    write_field(&dir.join("costate.csv"), grid, &bundle.p)?;

    let mut w = csv::Writer::from_path(dir.join("mu.csv"))?;
    let mut header = vec!["t".to_owned()];
    for j in 1..=spec.q {
        header.push(format!("weight_{j}"));
        header.push(format!("mu_{j}"));
    }
    w.write_record(&header)?;
    let mu_values: Vec<Vec<f64>> = (0..spec.q).map(|j| bundle.mu.mu_values(j)).collect();
    for k in 0..=grid.n_t {
        let mut row = vec![format!("{}", grid.t(k))];
        for j in 0..spec.q {
            row.push(format!("{}", bundle.mu.weight(j, k)));
            row.push(format!("{}", mu_values[j][k]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut f = std::fs::File::create(dir.join("log.json"))?;
    serde_json::to_writer_pretty(&mut f, log)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Field CSV: header `t,x,value`, interior nodes, row-major in t.
pub fn write_field(path: &Path, grid: &SpaceTimeGrid, field: &Field) -> Result<(), RundirError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "value"])?;
    for k in 0..=grid.n_t {
        let t = grid.t(k);
        for i in 0..grid.n_x {
            w.write_record(&[
                format!("{t}"),
                format!("{}", grid.x(i)),
                format!("{}", field.at(k, i)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_run_dir(dir: &Path) -> Result<RunData, RundirError> {
    let spec_path = dir.join("spec.prob");
    if !spec_path.exists() {
        return Err(schema(format!("{} is missing spec.prob", dir.display())));
    }
    let spec = read_problem_file(&std::fs::read_to_string(spec_path)?)?;

    // Controls: infer the step count, check the component count.
    let mut rdr = csv::Reader::from_path(dir.join("control.csv"))?;
    let m = rdr.headers()?.len().saturating_sub(1);
    if m != spec.m {
        return Err(schema(format!("control.csv has {m} components, spec has {}", spec.m)));
    }
    let mut components: Vec<Vec<f64>> = vec![Vec::new(); m];
    for record in rdr.records() {
        let record = record?;
        for i in 0..m {
            components[i].push(parse_float(record.get(i + 1), "control.csv")?);
        }
    }
    let n_t = components.first().map_or(0, |c| c.len());
    if n_t < 2 {
        return Err(schema("control.csv has fewer than two steps"));
    }
    let u = Control::from_components(components);

    // State: infer the spatial size from the first time block.
    let mut rdr = csv::Reader::from_path(dir.join("state.csv"))?;
    let mut values = Vec::new();
    let mut first_t = None;
    let mut n_x = 0usize;
    for record in rdr.records() {
        let record = record?;
        let t = parse_float(record.get(0), "state.csv")?;
        match first_t {
            None => {
                first_t = Some(t);
                n_x = 1;
            }
            Some(t0) if t == t0 => n_x += 1,
            Some(_) => {}
        }
        values.push(parse_float(record.get(2), "state.csv")?);
    }
    if n_x == 0 || values.len() % n_x != 0 {
        return Err(schema("state.csv rows do not tile a space-time grid"));
    }
    let rows = values.len() / n_x;
    if rows != n_t + 1 {
        return Err(schema(format!(
            "state.csv has {rows} time nodes but control.csv has {n_t} steps"
        )));
    }
    let y = Field::from_rows(n_x, n_t, values);

    let mut rdr = csv::Reader::from_path(dir.join("mu.csv"))?;
    let mut mu = MeasureWeights::zeros(spec.q, n_t);
    let mut k = 0usize;
    for record in rdr.records() {
        let record = record?;
        if k > n_t {
            return Err(schema("mu.csv has more rows than time nodes"));
        }
        for j in 0..spec.q {
            *mu.weight_mut(j, k) = parse_float(record.get(1 + 2 * j), "mu.csv")?;
        }
        k += 1;
    }
    if k != n_t + 1 {
        return Err(schema(format!("mu.csv has {k} rows, expected {}", n_t + 1)));
    }

    let grid = SpaceTimeGrid::new(spec.l, spec.t_final, n_x, n_t);
    Ok(RunData { spec, grid, u, y, mu })
}

fn parse_float(field: Option<&str>, file: &str) -> Result<f64, RundirError> {
    field
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| schema(format!("{file}: malformed numeric field")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference_instance;
    use crate::optim::{solve_ocp, SolveOptions};

    #[test]
    fn run_dir_round_trip() {
        let spec = reference_instance(15, 24);
        let mut small = spec.clone().into_inner();
        small.d = vec![-1e6];
        let small = crate::model::validate(&small).unwrap();
        let grid = small.grid;
        let opts = SolveOptions { outer_iters: 2, inner_iters: 10, ..SolveOptions::default() };
        let out = solve_ocp(&small, &grid, &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), &small, &grid, &out.trajectory, &out.bundle, &out.log).unwrap();
        let back = read_run_dir(dir.path()).unwrap();
        assert_eq!(*back.spec, *small);
        assert_eq!(back.u, out.trajectory.u);
        assert_eq!(back.y, out.trajectory.y);
        assert_eq!(back.mu, out.bundle.mu);
        assert_eq!(back.grid, grid);
    }

    #[test]
    fn empty_directory_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        match read_run_dir(dir.path()) {
            Err(RundirError::Schema(msg)) => assert!(msg.contains("spec.prob")),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_state_is_schema_error() {
        let spec = reference_instance(15, 24);
        let mut small = spec.clone().into_inner();
        small.d = vec![-1e6];
        let small = crate::model::validate(&small).unwrap();
        let grid = small.grid;
        let opts = SolveOptions { outer_iters: 1, inner_iters: 5, ..SolveOptions::default() };
        let out = solve_ocp(&small, &grid, &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), &small, &grid, &out.trajectory, &out.bundle, &out.log).unwrap();
        let state = std::fs::read_to_string(dir.path().join("state.csv")).unwrap();
        let truncated: Vec<&str> = state.lines().take(50).collect();
        std::fs::write(dir.path().join("state.csv"), truncated.join("\n")).unwrap();
        assert!(matches!(read_run_dir(dir.path()), Err(RundirError::Schema(_))));
    }
}
