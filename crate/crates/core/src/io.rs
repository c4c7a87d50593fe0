//! Line-oriented CSV files for trajectories, disaster fields, flows and logs.
//!
//! Writers go through a temporary file and a rename, so a file either holds a
//! complete artifact or does not exist.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::LogRow;
use crate::error::{Error, Result};
use crate::mobility::{DisasterField, FlowMatrix, GridSpec, Point, Trajectory};

/// Writes `bytes` to `path` atomically, creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Header row from the record type, then one row per record.
pub fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn check_header(rdr: &mut csv::Reader<fs::File>, expected: &[&str], path: &Path) -> Result<()> {
    let h = rdr.headers()?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            msg: format!("{}: expected header `{}`, found `{}`", path.display(), expected.join(","), h.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(())
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| {
        Error::InvalidInput(format!("cannot open {}: {e}", path.display()))
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn row_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { line, column: 1, msg: format!("{}: {e}", path.display()) }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajRow {
    user_id: String,
    slot: usize,
    loc: usize,
}

/// Rows sorted by `(user_id, slot)`.
pub fn trajectories_to_csv(trajs: &[Trajectory]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&Trajectory> = trajs.iter().collect();
    sorted.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    to_csv(sorted.into_iter().flat_map(|t| {
        t.points().iter().map(|p| TrajRow { user_id: t.user_id.clone(), slot: p.slot, loc: p.loc })
    }))
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    write_atomic(path, &trajectories_to_csv(trajs)?)
}

/// Reads `user_id,slot,loc` rows and validates every trajectory against `grid`.
pub fn read_trajectories(path: &Path, grid: &GridSpec) -> Result<Vec<Trajectory>> {
    let mut rdr = reader(path)?;
    check_header(&mut rdr, &["user_id", "slot", "loc"], path)?;
    let mut by_user: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    for r in rdr.deserialize::<TrajRow>() {
        let r = r.map_err(|e| row_error(path, e))?;
        by_user.entry(r.user_id).or_default().push(Point { slot: r.slot, loc: r.loc });
    }
    by_user
        .into_iter()
        .map(|(u, mut pts)| {
            pts.sort_by_key(|p| p.slot);
            let t = Trajectory::from_points(u, pts)?;
            t.validate(grid)?;
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldRow {
    loc: usize,
    slot: usize,
    intensity: f64,
}

/// Nonzero entries only; omitted rows mean 0.
pub fn field_to_csv(field: &DisasterField) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for loc in 0..field.n_locations() {
        for slot in 0..field.n_slots() {
            let v = field.at(loc, slot);
            if v != 0.0 {
                rows.push(FieldRow { loc, slot, intensity: v });
            }
        }
    }
    to_csv(rows)
}

pub fn write_field(path: &Path, field: &DisasterField) -> Result<()> {
    write_atomic(path, &field_to_csv(field)?)
}

/// Reads a field file onto `grid`; the onset and labels come from the caller.
pub fn read_field(path: &Path, grid: &GridSpec, onset_slot: usize, disaster_type: &str, city: &str) -> Result<DisasterField> {
    let (l, t_n) = (grid.n_locations(), grid.n_slots());
    let mut v = vec![0.0; l * t_n];
    let mut rdr = reader(path)?;
    check_header(&mut rdr, &["loc", "slot", "intensity"], path)?;
    for r in rdr.deserialize::<FieldRow>() {
        let r = r.map_err(|e| row_error(path, e))?;
        if r.loc >= l || r.slot >= t_n {
            return Err(Error::InvalidInput(format!(
                "{}: entry (loc {}, slot {}) outside the {l} x {t_n} grid",
                path.display(),
                r.loc,
                r.slot
            )));
        }
        v[r.loc * t_n + r.slot] = r.intensity;
    }
    DisasterField::new(l, t_n, v, onset_slot, disaster_type, city)
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowRow {
    loc: usize,
    slot: usize,
    count: f64,
}

pub fn flow_to_csv(flow: &FlowMatrix) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for loc in 0..flow.n_locations() {
        for slot in 0..flow.n_slots() {
            rows.push(FlowRow { loc, slot, count: flow.get(loc, slot) });
        }
    }
    to_csv(rows)
}

pub fn read_flow(path: &Path, grid: &GridSpec) -> Result<FlowMatrix> {
    let mut f = FlowMatrix::zeros(grid.n_locations(), grid.n_slots());
    let mut rdr = reader(path)?;
    check_header(&mut rdr, &["loc", "slot", "count"], path)?;
    for r in rdr.deserialize::<FlowRow>() {
        let r = r.map_err(|e| row_error(path, e))?;
        if r.loc >= f.n_locations() || r.slot >= f.n_slots() || !(r.count >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "{}: bad flow entry (loc {}, slot {}, count {})",
                path.display(),
                r.loc,
                r.slot,
                r.count
            )));
        }
        f.set(r.loc, r.slot, r.count);
    }
    Ok(f)
}

/// `step,loss_diff,loss_phy,loss_total`.
pub fn log_to_csv(rows: &[LogRow]) -> Result<Vec<u8>> {
    to_csv(rows.iter())
}
