//! Grids, trajectories, disaster fields and flows, plus the per-trajectory
//! behavioral statistics used by the metric suite.
//!
//! Locations are cells of a uniform grid indexed row-major; every distance is
//! measured between cell centers in kilometers. Trajectories are dense: one
//! point per slot over their covered range.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minutes in a day; `slots_per_day * slot_minutes` must equal this.
pub const MINUTES_PER_DAY: usize = 1440;

/// Default minimum records per covered day kept by [`filter_users`].
pub const DEFAULT_MIN_RECORDS_PER_DAY: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_km: f64,
    pub slots_per_day: usize,
    pub days: usize,
    pub slot_minutes: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::config("grid.rows", "grid must have at least one cell"));
        }
        if !(self.cell_km > 0.0) || !self.cell_km.is_finite() {
            return Err(Error::config("grid.cell_km", "must be a positive finite number"));
        }
        if self.days == 0 {
            return Err(Error::config("grid.days", "must be at least 1"));
        }
        if self.slots_per_day == 0 || self.slots_per_day * self.slot_minutes != MINUTES_PER_DAY {
            return Err(Error::config(
                "grid.slots_per_day",
                format!(
                    "slots_per_day * slot_minutes must be {MINUTES_PER_DAY} (got {} * {})",
                    self.slots_per_day, self.slot_minutes
                ),
            ));
        }
        Ok(())
    }

    /// Number of locations `L`.
    pub fn n_locations(&self) -> usize {
        self.rows * self.cols
    }

    /// Number of time slots `T = days * slots_per_day`.
    pub fn n_slots(&self) -> usize {
        self.days * self.slots_per_day
    }

    /// Cell center in kilometers as `(x, y)`.
    pub fn center(&self, loc: usize) -> (f64, f64) {
        let r = loc / self.cols;
        let c = loc % self.cols;
        ((c as f64 + 0.5) * self.cell_km, (r as f64 + 0.5) * self.cell_km)
    }

    pub fn distance_km(&self, a: usize, b: usize) -> f64 {
        let (ax, ay) = self.center(a);
        let (bx, by) = self.center(b);
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    pub fn day_of(&self, slot: usize) -> usize {
        slot / self.slots_per_day
    }

    pub fn slot_of_day(&self, slot: usize) -> usize {
        slot % self.slots_per_day
    }

    /// Night slots are those starting before 07:00 or at/after 22:00.
    pub fn is_night(&self, slot: usize) -> bool {
        let minute = self.slot_of_day(slot) * self.slot_minutes;
        minute < 7 * 60 || minute >= 22 * 60
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub slot: usize,
    pub loc: usize,
}

/// One user's dense, slot-ordered sequence of visited cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: String,
    points: Vec<Point>,
}

impl Trajectory {
    /// Builds a trajectory from explicit points, checking that slots are
    /// strictly increasing and contiguous.
    pub fn from_points(user_id: impl Into<String>, points: Vec<Point>) -> Result<Self> {
        let user_id = user_id.into();
        if points.is_empty() {
            return Err(Error::InvalidInput(format!("trajectory of user `{user_id}` is empty")));
        }
        for w in points.windows(2) {
            if w[1].slot != w[0].slot + 1 {
                return Err(Error::InvalidInput(format!(
                    "trajectory of user `{user_id}` is not dense and strictly increasing at slot {}",
                    w[1].slot
                )));
            }
        }
        Ok(Self { user_id, points })
    }

    /// Trajectory starting at `start_slot` with one location per slot.
    pub fn new(user_id: impl Into<String>, start_slot: usize, locs: &[usize]) -> Result<Self> {
        let points = locs
            .iter()
            .enumerate()
            .map(|(i, &loc)| Point { slot: start_slot + i, loc })
            .collect();
        Self::from_points(user_id, points)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start_slot(&self) -> usize {
        self.points[0].slot
    }

    pub fn end_slot(&self) -> usize {
        self.points[self.points.len() - 1].slot
    }

    pub fn locations(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.loc).collect()
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let l = grid.n_locations();
        let t = grid.n_slots();
        for p in &self.points {
            if p.loc >= l || p.slot >= t {
                return Err(Error::InvalidInput(format!(
                    "user `{}` has point (slot {}, loc {}) outside grid of {l} locations and {t} slots",
                    self.user_id, p.slot, p.loc
                )));
            }
        }
        Ok(())
    }

    /// Splits into one trajectory per calendar day covered.
    pub fn split_days(&self, grid: &GridSpec) -> Vec<Trajectory> {
        let mut out: Vec<Trajectory> = Vec::new();
        let mut current: Vec<Point> = Vec::new();
        let mut day = grid.day_of(self.start_slot());
        for p in &self.points {
            if grid.day_of(p.slot) != day {
                out.push(Trajectory { user_id: self.user_id.clone(), points: std::mem::take(&mut current) });
                day = grid.day_of(p.slot);
            }
            current.push(*p);
        }
        if !current.is_empty() {
            out.push(Trajectory { user_id: self.user_id.clone(), points: current });
        }
        out
    }

    /// Sub-trajectory restricted to `[start, start + len)`, if it overlaps.
    pub fn window(&self, start: usize, len: usize) -> Option<Trajectory> {
        let pts: Vec<Point> = self
            .points
            .iter()
            .copied()
            .filter(|p| p.slot >= start && p.slot < start + len)
            .collect();
        if pts.is_empty() {
            None
        } else {
            Some(Trajectory { user_id: self.user_id.clone(), points: pts })
        }
    }

    pub fn with_user_id(&self, user_id: impl Into<String>) -> Trajectory {
        Trajectory { user_id: user_id.into(), points: self.points.clone() }
    }
}

/// Per-location per-slot disaster intensity, stored `L x T` row-major by location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisasterField {
    n_locations: usize,
    n_slots: usize,
    intensity: Vec<f64>,
    pub onset_slot: usize,
    pub disaster_type: String,
    pub city: String,
    pub unit: String,
}

impl DisasterField {
    pub fn new(
        n_locations: usize,
        n_slots: usize,
        intensity: Vec<f64>,
        onset_slot: usize,
        disaster_type: impl Into<String>,
        city: impl Into<String>,
    ) -> Result<Self> {
        if intensity.len() != n_locations * n_slots {
            return Err(Error::InvalidShape(format!(
                "field has {} entries, expected {n_locations} x {n_slots}",
                intensity.len()
            )));
        }
        for loc in 0..n_locations {
            for t in 0..n_slots {
                let v = intensity[loc * n_slots + t];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "intensity at (loc {loc}, slot {t}) is {v}; must be finite and >= 0"
                    )));
                }
                if t < onset_slot && v != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "intensity at (loc {loc}, slot {t}) is nonzero before onset slot {onset_slot}"
                    )));
                }
            }
        }
        Ok(Self {
            n_locations,
            n_slots,
            intensity,
            onset_slot,
            disaster_type: disaster_type.into(),
            city: city.into(),
            unit: String::new(),
        })
    }

    /// A field that is zero everywhere.
    pub fn zeros(n_locations: usize, n_slots: usize, onset_slot: usize) -> Self {
        Self {
            n_locations,
            n_slots,
            intensity: vec![0.0; n_locations * n_slots],
            onset_slot,
            disaster_type: "none".into(),
            city: String::new(),
            unit: String::new(),
        }
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn at(&self, loc: usize, slot: usize) -> f64 {
        self.intensity[loc * self.n_slots + slot]
    }

    pub fn max_intensity(&self) -> f64 {
        self.intensity.iter().copied().fold(0.0, f64::max)
    }

    /// Slot with the largest total intensity; ties resolve to the earliest slot.
    pub fn peak_slot(&self) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for t in 0..self.n_slots {
            let s: f64 = (0..self.n_locations).map(|l| self.at(l, t)).sum();
            if s > best.1 {
                best = (t, s);
            }
        }
        best.0
    }

    pub fn is_zero(&self) -> bool {
        self.intensity.iter().all(|&v| v == 0.0)
    }
}

/// Location x slot visit counts. Real-valued so predicted flows share the type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMatrix {
    n_locations: usize,
    n_slots: usize,
    counts: Vec<f64>,
}

impl FlowMatrix {
    pub fn zeros(n_locations: usize, n_slots: usize) -> Self {
        Self { n_locations, n_slots, counts: vec![0.0; n_locations * n_slots] }
    }

    pub fn from_vec(n_locations: usize, n_slots: usize, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != n_locations * n_slots {
            return Err(Error::InvalidShape(format!(
                "flow has {} entries, expected {n_locations} x {n_slots}",
                counts.len()
            )));
        }
        if let Some(v) = counts.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!("flow entry {v} must be finite and >= 0")));
        }
        Ok(Self { n_locations, n_slots, counts })
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn get(&self, loc: usize, slot: usize) -> f64 {
        self.counts[loc * self.n_slots + slot]
    }

    pub fn set(&mut self, loc: usize, slot: usize, v: f64) {
        self.counts[loc * self.n_slots + slot] = v;
    }

    pub fn add(&mut self, loc: usize, slot: usize, v: f64) {
        self.counts[loc * self.n_slots + slot] += v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.counts
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn same_shape(&self, other: &FlowMatrix) -> bool {
        self.n_locations == other.n_locations && self.n_slots == other.n_slots
    }

    pub fn scaled(&self, factor: f64) -> FlowMatrix {
        FlowMatrix {
            n_locations: self.n_locations,
            n_slots: self.n_slots,
            counts: self.counts.iter().map(|v| v * factor).collect(),
        }
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn slot_window(&self, start: usize, len: usize) -> Result<FlowMatrix> {
        if start + len > self.n_slots {
            return Err(Error::InvalidInput(format!(
                "slot window [{start}, {}) exceeds {} slots",
                start + len,
                self.n_slots
            )));
        }
        let mut out = FlowMatrix::zeros(self.n_locations, len);
        for l in 0..self.n_locations {
            for t in 0..len {
                out.set(l, t, self.get(l, start + t));
            }
        }
        Ok(out)
    }
}

/// Train/validation/test partition over user indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Contiguous split of `0..n` by fractions; the test set takes the remainder.
    pub fn by_fraction(n: usize, train_frac: f64, val_frac: f64) -> Self {
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = (((n as f64) * val_frac).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        Self {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        }
    }

    pub fn validate(&self, n_users: usize) -> Result<()> {
        let mut seen = vec![false; n_users];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n_users {
                return Err(Error::InvalidInput(format!("split index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::InvalidInput(format!("user index {i} appears in more than one split")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidInput("splits do not cover every user".into()));
        }
        Ok(())
    }
}

/// Everything known about one city: normal and disaster-period mobility of the
/// same users, the disaster field, and a user-level split.
#[derive(Debug, Clone)]
pub struct CityDataset {
    pub name: String,
    pub grid: GridSpec,
    pub normal: Vec<Trajectory>,
    pub disaster: Vec<Trajectory>,
    pub field: DisasterField,
    pub splits: Splits,
}

impl CityDataset {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !self.disaster.is_empty() && self.disaster.len() != self.normal.len() {
            return Err(Error::InvalidInput(format!(
                "city `{}`: {} normal vs {} disaster trajectories",
                self.name,
                self.normal.len(),
                self.disaster.len()
            )));
        }
        for t in self.normal.iter().chain(&self.disaster) {
            t.validate(&self.grid)?;
        }
        if self.field.n_locations() != self.grid.n_locations() || self.field.n_slots() != self.grid.n_slots() {
            return Err(Error::InvalidShape(format!("city `{}`: field does not match grid", self.name)));
        }
        self.splits.validate(self.normal.len())
    }

    pub fn n_users(&self) -> usize {
        self.normal.len()
    }
}

/// Counts trajectory points per `(loc, slot)`.
pub fn aggregate_flow(trajs: &[Trajectory], grid: &GridSpec) -> Result<FlowMatrix> {
    let mut flow = FlowMatrix::zeros(grid.n_locations(), grid.n_slots());
    for t in trajs {
        t.validate(grid)?;
        for p in t.points() {
            flow.add(p.loc, p.slot, 1.0);
        }
    }
    Ok(flow)
}

/// Counts only points away from each trajectory's home cell (see [`home_location`]).
pub fn aggregate_out_of_home_flow(trajs: &[Trajectory], grid: &GridSpec) -> Result<FlowMatrix> {
    let mut flow = FlowMatrix::zeros(grid.n_locations(), grid.n_slots());
    for t in trajs {
        t.validate(grid)?;
        let home = home_location(t, grid);
        for p in t.points().iter().filter(|p| p.loc != home) {
            flow.add(p.loc, p.slot, 1.0);
        }
    }
    Ok(flow)
}

/// Most frequent location over night slots, or over all slots when the
/// trajectory has no night slot. Ties go to the lowest location index.
pub fn home_location(traj: &Trajectory, grid: &GridSpec) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for p in traj.points().iter().filter(|p| grid.is_night(p.slot)) {
        *counts.entry(p.loc).or_default() += 1;
    }
    if counts.is_empty() {
        for p in traj.points() {
            *counts.entry(p.loc).or_default() += 1;
        }
    }
    let mut best = (usize::MAX, 0usize);
    for (&loc, &c) in &counts {
        if c > best.1 {
            best = (loc, c);
        }
    }
    best.0
}

/// Total path length in kilometers.
pub fn travel_distance(traj: &Trajectory, grid: &GridSpec) -> f64 {
    traj.points().windows(2).map(|w| grid.distance_km(w[0].loc, w[1].loc)).sum()
}

/// RMS distance of visited cell centers from their visit-weighted centroid.
pub fn radius_of_gyration(traj: &Trajectory, grid: &GridSpec) -> f64 {
    let n = traj.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for p in traj.points() {
        let (x, y) = grid.center(p.loc);
        cx += x;
        cy += y;
    }
    cx /= n;
    cy /= n;
    let ss: f64 = traj
        .points()
        .iter()
        .map(|p| {
            let (x, y) = grid.center(p.loc);
            (x - cx).powi(2) + (y - cy).powi(2)
        })
        .sum();
    (ss / n).sqrt()
}

/// Run lengths of consecutive identical locations, in slots.
pub fn stay_durations(traj: &Trajectory) -> Vec<usize> {
    let mut out = Vec::new();
    let mut run = 0usize;
    let mut prev: Option<usize> = None;
    for p in traj.points() {
        match prev {
            Some(l) if l == p.loc => run += 1,
            Some(_) => {
                out.push(run);
                run = 1;
            }
            None => run = 1,
        }
        prev = Some(p.loc);
    }
    if run > 0 {
        out.push(run);
    }
    out
}

/// Distinct locations per covered day, in day order.
pub fn daily_locations(traj: &Trajectory, grid: &GridSpec) -> Vec<usize> {
    let mut per_day: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for p in traj.points() {
        per_day.entry(grid.day_of(p.slot)).or_default().insert(p.loc);
    }
    per_day.values().map(|s| s.len()).collect()
}

fn records_per_day(traj: &Trajectory, slots_per_day: usize) -> BTreeMap<usize, usize> {
    let mut per_day = BTreeMap::new();
    for p in traj.points() {
        *per_day.entry(p.slot / slots_per_day).or_insert(0usize) += 1;
    }
    per_day
}

/// Keeps the users whose every covered day has at least `min_records_per_day` points.
pub fn filter_users(trajs: &[Trajectory], grid: &GridSpec, min_records_per_day: usize) -> Vec<Trajectory> {
    trajs
        .iter()
        .filter(|t| records_per_day(t, grid.slots_per_day).values().all(|&c| c >= min_records_per_day))
        .cloned()
        .collect()
}
