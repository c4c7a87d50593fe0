//! Trajectory encoder and decoder.
//!
//! A point at `(slot, loc)` is embedded as the row `[D[loc]; P[day-of-week];
//! Z[slot-of-day]]`. `D` is a fixed spectral embedding of the grid's distance
//! graph with unit-norm rows, so nearest-row decoding by cosine similarity
//! inverts it exactly. Only the `D` segment is ever noised.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::{GridSpec, Trajectory};
use crate::nn::Tensor;

pub const DAYS_PER_WEEK: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Width `W` of the location embedding and of the slot-of-day table.
    #[serde(default = "default_spatial_width")]
    pub spatial_width: usize,
    /// Width `w` of the day-of-week table.
    #[serde(default = "default_temporal_width")]
    pub temporal_width: usize,
    /// Graph radius in cell edges.
    #[serde(default = "default_radius_cells")]
    pub radius_cells: f64,
}

fn default_spatial_width() -> usize {
    8
}

fn default_temporal_width() -> usize {
    4
}

fn default_radius_cells() -> f64 {
    1.5
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            spatial_width: default_spatial_width(),
            temporal_width: default_temporal_width(),
            radius_cells: default_radius_cells(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_width == 0 {
            return Err(Error::config("model.codec.spatial_width", "must be >= 1"));
        }
        if self.temporal_width == 0 {
            return Err(Error::config("model.codec.temporal_width", "must be >= 1"));
        }
        if !(self.radius_cells > 0.0) || !self.radius_cells.is_finite() {
            return Err(Error::config("model.codec.radius_cells", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Full embedding row width `W + w + W`.
    pub fn row_width(&self) -> usize {
        2 * self.spatial_width + self.temporal_width
    }

    /// Location embedding for a grid under this configuration.
    pub fn location_embedding(&self, grid: &GridSpec) -> Result<Tensor> {
        let graph = build_spatial_graph(grid, self.radius_cells * grid.cell_km)?;
        embed_locations(&graph, self.spatial_width)
    }
}

/// Cosine similarities closer than this count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGraph {
    pub n_nodes: usize,
    /// `(u, v, km)` with `u < v`.
    pub edges: Vec<(usize, usize, f64)>,
    pub radius_km: f64,
    /// Set when no pair of cells lies within the radius.
    pub edgeless: bool,
}

/// Edges between every pair of distinct cells at most `radius_km` apart.
pub fn build_spatial_graph(grid: &GridSpec, radius_km: f64) -> Result<SpatialGraph> {
    if !(radius_km > 0.0) || !radius_km.is_finite() {
        return Err(Error::config("codec.radius_km", "must be finite and > 0"));
    }
    let n = grid.n_locations();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let d = grid.distance_km(u, v);
            if d > 0.0 && d <= radius_km * (1.0 + 1e-12) {
                edges.push((u, v, d));
            }
        }
    }
    let edgeless = edges.is_empty();
    if edgeless {
        log::warn!("spatial graph with radius {radius_km} km has no edges");
    }
    Ok(SpatialGraph { n_nodes: n, edges, radius_km, edgeless })
}

/// `L x W` location embedding with unit-norm rows.
///
/// Rows come from the eigenvectors of the symmetric-normalized Laplacian with
/// Gaussian affinities `exp(-d^2 / (2 r^2))`, skipping the smallest
/// eigenvalue, each eigenvector signed so its first nonzero entry is positive.
pub fn embed_locations(graph: &SpatialGraph, width: usize) -> Result<Tensor> {
    let n = graph.n_nodes;
    if n == 0 {
        return Err(Error::InvalidInput("spatial graph has no nodes".into()));
    }
    if width == 0 || width >= n {
        return Err(Error::config(
            "codec.spatial_width",
            format!("width {width} needs 1 <= width < {n} (number of locations)"),
        ));
    }
    let r2 = 2.0 * graph.radius_km * graph.radius_km;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for &(u, v, d) in &graph.edges {
        let w = (-d * d / r2).exp();
        a[(u, v)] = w;
        a[(v, u)] = w;
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = a.row(i).sum();
            if deg > 0.0 { 1.0 / deg.sqrt() } else { 0.0 }
        })
        .collect();
    let mut lap = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            if a[(i, j)] != 0.0 {
                lap[(i, j)] -= inv_sqrt_deg[i] * a[(i, j)] * inv_sqrt_deg[j];
            }
        }
    }
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));

    let mut data = vec![0.0; n * width];
    for (k, &col) in order.iter().skip(1).take(width).enumerate() {
        let v = eig.eigenvectors.column(col);
        let sign = v.iter().find(|x| x.abs() > 1e-12).map_or(1.0, |x| x.signum());
        for i in 0..n {
            data[i * width + k] = sign * v[i];
        }
    }
    for (i, row) in data.chunks_mut(width).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::InsufficientData(format!(
                "location {i} has a zero spectral embedding; raise codec.radius_km or codec.spatial_width"
            )));
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Tensor::from_vec(&[n, width], data)
}

/// `(day-of-week row, slot-of-day row)` for an absolute slot.
pub fn temporal_index(grid: &GridSpec, slot: usize) -> (usize, usize) {
    (grid.day_of(slot) % DAYS_PER_WEEK, grid.slot_of_day(slot))
}

/// Row-wise `[D[loc]; P[dow]; Z[slot-of-day]]`.
pub fn encode(traj: &Trajectory, p: &Tensor, z: &Tensor, d: &Tensor, grid: &GridSpec) -> Result<Tensor> {
    if p.rows() != DAYS_PER_WEEK || z.rows() != grid.slots_per_day || d.rows() != grid.n_locations() {
        return Err(Error::InvalidShape(format!(
            "tables have {}/{}/{} rows, grid needs {DAYS_PER_WEEK}/{}/{}",
            p.rows(),
            z.rows(),
            d.rows(),
            grid.slots_per_day,
            grid.n_locations()
        )));
    }
    let width = d.cols() + p.cols() + z.cols();
    let mut out = Vec::with_capacity(traj.len() * width);
    for pt in traj.points() {
        if pt.loc >= d.rows() {
            return Err(Error::InvalidInput(format!(
                "user {}: location {} outside {} locations",
                traj.user_id,
                pt.loc,
                d.rows()
            )));
        }
        if pt.slot >= grid.n_slots() {
            return Err(Error::InvalidInput(format!("user {}: slot {} outside the grid", traj.user_id, pt.slot)));
        }
        let (dow, sod) = temporal_index(grid, pt.slot);
        out.extend_from_slice(d.row(pt.loc));
        out.extend_from_slice(p.row(dow));
        out.extend_from_slice(z.row(sod));
    }
    Tensor::from_vec(&[traj.len(), width], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub locations: Vec<usize>,
    /// Rows whose spatial segment had zero norm; decoded to location 0.
    pub degenerate: Vec<bool>,
}

/// Nearest row of `d` by cosine similarity for one spatial segment; ties go to
/// the lowest index. `None` for a zero segment.
pub fn nearest_location(segment: &[f64], d: &Tensor) -> Option<usize> {
    let norm = segment.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for l in 0..d.rows() {
        let row = d.row(l);
        let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot: f64 = row.iter().zip(segment).map(|(a, b)| a * b).sum();
        let sim = dot / (norm * rn);
        if best.is_none_or(|(_, b)| sim > b + TIE_TOLERANCE) {
            best = Some((l, sim));
        }
    }
    best.map(|(l, _)| l)
}

/// Decodes the leading `D`-width segment of each row of `e`.
pub fn decode(e: &Tensor, d: &Tensor) -> Result<Decoded> {
    let w = d.cols();
    if e.cols() < w {
        return Err(Error::InvalidShape(format!("rows of width {} lack a {w}-wide spatial segment", e.cols())));
    }
    let mut locations = Vec::with_capacity(e.rows());
    let mut degenerate = Vec::with_capacity(e.rows());
    for r in 0..e.rows() {
        match nearest_location(&e.row(r)[..w], d) {
            Some(l) => {
                locations.push(l);
                degenerate.push(false);
            }
            None => {
                locations.push(0);
                degenerate.push(true);
            }
        }
    }
    Ok(Decoded { locations, degenerate })
}
