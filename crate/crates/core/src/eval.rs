//! Distribution and decay metrics comparing generated trajectories to real ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::{
    daily_locations, radius_of_gyration, stay_durations, travel_distance, DisasterField, FlowMatrix, GridSpec,
    Trajectory,
};
use crate::physics::{fit_decay, FitOptions};
use crate::training::restrict;

/// Additive smoothing per bin before normalization.
pub const SMOOTHING: f64 = 1e-9;
pub const DEFAULT_BINS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub bin_edges: Vec<f64>,
    pub mass: Vec<f64>,
}

/// Smoothed, normalized counts; values outside the edges land in the end bins.
pub fn histogram(values: &[f64], edges: &[f64]) -> Result<Distribution> {
    if values.is_empty() {
        return Err(Error::InsufficientData("histogram of no values".into()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("histogram edges must be strictly ascending, at least two".into()));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![SMOOTHING; bins];
    for &v in values {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite value {v} in histogram input")));
        }
        // partition_point gives the number of edges <= v
        let k = edges.partition_point(|&e| e <= v);
        counts[k.clamp(1, bins) - 1] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    Ok(Distribution { bin_edges: edges.to_vec(), mass: counts.into_iter().map(|c| c / total).collect() })
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(a: &Distribution, b: &Distribution) -> Result<f64> {
    if a.bin_edges != b.bin_edges || a.mass.len() != b.mass.len() {
        return Err(Error::InvalidInput("distributions have different bin edges".into()));
    }
    let kl = |p: f64, m: f64| if p > 0.0 { p * (p / m).ln() } else { 0.0 };
    let mut s = 0.0;
    for (&p, &q) in a.mass.iter().zip(&b.mass) {
        let m = 0.5 * (p + q);
        s += 0.5 * kl(p, m) + 0.5 * kl(q, m);
    }
    Ok(s.clamp(0.0, std::f64::consts::LN_2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub percent: f64,
    /// Entries skipped because the truth was zero.
    pub excluded: usize,
}

/// `100 * mean(|pred - truth| / |truth|)` over entries with nonzero truth.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<Mape> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidInput(format!("mape over {} predictions and {} truths", pred.len(), truth.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        if t != 0.0 {
            sum += ((p - t) / t).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InsufficientData("every truth entry is zero".into()));
    }
    Ok(Mape { percent: 100.0 * sum / n as f64, excluded: pred.len() - n })
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `bins + 1` equal-width edges spanning the 1st to 99th percentile of `reference`.
pub fn percentile_edges(reference: &[f64], bins: usize) -> Result<Vec<f64>> {
    if reference.is_empty() {
        return Err(Error::InsufficientData("no reference values for histogram edges".into()));
    }
    if bins == 0 {
        return Err(Error::config("eval.bins", "must be >= 1"));
    }
    let mut s = reference.to_vec();
    s.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (quantile(&s, 0.01), quantile(&s, 0.99));
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    Ok((0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub jsd_distance: f64,
    pub jsd_radius: f64,
    pub jsd_duration: f64,
    pub jsd_dailyloc: f64,
}

/// The four per-trajectory statistic samples: distance, radius, stay
/// durations and distinct locations per day.
pub fn behavior_statistics(trajs: &[Trajectory], grid: &GridSpec) -> [Vec<f64>; 4] {
    let mut out: [Vec<f64>; 4] = Default::default();
    for t in trajs.iter().filter(|t| !t.is_empty()) {
        out[0].push(travel_distance(t, grid));
        out[1].push(radius_of_gyration(t, grid));
        out[2].extend(stay_durations(t).into_iter().map(|d| d as f64));
        out[3].extend(daily_locations(t, grid).into_iter().map(|d| d as f64));
    }
    out
}

pub fn behavior_report(real: &[Trajectory], gen: &[Trajectory], grid: &GridSpec, bins: usize) -> Result<BehaviorReport> {
    if real.is_empty() || gen.is_empty() {
        return Err(Error::InsufficientData(format!("{} real and {} generated trajectories", real.len(), gen.len())));
    }
    for t in real.iter().chain(gen) {
        t.validate(grid)?;
    }
    let r = behavior_statistics(real, grid);
    let g = behavior_statistics(gen, grid);
    let mut out = [0.0; 4];
    for k in 0..4 {
        let edges = percentile_edges(&r[k], bins)?;
        out[k] = jsd(&histogram(&r[k], &edges)?, &histogram(&g[k], &edges)?)?;
    }
    Ok(BehaviorReport { jsd_distance: out[0], jsd_radius: out[1], jsd_duration: out[2], jsd_dailyloc: out[3] })
}

/// Decay statistics of one trajectory set against the normal reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayStats {
    pub rate: f64,
    pub alpha_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayMetrics {
    pub generated: DecayStats,
    pub real: DecayStats,
    pub mape_decay_rate: f64,
    pub mape_decay_speed: f64,
}

/// Slot range `[start, end)` covered by a trajectory set.
fn covered(trajs: &[Trajectory]) -> Option<(usize, usize)> {
    let start = trajs.iter().filter(|t| !t.is_empty()).map(|t| t.start_slot()).min()?;
    let end = trajs.iter().filter(|t| !t.is_empty()).map(|t| t.end_slot() + 1).max()?;
    Some((start, end))
}

/// Out-of-home flow with each user's home taken over the window.
fn window_flow(trajs: &[Trajectory], grid: &GridSpec, start: usize, len: usize) -> Result<FlowMatrix> {
    let w = crate::diffusion::window_out_of_home_flow(trajs, grid, start, len)?;
    let mut f = FlowMatrix::zeros(grid.n_locations(), grid.n_slots());
    for loc in 0..grid.n_locations() {
        for s in 0..len {
            f.set(loc, start + s, w.get(loc, s));
        }
    }
    Ok(f)
}

/// Cells whose intensity at `slot` is positive and at least the 90th percentile.
pub fn top_decile_cells(field: &DisasterField, slot: usize) -> Vec<usize> {
    let mut v: Vec<f64> = (0..field.n_locations()).map(|i| field.at(i, slot)).collect();
    v.sort_by(f64::total_cmp);
    let cut = quantile(&v, 0.9);
    (0..field.n_locations()).filter(|&i| field.at(i, slot) > 0.0 && field.at(i, slot) >= cut).collect()
}

fn decay_stats(
    set: &FlowMatrix,
    normal: &FlowMatrix,
    field: &DisasterField,
    grid: &GridSpec,
    peak: usize,
    cells: &[usize],
    opts: &FitOptions,
    label: &str,
) -> Result<DecayStats> {
    let base: f64 = cells.iter().map(|&i| normal.get(i, peak)).sum();
    if base <= 0.0 {
        return Err(Error::InsufficientData(format!(
            "no normal out-of-home flow in the {} most intense cells at slot {peak}",
            cells.len()
        )));
    }
    let rate = 1.0 - cells.iter().map(|&i| set.get(i, peak)).sum::<f64>() / base;
    let (params, _) = fit_decay(normal, set, field, grid, opts)
        .map_err(|e| Error::InsufficientData(format!("decay fit on the {label} set failed: {e}")))?;
    Ok(DecayStats { rate, alpha_decay: params.alpha_decay })
}

/// Decay-rate and decay-speed MAPE of generated against real disaster
/// trajectories, both measured relative to normal trajectories.
///
/// All sets are restricted to the slots the generated set covers. Flows count
/// out-of-home visits and are rescaled to the normal set's population. The
/// rate is the relative drop at the peak-intensity slot over the top-decile
/// cells; the speed is the fitted temporal decay exponent.
pub fn decay_metrics(
    gen: &[Trajectory],
    real_disaster: &[Trajectory],
    normal: &[Trajectory],
    field: &DisasterField,
    grid: &GridSpec,
    opts: &FitOptions,
) -> Result<DecayMetrics> {
    let (start, end) = covered(gen).ok_or_else(|| Error::InsufficientData("no generated trajectories".into()))?;
    let len = end - start;
    let peak = field.peak_slot();
    if peak < start || peak >= end {
        return Err(Error::Precondition(format!("peak slot {peak} outside the generated window {start}..{end}")));
    }
    let real = restrict(real_disaster, start, len);
    let norm = restrict(normal, start, len);
    if real.is_empty() || norm.is_empty() {
        return Err(Error::InsufficientData(format!("no real or normal trajectories in window {start}..{end}")));
    }
    let f_normal = window_flow(&norm, grid, start, len)?;
    let n_norm = norm.len() as f64;
    let f_gen = window_flow(gen, grid, start, len)?.scaled(n_norm / gen.len() as f64);
    let f_real = window_flow(&real, grid, start, len)?.scaled(n_norm / real.len() as f64);
    let cells = top_decile_cells(field, peak);
    let g = decay_stats(&f_gen, &f_normal, field, grid, peak, &cells, opts, "generated")?;
    let r = decay_stats(&f_real, &f_normal, field, grid, peak, &cells, opts, "real")?;
    let rate = mape(&[g.rate], &[r.rate])?;
    let speed = mape(&[g.alpha_decay], &[r.alpha_decay])?;
    Ok(DecayMetrics { generated: g, real: r, mape_decay_rate: rate.percent, mape_decay_speed: speed.percent })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub jsd_distance: f64,
    pub jsd_radius: f64,
    pub jsd_duration: f64,
    pub jsd_dailyloc: f64,
    pub mape_decay_rate: f64,
    pub mape_decay_speed: f64,
}

impl MetricReport {
    pub fn new(b: &BehaviorReport, d: &DecayMetrics) -> Self {
        Self {
            jsd_distance: b.jsd_distance,
            jsd_radius: b.jsd_radius,
            jsd_duration: b.jsd_duration,
            jsd_dailyloc: b.jsd_dailyloc,
            mape_decay_rate: d.mape_decay_rate,
            mape_decay_speed: d.mape_decay_speed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.jsds() {
            if !(0.0..=std::f64::consts::LN_2).contains(&v) {
                return Err(Error::Domain(format!("{name} = {v} outside [0, ln 2]")));
            }
        }
        for v in [self.mape_decay_rate, self.mape_decay_speed] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Domain(format!("percentage {v} is not finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn jsds(&self) -> [(&'static str, f64); 4] {
        [
            ("jsd_distance", self.jsd_distance),
            ("jsd_radius", self.jsd_radius),
            ("jsd_duration", self.jsd_duration),
            ("jsd_dailyloc", self.jsd_dailyloc),
        ]
    }

    /// `metric,value` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.jsds() {
            s.push_str(&format!("{k},{v:.9}\n"));
        }
        s.push_str(&format!("mape_decay_rate,{:.9}\n", self.mape_decay_rate));
        s.push_str(&format!("mape_decay_speed,{:.9}\n", self.mape_decay_speed));
        s
    }
}
