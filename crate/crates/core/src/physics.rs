//! Spatiotemporal decay physics: how much of normal mobility survives at a
//! cell and slot given the disaster field.
//!
//! The retained fraction is hyperbolic in the kernel-weighted local intensity,
//!
//! ```text
//! H(i, t) = 1 / (1 + k(t - onset) * sum_j w_ij N_j(t)),   k(s) = k0 * exp(-alpha * s)
//! w_ij    = exp(-d(i, j) / rho)
//! ```
//!
//! with the time origin at the field's onset slot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::{DisasterField, FlowMatrix, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub k0: f64,
    pub alpha_decay: f64,
    pub rho_km: f64,
}

impl DecayParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k0 >= 0.0) || !self.k0.is_finite() {
            return Err(Error::config("decay.k0", "must be finite and >= 0"));
        }
        if !(self.alpha_decay >= 0.0) || !self.alpha_decay.is_finite() {
            return Err(Error::config("decay.alpha_decay", "must be finite and >= 0"));
        }
        if !(self.rho_km > 0.0) || !self.rho_km.is_finite() {
            return Err(Error::config("decay.rho_km", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Dense `L x L` matrix of spatial weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKernel {
    n: usize,
    weights: Vec<f64>,
}

impl SpatialKernel {
    pub fn new(grid: &GridSpec, rho_km: f64) -> Result<Self> {
        if !(rho_km > 0.0) {
            return Err(Error::config("decay.rho_km", "must be > 0"));
        }
        let n = grid.n_locations();
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                weights[i * n + j] = spatial_weight(i, j, rho_km, grid);
            }
        }
        Ok(Self { n, weights })
    }

    pub fn n_locations(&self) -> usize {
        self.n
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    /// `sum_j w_ij N_j(t)`.
    pub fn exposure(&self, field: &DisasterField, i: usize, t: usize) -> f64 {
        (0..self.n).map(|j| self.weights[i * self.n + j] * field.at(j, t)).sum()
    }
}

/// `exp(-d(i, j) / rho_km)` between cell centers.
pub fn spatial_weight(i: usize, j: usize, rho_km: f64, grid: &GridSpec) -> f64 {
    (-grid.distance_km(i, j) / rho_km).exp()
}

/// Temporal decay `k0 * exp(-alpha * t)` for `t` slots after onset.
pub fn k_of_t(params: &DecayParams, t_since_onset: f64) -> Result<f64> {
    if t_since_onset < 0.0 || t_since_onset.is_nan() {
        return Err(Error::Domain(format!("time since onset must be >= 0, got {t_since_onset}")));
    }
    Ok(params.k0 * (-params.alpha_decay * t_since_onset).exp())
}

fn ratio_from_exposure(params: &DecayParams, exposure: f64, t: usize, onset: usize) -> f64 {
    if exposure == 0.0 || t < onset {
        return 1.0;
    }
    let k = params.k0 * (-params.alpha_decay * (t - onset) as f64).exp();
    1.0 / (1.0 + k * exposure)
}

/// Fraction of normal mobility retained at cell `i`, slot `t`.
pub fn decay_ratio(params: &DecayParams, kernel: &SpatialKernel, field: &DisasterField, i: usize, t: usize) -> f64 {
    ratio_from_exposure(params, kernel.exposure(field, i, t), t, field.onset_slot)
}

/// Precomputed `H(i, t)` over a whole grid, for repeated queries.
#[derive(Debug, Clone)]
pub struct DecayModel {
    pub params: DecayParams,
    n_slots: usize,
    ratio: Vec<f64>,
    intensity_scale: f64,
    local_intensity: Vec<f64>,
}

impl DecayModel {
    pub fn new(params: DecayParams, grid: &GridSpec, field: &DisasterField) -> Result<Self> {
        params.validate()?;
        let kernel = SpatialKernel::new(grid, params.rho_km)?;
        let (l, t_n) = (grid.n_locations(), grid.n_slots());
        if field.n_locations() != l || field.n_slots() != t_n {
            return Err(Error::InvalidShape("field does not match grid".into()));
        }
        let mut ratio = vec![1.0; l * t_n];
        let mut local_intensity = vec![0.0; l * t_n];
        for t in 0..t_n {
            let active: Vec<usize> = (0..l).filter(|&j| field.at(j, t) > 0.0).collect();
            if active.is_empty() {
                continue;
            }
            for i in 0..l {
                let s: f64 = active.iter().map(|&j| kernel.weight(i, j) * field.at(j, t)).sum();
                ratio[i * t_n + t] = ratio_from_exposure(&params, s, t, field.onset_slot);
                local_intensity[i * t_n + t] = field.at(i, t);
            }
        }
        let max = field.max_intensity();
        Ok(Self { params, n_slots: t_n, ratio, intensity_scale: if max > 0.0 { max } else { 1.0 }, local_intensity })
    }

    pub fn ratio(&self, i: usize, t: usize) -> f64 {
        self.ratio[i * self.n_slots + t]
    }

    /// Local intensity divided by the field maximum, in `[0, 1]`.
    pub fn normalized_intensity(&self, i: usize, t: usize) -> f64 {
        self.local_intensity[i * self.n_slots + t] / self.intensity_scale
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }
}

/// `F_dis[i][t] = H(i, t) * F_normal[i][t]`.
pub fn predict_disaster_flow(
    normal: &FlowMatrix,
    params: &DecayParams,
    kernel: &SpatialKernel,
    field: &DisasterField,
) -> Result<FlowMatrix> {
    if normal.n_locations() != field.n_locations()
        || normal.n_slots() != field.n_slots()
        || kernel.n_locations() != field.n_locations()
    {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: flow {}x{}, field {}x{}, kernel {}",
            normal.n_locations(),
            normal.n_slots(),
            field.n_locations(),
            field.n_slots(),
            kernel.n_locations()
        )));
    }
    let mut out = normal.clone();
    for t in 0..normal.n_slots() {
        if (0..field.n_locations()).all(|j| field.at(j, t) == 0.0) {
            continue;
        }
        for i in 0..normal.n_locations() {
            let h = decay_ratio(params, kernel, field, i, t);
            out.set(i, t, h * normal.get(i, t));
        }
    }
    Ok(out)
}

/// Mean squared elementwise difference between two flows.
pub fn physics_loss(generated: &FlowMatrix, target: &FlowMatrix) -> Result<f64> {
    if !generated.same_shape(target) {
        return Err(Error::InvalidInput(format!(
            "flow shapes differ: {}x{} vs {}x{}",
            generated.n_locations(),
            generated.n_slots(),
            target.n_locations(),
            target.n_slots()
        )));
    }
    let n = generated.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    let ss: f64 = generated.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(ss / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub min_support: f64,
    pub max_iters: usize,
    pub k0_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub rho_grid: Vec<f64>,
    pub tolerance: f64,
}

fn log_grid(lo_exp: f64, hi_exp: f64, per_decade: usize) -> Vec<f64> {
    let steps = ((hi_exp - lo_exp) * per_decade as f64).round() as usize;
    (0..=steps).map(|s| 10f64.powf(lo_exp + s as f64 / per_decade as f64)).collect()
}

impl Default for FitOptions {
    fn default() -> Self {
        let mut k0_grid = vec![0.0];
        k0_grid.extend(log_grid(-3.0, 2.0, 4));
        let mut alpha_grid = vec![0.0];
        alpha_grid.extend(log_grid(-3.0, 0.5, 4));
        let rho_grid = (-8..=16).map(|k| 2f64.powf(k as f64 / 4.0)).collect();
        Self { min_support: 5.0, max_iters: 200, k0_grid, alpha_grid, rho_grid, tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_support: usize,
}

struct SupportPoint {
    loc: usize,
    tau: f64,
    y: f64,
}

fn exposures(points: &[SupportPoint], slots: &[usize], field: &DisasterField, grid: &GridSpec, rho: f64) -> Vec<f64> {
    let l = grid.n_locations();
    points
        .iter()
        .zip(slots)
        .map(|(p, &t)| {
            (0..l)
                .filter(|&j| field.at(j, t) > 0.0)
                .map(|j| spatial_weight(p.loc, j, rho, grid) * field.at(j, t))
                .sum()
        })
        .collect()
}

fn sse(points: &[SupportPoint], expo: &[f64], k0: f64, alpha: f64) -> f64 {
    points
        .iter()
        .zip(expo)
        .map(|(p, &s)| {
            let h = 1.0 / (1.0 + k0 * (-alpha * p.tau).exp() * s);
            (p.y - h).powi(2)
        })
        .sum()
}

struct GnResult {
    k0: f64,
    alpha: f64,
    obj: f64,
    iterations: usize,
    converged: bool,
}

/// Projected Gauss-Newton with step halving on `(k0, alpha)`.
fn gauss_newton(points: &[SupportPoint], expo: &[f64], k0: f64, alpha: f64, obj: f64, opts: &FitOptions) -> GnResult {
    let (mut k0, mut alpha, mut obj) = (k0, alpha, obj);
    let mut iterations = 0;
    let mut converged = points.is_empty();
    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (p, &s) in points.iter().zip(expo) {
            let e = (-alpha * p.tau).exp();
            let h = 1.0 / (1.0 + k0 * e * s);
            let r = h - p.y;
            let dk = -e * s * h * h;
            let da = k0 * p.tau * e * s * h * h;
            a11 += dk * dk;
            a12 += dk * da;
            a22 += da * da;
            g1 += dk * r;
            g2 += da * r;
        }
        let det = a11 * a22 - a12 * a12;
        let (mut dk0, mut dal) = if det.abs() > 1e-12 * (a11 * a22).abs().max(f64::MIN_POSITIVE) {
            ((-(a22 * g1) + a12 * g2) / det, (a12 * g1 - a11 * g2) / det)
        } else if a11 > 0.0 {
            // alpha is unidentifiable when k0 = 0
            (-g1 / a11, 0.0)
        } else {
            converged = true;
            break;
        };
        let mut step_taken = false;
        for _ in 0..40 {
            let nk = (k0 + dk0).max(0.0);
            let na = (alpha + dal).max(0.0);
            let nobj = sse(points, expo, nk, na);
            if nobj <= obj {
                let small = (nk - k0).abs() <= opts.tolerance * (1.0 + k0.abs())
                    && (na - alpha).abs() <= opts.tolerance * (1.0 + alpha.abs());
                let flat_obj = obj - nobj <= 1e-15 * obj.max(f64::MIN_POSITIVE);
                k0 = nk;
                alpha = na;
                obj = nobj;
                step_taken = true;
                if small || flat_obj {
                    converged = true;
                }
                break;
            }
            dk0 *= 0.5;
            dal *= 0.5;
        }
        if !step_taken {
            converged = true;
        }
    }
    GnResult { k0, alpha, obj, iterations, converged }
}

/// Fits `(k0, alpha, rho)` by regressing `F_observed / F_normal` on `H` over
/// cells and slots with `F_normal >= min_support`.
///
/// A coarse log-grid search over all three parameters is followed by
/// Gauss-Newton refinement of `(k0, alpha)` with `rho` held at a grid value;
/// the grid `rho` whose refined fit is best is kept.
pub fn fit_decay(
    normal: &FlowMatrix,
    observed: &FlowMatrix,
    field: &DisasterField,
    grid: &GridSpec,
    opts: &FitOptions,
) -> Result<(DecayParams, FitReport)> {
    if !normal.same_shape(observed)
        || normal.n_locations() != grid.n_locations()
        || normal.n_slots() != field.n_slots()
        || field.n_locations() != grid.n_locations()
    {
        return Err(Error::InvalidInput("flow, field and grid shapes disagree".into()));
    }
    if opts.k0_grid.is_empty() || opts.alpha_grid.is_empty() || opts.rho_grid.is_empty() {
        return Err(Error::config("physics.fit", "search grids must be non-empty"));
    }
    let onset = field.onset_slot;
    let mut flat = Vec::new();
    let mut exposed = Vec::new();
    let mut exposed_slots = Vec::new();
    for i in 0..normal.n_locations() {
        for t in 0..normal.n_slots() {
            let base = normal.get(i, t);
            if base < opts.min_support || base <= 0.0 {
                continue;
            }
            let y = observed.get(i, t) / base;
            let any_field = t >= onset && (0..field.n_locations()).any(|j| field.at(j, t) > 0.0);
            if any_field {
                exposed.push(SupportPoint { loc: i, tau: (t - onset) as f64, y });
                exposed_slots.push(t);
            } else {
                flat.push(y);
            }
        }
    }
    let n_support = flat.len() + exposed.len();
    if n_support == 0 {
        return Err(Error::InsufficientData(format!(
            "no cell/slot has normal flow >= {}",
            opts.min_support
        )));
    }

    // Coarse grid over (k0, alpha) for every rho, each grid optimum refined by
    // Gauss-Newton; the rho with the lowest refined objective wins.
    let mut best: Option<GnResult> = None;
    let mut best_rho = opts.rho_grid[0];
    for &rho in &opts.rho_grid {
        let expo = exposures(&exposed, &exposed_slots, field, grid, rho);
        let mut start = (f64::INFINITY, opts.k0_grid[0], opts.alpha_grid[0]);
        for &k0 in &opts.k0_grid {
            for &alpha in &opts.alpha_grid {
                let obj = sse(&exposed, &expo, k0, alpha);
                if obj < start.0 {
                    start = (obj, k0, alpha);
                }
            }
        }
        let refined = gauss_newton(&exposed, &expo, start.1, start.2, start.0, opts);
        if best.as_ref().is_none_or(|b| refined.obj < b.obj) {
            best = Some(refined);
            best_rho = rho;
        }
    }
    let GnResult { k0, alpha, obj, iterations, converged } = best.expect("rho grid is non-empty");
    if !converged {
        log::warn!("decay fit did not converge after {} iterations", opts.max_iters);
    }
    let rho = best_rho;

    let flat_ss: f64 = flat.iter().map(|y| (y - 1.0).powi(2)).sum();
    let rmse = ((flat_ss + obj) / n_support as f64).sqrt();
    let params = DecayParams { k0, alpha_decay: alpha, rho_km: rho };
    params.validate()?;
    Ok((params, FitReport { rmse, iterations, converged, n_support }))
}
