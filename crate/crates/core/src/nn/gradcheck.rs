//! Central finite-difference verification of analytic parameter gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Gradients, Var};
use super::param::ParamSet;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Every coordinate is checked when the fragment has at most this many;
    /// otherwise a seeded sample of this size is drawn.
    pub max_coords: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-4, max_coords: 400, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(params: &ParamSet, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let out = build(&mut g)?;
    if g.shape(out) != (1, 1) {
        return Err(Error::InvalidShape("gradient check needs a scalar output".into()));
    }
    Ok(g.scalar(out))
}

/// Coordinates to check: all of them for small fragments, else every
/// parameter gets a few and the rest of the budget is spread uniformly.
fn choose_coords(params: &ParamSet, opts: &GradCheckOptions) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = (0..params.len())
        .filter(|&id| params.by_id(id).trainable)
        .flat_map(|id| (0..params.by_id(id).value.numel()).map(move |i| (id, i)))
        .collect();
    if all.len() <= opts.max_coords {
        return all;
    }
    let mut rng = substream(opts.seed, "gradcheck", 0);
    let mut chosen = Vec::new();
    let mut taken = vec![false; all.len()];
    let mut offset = 0;
    for id in (0..params.len()).filter(|&id| params.by_id(id).trainable) {
        let n = params.by_id(id).value.numel();
        for k in sample(&mut rng, n, n.min(4)).into_iter() {
            taken[offset + k] = true;
            chosen.push(all[offset + k]);
        }
        offset += n;
    }
    let rest: Vec<usize> = (0..all.len()).filter(|&i| !taken[i]).collect();
    let want = opts.max_coords.saturating_sub(chosen.len()).min(rest.len());
    for k in sample(&mut rng, rest.len(), want).into_iter() {
        chosen.push(all[rest[k]]);
    }
    chosen.sort_unstable();
    chosen
}

/// Compares `analytic` against central differences of the scalar built by
/// `build`; returns the largest relative error.
pub fn compare_gradients<F>(params: &ParamSet, build: F, analytic: &Gradients, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::config("gradcheck.eps", "must be > 0"));
    }
    let coords = choose_coords(params, opts);
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, coords_checked: 0 };
    for (id, i) in coords {
        let name = params.by_id(id).name.clone();
        let orig = params.by_id(id).value.data()[i];
        work.by_id_mut(id).value.data_mut()[i] = orig + opts.eps;
        let plus = eval(&work, &build)?;
        work.by_id_mut(id).value.data_mut()[i] = orig - opts.eps;
        let minus = eval(&work, &build)?;
        work.by_id_mut(id).value.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic.param_by_id(id).map_or(0.0, |g| g[i]);
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NumericFailure(format!("gradient check of `{name}`[{i}]")));
        }
        let err = relative_error(a, numeric, opts.floor);
        if err > report.max_rel_error || report.coords_checked == 0 {
            report.max_rel_error = err;
            report.worst_param = name;
            report.worst_index = i;
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

/// Analytic gradients from the tape, checked against finite differences.
pub fn grad_check<F>(params: &ParamSet, build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let out = build(&mut g)?;
        if !g.value(out).iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure("gradient check output".into()));
        }
        g.backward(out)?
    };
    compare_gradients(params, build, &analytic, opts)
}
