//! Noise schedules, forward noising, training losses and guided sampling.
//!
//! Only the spatial segment of an embedding row is diffused; the day-of-week
//! and slot-of-day segments ride along as clean context. Steps are numbered
//! `1..=T`, with step 0 meaning "no noise".

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::temporal_index;
use crate::conditioning::{build_prompt, null_condition, predict_noise, PredictorConfig, PredictorInput, PromptContext};
use crate::error::{Error, Result};
use crate::mobility::{home_location, FlowMatrix, GridSpec, Trajectory};
use crate::nn::{Gradients, Graph, ParamSet, Tensor, Var};
use crate::physics::physics_loss;
use crate::rng::{substream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

/// Linear betas evenly spaced in `[beta_min, beta_max]`, or the squared-cosine
/// `alpha_bar` profile converted to betas clipped to `(0, 0.999]`.
pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("model.schedule.steps", "must be >= 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::config("model.schedule.beta_min", "need 0 < beta_min <= beta_max < 1"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| if steps == 1 { beta_min } else { beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64 })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(f64::MIN_POSITIVE, COSINE_MAX_BETA)).collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bars[t - 1] }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Posterior variance `(1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `sqrt(ab) e0 + sqrt(1 - ab) eps` on the first `spatial_width` columns of
/// each row of `e0`; remaining columns are copied.
pub fn forward_noise(e0: &Tensor, spatial_width: usize, t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Tensor> {
    if t > schedule.steps() {
        return Err(Error::Domain(format!("diffusion step {t} outside 0..={}", schedule.steps())));
    }
    let (rows, cols) = (e0.rows(), e0.cols());
    if spatial_width > cols || eps.len() != rows * spatial_width {
        return Err(Error::InvalidShape(format!(
            "noise of {} values for {rows} rows of spatial width {spatial_width}",
            eps.len()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = e0.clone();
    for r in 0..rows {
        for j in 0..spatial_width {
            let v = &mut out.data_mut()[r * cols + j];
            *v = a * *v + b * eps[r * spatial_width + j];
        }
    }
    Ok(out)
}

/// `(1 + omega) eps_c - omega eps_u`, evaluated as `eps_c + omega (eps_c - eps_u)`.
pub fn guided_noise(eps_c: &[f64], eps_u: &[f64], omega: f64) -> Result<Vec<f64>> {
    if eps_c.len() != eps_u.len() {
        return Err(Error::InvalidShape("conditional and unconditional predictions differ in size".into()));
    }
    Ok(eps_c.iter().zip(eps_u).map(|(c, u)| c + omega * (c - u)).collect())
}

/// One reverse step `e_{t-1} = (e_t - beta_t / sqrt(1 - ab_t) eps) / sqrt(alpha_t) + sigma_t z`
/// with `sigma_t^2` the posterior variance; `z` is ignored at `t = 1`.
pub fn denoise_step(e_t: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule, z: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if eps.len() != e_t.len() || (t > 1 && z.len() != e_t.len()) {
        return Err(Error::InvalidShape("denoise inputs differ in size".into()));
    }
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    let sigma = if t > 1 { schedule.posterior_variance(t).sqrt() } else { 0.0 };
    Ok((0..e_t.len())
        .map(|i| {
            let mean = inv * (e_t[i] - coef * eps[i]);
            if t > 1 { mean + sigma * z[i] } else { mean }
        })
        .collect())
}

/// [`denoise_step`] drawing `z` from `rng`.
pub fn denoise_step_rng(e_t: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let z: Vec<f64> = if t > 1 { (0..e_t.len()).map(|_| rng.sample(StandardNormal)).collect() } else { Vec::new() };
    denoise_step(e_t, t, eps, schedule, &z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_kind")]
    pub kind: ScheduleKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
}

fn default_kind() -> ScheduleKind {
    ScheduleKind::Linear
}
fn default_steps() -> usize {
    200
}
fn default_beta_min() -> f64 {
    1e-4
}
fn default_beta_max() -> f64 {
    0.02
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: default_kind(), steps: default_steps(), beta_min: default_beta_min(), beta_max: default_beta_max() }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub w_diff: f64,
    #[serde(default)]
    pub w_phy: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_diff: 1.0, w_phy: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_diff >= 0.0) || !self.w_diff.is_finite() {
            return Err(Error::config("model.weights.w_diff", "must be finite and >= 0"));
        }
        if !(self.w_phy >= 0.0) || !self.w_phy.is_finite() {
            return Err(Error::config("model.weights.w_phy", "must be finite and >= 0"));
        }
        if self.w_diff == 0.0 && self.w_phy == 0.0 {
            return Err(Error::config("model.weights", "w_diff and w_phy cannot both be 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    #[serde(default)]
    pub omega: f64,
    #[serde(default = "default_p_drop")]
    pub p_drop: f64,
}

fn default_p_drop() -> f64 {
    0.1
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { omega: 0.0, p_drop: default_p_drop() }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::config("model.guidance.omega", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::config("model.guidance.p_drop", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// How the flow-alignment term is estimated during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    /// Optimizer steps between refreshes of the generated flow.
    #[serde(default = "default_every")]
    pub every: usize,
    /// Trajectories generated per refresh.
    #[serde(default = "default_phy_samples")]
    pub samples: usize,
    /// Denoising states per refresh through which the flow gradient is passed.
    #[serde(default = "default_phy_states")]
    pub states: usize,
    /// Sharpness of the soft nearest-location assignment used for gradients.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Recorded states are drawn from steps `1..=ceil(record_fraction * T)`.
    /// At high noise the denoised estimate says little about the final
    /// location, and its gradient mostly disturbs the noise predictor.
    #[serde(default = "default_record_fraction")]
    pub record_fraction: f64,
}

fn default_every() -> usize {
    10
}
fn default_phy_samples() -> usize {
    64
}
fn default_phy_states() -> usize {
    4
}
fn default_kappa() -> f64 {
    20.0
}
fn default_record_fraction() -> f64 {
    0.5
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            every: default_every(),
            samples: default_phy_samples(),
            states: default_phy_states(),
            kappa: default_kappa(),
            record_fraction: default_record_fraction(),
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        for (p, v) in [("model.physics.every", self.every), ("model.physics.samples", self.samples), ("model.physics.states", self.states)] {
            if v == 0 {
                return Err(Error::config(p, "must be >= 1"));
            }
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::config("model.physics.kappa", "must be finite and > 0"));
        }
        if !(self.record_fraction > 0.0 && self.record_fraction <= 1.0) {
            return Err(Error::config("model.physics.record_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Everything about the generative model that is not a parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub codec: crate::codec::CodecConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub physics: PhysicsConfig,
    /// Denoising steps between prompt rebuilds while sampling.
    #[serde(default = "default_prompt_every")]
    pub prompt_every: usize,
}

fn default_prompt_every() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorConfig::default(),
            codec: crate::codec::CodecConfig::default(),
            schedule: ScheduleConfig::default(),
            weights: LossWeights::default(),
            guidance: GuidanceConfig::default(),
            physics: PhysicsConfig::default(),
            prompt_every: default_prompt_every(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.predictor.validate()?;
        self.codec.validate()?;
        self.schedule.build()?;
        self.weights.validate()?;
        self.guidance.validate()?;
        self.physics.validate()?;
        if self.prompt_every == 0 {
            return Err(Error::config("model.prompt_every", "must be >= 1"));
        }
        Ok(())
    }
}

/// Flow the generator should reproduce over a slot window: the decay model's
/// prediction `H * F_normal` of out-of-home visits, in counts for a population
/// of `population` users.
#[derive(Debug, Clone)]
pub struct PhysicsTarget {
    pub start_slot: usize,
    pub len: usize,
    /// `L x len`.
    pub target: FlowMatrix,
    pub population: f64,
    /// Prompt context for the window (carries the fitted decay model).
    pub prompt: PromptContext,
}

/// Training material for one city.
#[derive(Debug, Clone)]
pub struct CityData {
    pub name: String,
    pub grid: GridSpec,
    /// Equal-length windows.
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    /// Prompt context for `train`/`val` windows.
    pub prompt: PromptContext,
    pub physics: Option<PhysicsTarget>,
}

impl CityData {
    pub fn window_len(&self) -> Result<usize> {
        let n = self.train.first().map(Trajectory::len).ok_or_else(|| {
            Error::InsufficientData(format!("city `{}` has no training windows", self.name))
        })?;
        if self.train.iter().chain(&self.val).any(|t| t.len() != n) {
            return Err(Error::InvalidInput(format!("city `{}` windows differ in length", self.name)));
        }
        Ok(n)
    }
}

/// Random quantities behind one diffusion-loss example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub step: usize,
    pub eps: Vec<f64>,
    pub drop_condition: bool,
}

pub fn draw_noise(rng: &mut StreamRng, rows: usize, width: usize, schedule: &NoiseSchedule, p_drop: f64) -> NoiseDraw {
    let step = rng.random_range(1..=schedule.steps());
    let eps = (0..rows * width).map(|_| rng.sample(StandardNormal)).collect();
    let drop_condition = rng.random::<f64>() < p_drop;
    NoiseDraw { step, eps, drop_condition }
}

/// Stacked predictor input for trajectories at given noised states.
fn stacked_input(trajs: &[&Trajectory], x_t: Vec<f64>, steps: Vec<usize>, grid: &GridSpec, width: usize) -> Result<PredictorInput> {
    let n: usize = trajs.iter().map(|t| t.len()).sum();
    let mut day_of_week = Vec::with_capacity(n);
    let mut slot_of_day = Vec::with_capacity(n);
    for t in trajs {
        for p in t.points() {
            let (d, s) = temporal_index(grid, p.slot);
            day_of_week.push(d);
            slot_of_day.push(s);
        }
    }
    Ok(PredictorInput { blocks: trajs.len(), x_t: Tensor::from_vec(&[n, width], x_t)?, day_of_week, slot_of_day, steps })
}

/// Records the mean-squared noise-prediction loss on `g` for equal-length
/// trajectories and their noise draws. `predict` maps `(graph, input, prompt)`
/// to predicted noise, so test doubles can stand in for the network.
pub fn diffusion_loss_with<P>(
    g: &mut Graph,
    predict: P,
    batch: &[&Trajectory],
    draws: &[NoiseDraw],
    schedule: &NoiseSchedule,
    grid: &GridSpec,
    prompt: &PromptContext,
) -> Result<Var>
where
    P: Fn(&mut Graph, &PredictorInput, Var) -> Result<Var>,
{
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::InvalidInput(format!("{} trajectories for {} noise draws", batch.len(), draws.len())));
    }
    let n = batch[0].len();
    if batch.iter().any(|t| t.len() != n) {
        return Err(Error::InvalidInput("batch trajectories differ in length".into()));
    }
    let d = g.params().get("codec.D").ok_or_else(|| Error::InvalidInput("model has no codec.D".into()))?.value.clone();
    let w = d.cols();
    let mut x_t = Vec::with_capacity(batch.len() * n * w);
    let mut target = Vec::with_capacity(batch.len() * n * w);
    let mut slots = Vec::with_capacity(batch.len() * n);
    let mut keep = Vec::with_capacity(batch.len() * n);
    for (traj, draw) in batch.iter().zip(draws) {
        if draw.eps.len() != n * w {
            return Err(Error::InvalidShape(format!("noise draw of {} values for {n} rows of width {w}", draw.eps.len())));
        }
        schedule.check_step(draw.step)?;
        let ab = schedule.alpha_bar(draw.step);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (r, p) in traj.points().iter().enumerate() {
            if p.loc >= d.rows() {
                return Err(Error::InvalidInput(format!("user {}: location {} outside the grid", traj.user_id, p.loc)));
            }
            for j in 0..w {
                x_t.push(a * d.get(p.loc, j) + b * draw.eps[r * w + j]);
            }
            slots.push(p.slot);
            keep.push(!draw.drop_condition);
        }
        target.extend_from_slice(&draw.eps);
    }
    let input = stacked_input(batch, x_t, draws.iter().map(|d| d.step).collect(), grid, w)?;
    let c = build_prompt(g, &input.x_t, &slots, Some(prompt))?.rows;
    let c = if keep.iter().all(|&k| k) {
        c
    } else {
        let null = null_condition(g, keep.len())?;
        g.row_mix(c, null, &keep)?
    };
    let pred = predict(g, &input, c)?;
    if g.shape(pred) != (batch.len() * n, w) {
        return Err(Error::InvalidShape(format!("prediction {:?}, expected {:?}", g.shape(pred), (batch.len() * n, w))));
    }
    let loss = g.mse_const(pred, &target)?;
    if !g.scalar(loss).is_finite() {
        let vals = g.value(pred);
        let bad = (0..batch.len())
            .find(|&b| vals[b * n * w..(b + 1) * n * w].iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(Error::NumericFailure(format!("diffusion loss at batch example {bad}")));
    }
    Ok(loss)
}

/// Diffusion loss and its parameter gradients for one mini-batch.
pub fn diffusion_loss(
    params: &ParamSet,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    batch: &[&Trajectory],
    grid: &GridSpec,
    prompt: &PromptContext,
    rng: &mut StreamRng,
) -> Result<(f64, Gradients)> {
    let w = cfg.codec.spatial_width;
    let draws: Vec<NoiseDraw> = batch.iter().map(|t| draw_noise(rng, t.len(), w, schedule, cfg.guidance.p_drop)).collect();
    let mut g = Graph::new(params);
    let loss = diffusion_loss_with(&mut g, |g, i, c| predict_noise(g, &cfg.predictor, i, c), batch, &draws, schedule, grid, prompt)?;
    let grads = g.backward(loss)?;
    Ok((g.scalar(loss), grads))
}

/// `w_diff * L_diff + w_phy * L_phy`; `L_phy` must be present when `w_phy > 0`.
pub fn total_loss(weights: &LossWeights, diff: f64, phy: Option<f64>) -> Result<f64> {
    weights.validate()?;
    if weights.w_phy == 0.0 {
        return Ok(weights.w_diff * diff);
    }
    let phy = phy.ok_or_else(|| Error::config("model.weights.w_phy", "physics term requested without a physics context"))?;
    Ok(weights.w_diff * diff + weights.w_phy * phy)
}

/// What to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub n_users: usize,
    pub start_slot: usize,
    pub len: usize,
    pub omega: f64,
    pub seed: u64,
}

/// A noised state visited during sampling.
#[derive(Debug, Clone)]
pub struct RecordedState {
    pub step: usize,
    /// `(n_users * len) x W`.
    pub x_t: Tensor,
}

/// Guided noise estimate for stacked states; skips the unconditional pass at `omega = 0`.
fn guided_estimate(
    params: &ParamSet,
    cfg: &PredictorConfig,
    input: &PredictorInput,
    prompt_rows: Option<&Tensor>,
    slots: &[usize],
    ctx: &PromptContext,
    omega: f64,
) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new(params);
    let c = match prompt_rows {
        Some(t) => g.constant(t),
        None => build_prompt(&mut g, &input.x_t, slots, Some(ctx))?.rows,
    };
    let c_val = g.tensor(c);
    let eps_c = predict_noise(&mut g, cfg, input, c)?;
    let eps_c_val = g.value(eps_c).to_vec();
    if omega == 0.0 {
        return Ok((eps_c_val, c_val));
    }
    let null = null_condition(&mut g, input.x_t.rows())?;
    let eps_u = predict_noise(&mut g, cfg, input, null)?;
    Ok((guided_noise(&eps_c_val, g.value(eps_u), omega)?, c_val))
}

/// Generates `n_users` trajectories over `[start_slot, start_slot + len)`,
/// recording the noised states at `record` steps.
pub fn sample_recording(
    params: &ParamSet,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    grid: &GridSpec,
    ctx: &PromptContext,
    req: &SampleRequest,
    record: &[usize],
) -> Result<(Vec<Trajectory>, Vec<RecordedState>)> {
    if req.len == 0 || req.start_slot + req.len > grid.n_slots() {
        return Err(Error::InvalidInput(format!(
            "window {}..{} outside the {} slots of the grid",
            req.start_slot,
            req.start_slot + req.len,
            grid.n_slots()
        )));
    }
    if req.n_users == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let w = cfg.codec.spatial_width;
    let d = params.get("codec.D").ok_or_else(|| Error::InvalidInput("model has no codec.D".into()))?.value.clone();
    let n = req.len;
    let rows = req.n_users * n;
    let mut rngs: Vec<StreamRng> = (0..req.n_users).map(|u| substream(req.seed, "sample", u as u64)).collect();
    let mut x: Vec<f64> = Vec::with_capacity(rows * w);
    for rng in rngs.iter_mut() {
        x.extend((0..n * w).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    let slots: Vec<usize> = (0..req.n_users).flat_map(|_| req.start_slot..req.start_slot + n).collect();
    let template: Vec<Trajectory> = (0..req.n_users.min(1))
        .map(|_| Trajectory::new("t", req.start_slot, &vec![0; n]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Trajectory> = vec![&template[0]; req.n_users];
    let mut recorded = Vec::new();
    let mut prompt: Option<Tensor> = None;
    let total = schedule.steps();
    for (k, t) in (1..=total).rev().enumerate() {
        let input = stacked_input(&refs, x.clone(), vec![t; req.n_users], grid, w)?;
        if record.contains(&t) {
            recorded.push(RecordedState { step: t, x_t: input.x_t.clone() });
        }
        if k % cfg.prompt_every == 0 {
            prompt = None;
        }
        let (eps, c) = guided_estimate(params, &cfg.predictor, &input, prompt.as_ref(), &slots, ctx, req.omega)?;
        prompt = Some(c);
        let mut next = Vec::with_capacity(x.len());
        for (u, rng) in rngs.iter_mut().enumerate() {
            let span = u * n * w..(u + 1) * n * w;
            next.extend(denoise_step_rng(&x[span.clone()], t, &eps[span], schedule, rng)?);
        }
        x = next;
    }
    let x0 = Tensor::from_vec(&[rows, w], x)?;
    let decoded = crate::codec::decode(&x0, &d)?;
    let trajs = decoded
        .locations
        .chunks(n)
        .enumerate()
        .map(|(u, locs)| Trajectory::new(format!("g{u:05}"), req.start_slot, locs))
        .collect::<Result<Vec<_>>>()?;
    Ok((trajs, recorded))
}

/// Generates trajectories by guided ancestral sampling from pure noise.
pub fn sample(
    params: &ParamSet,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    grid: &GridSpec,
    ctx: &PromptContext,
    req: &SampleRequest,
) -> Result<Vec<Trajectory>> {
    Ok(sample_recording(params, cfg, schedule, grid, ctx, req, &[])?.0)
}

/// Out-of-home flow of `trajs` over a window, as an `L x len` matrix.
pub fn window_out_of_home_flow(trajs: &[Trajectory], grid: &GridSpec, start: usize, len: usize) -> Result<FlowMatrix> {
    let mut f = FlowMatrix::zeros(grid.n_locations(), len);
    for t in trajs {
        t.validate(grid)?;
        let home = home_location(t, grid);
        for p in t.points() {
            if p.loc != home && p.slot >= start && p.slot < start + len {
                f.add(p.loc, p.slot - start, 1.0);
            }
        }
    }
    Ok(f)
}

/// One evaluation of the flow-alignment term.
pub struct PhysicsEstimate {
    /// Hard loss: mean squared difference between the generated out-of-home
    /// flow (scaled to the target population) and the target.
    pub loss: f64,
    /// Gradient of a differentiable surrogate whose parameter gradient
    /// approximates that of `loss`.
    pub grads: Gradients,
    pub generated: Vec<Trajectory>,
}

/// Generates a sample over the target window, measures the hard flow loss and
/// back-propagates `dL/dF` through soft location assignments of the
/// predicted clean embeddings at a few recorded denoising states.
pub fn physics_alignment(
    params: &ParamSet,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    grid: &GridSpec,
    target: &PhysicsTarget,
    seed: u64,
) -> Result<PhysicsEstimate> {
    let pc = &cfg.physics;
    let mut rng = substream(seed, "physics", 0);
    let total = schedule.steps();
    let hi = ((pc.record_fraction * total as f64).ceil() as usize).clamp(1, total);
    let mut record: Vec<usize> = Vec::with_capacity(pc.states);
    while record.len() < pc.states.min(hi) {
        let t = rng.random_range(1..=hi);
        if !record.contains(&t) {
            record.push(t);
        }
    }
    let req = SampleRequest {
        n_users: pc.samples,
        start_slot: target.start_slot,
        len: target.len,
        omega: cfg.guidance.omega,
        seed: crate::rng::derive_seed(seed, "physics-sample"),
    };
    let (generated, states) = sample_recording(params, cfg, schedule, grid, &target.prompt, &req, &record)?;
    let scale = target.population / pc.samples as f64;
    let flow = window_out_of_home_flow(&generated, grid, target.start_slot, target.len)?.scaled(scale);
    let loss = physics_loss(&flow, &target.target)?;

    let n_cells = (grid.n_locations() * target.len) as f64;
    let l = grid.n_locations();
    let n = target.len;
    let homes: Vec<usize> = generated.iter().map(|t| home_location(t, grid)).collect();
    // dL/dq[row, loc] for a soft visit of `loc` by the row's user at its slot
    let mut weights = Vec::with_capacity(generated.len() * n * l);
    for &home in &homes {
        for s in 0..n {
            for loc in 0..l {
                let dl_df = 2.0 * (flow.get(loc, s) - target.target.get(loc, s)) / n_cells;
                weights.push(if loc == home { 0.0 } else { dl_df * scale });
            }
        }
    }
    let slots: Vec<usize> = (0..generated.len()).flat_map(|_| target.start_slot..target.start_slot + n).collect();
    let template = Trajectory::new("t", target.start_slot, &vec![0; n])?;
    let refs: Vec<&Trajectory> = vec![&template; generated.len()];
    let mut g = Graph::new(params);
    // the embedding table is held fixed so alignment shapes the generator
    // rather than the codec shared by every prompt
    let table = params
        .get("codec.D")
        .ok_or_else(|| Error::InvalidInput("parameter set lacks `codec.D`".into()))?;
    let d = g.constant(&table.value);
    let mut terms = Vec::with_capacity(states.len());
    for st in &states {
        let input = stacked_input(&refs, st.x_t.data().to_vec(), vec![st.step; generated.len()], grid, cfg.codec.spatial_width)?;
        let c = build_prompt(&mut g, &input.x_t, &slots, Some(&target.prompt))?.rows;
        let mut eps = predict_noise(&mut g, &cfg.predictor, &input, c)?;
        if cfg.guidance.omega != 0.0 {
            let null = null_condition(&mut g, input.x_t.rows())?;
            let eps_u = predict_noise(&mut g, &cfg.predictor, &input, null)?;
            let a = g.scale(eps, 1.0 + cfg.guidance.omega);
            let b = g.scale(eps_u, cfg.guidance.omega);
            eps = g.sub(a, b)?;
        }
        let ab = schedule.alpha_bar(st.step);
        let xt = g.constant(&st.x_t);
        let xt = g.scale(xt, 1.0 / ab.sqrt());
        let e = g.scale(eps, -(1.0 - ab).sqrt() / ab.sqrt());
        let x0 = g.add(xt, e)?;
        let x0 = g.row_normalize(x0);
        let sims = g.matmul_tb(x0, d)?;
        let sims = g.scale(sims, pc.kappa);
        let q = g.softmax_rows(sims);
        terms.push(g.dot_const(q, &weights)?);
    }
    let grads = if terms.is_empty() {
        let zero = g.constant_rows(1, 1, vec![0.0])?;
        g.backward(zero)?
    } else {
        let mut s = terms[0];
        for &t in &terms[1..] {
            s = g.add(s, t)?;
        }
        let s = g.scale(s, 1.0 / terms.len() as f64);
        g.backward(s)?
    };
    Ok(PhysicsEstimate { loss, grads, generated })
}

impl ParamSet {
    /// Adds `s * grads` into each parameter's `grad` buffer.
    pub fn accumulate_scaled(&mut self, grads: &Gradients, s: f64) -> Result<()> {
        if grads.n_params() != self.len() {
            return Err(Error::InvalidInput("gradients were computed for a different parameter set".into()));
        }
        for id in 0..self.len() {
            if let Some(gr) = grads.param_by_id(id) {
                let p = self.by_id_mut(id);
                p.grad.data_mut().iter_mut().zip(gr).for_each(|(a, b)| *a += s * b);
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_diff: f64,
    pub loss_phy: f64,
    pub loss_total: f64,
}

/// Last refreshed flow term: its hard loss and surrogate gradient.
#[derive(Debug, Clone)]
pub struct PhysicsMemo {
    pub loss: f64,
    grads: Gradients,
}

/// Computes the total-loss gradient for optimizer step `step` into the
/// `grad` buffers of `params` (zeroed first). The flow term is re-estimated on
/// steps divisible by `physics.every` (and whenever `memo` is empty); between
/// refreshes its held gradient is applied on every step.
pub fn accumulate_step_gradient(
    params: &mut ParamSet,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    data: &CityData,
    batch: &[&Trajectory],
    step: usize,
    rng: &mut StreamRng,
    memo: &mut Option<PhysicsMemo>,
) -> Result<LogRow> {
    params.zero_grad();
    let (diff, g_diff) = diffusion_loss(params, cfg, schedule, batch, &data.grid, &data.prompt, rng)?;
    params.accumulate_scaled(&g_diff, cfg.weights.w_diff)?;
    if cfg.weights.w_phy > 0.0 {
        let target = data.physics.as_ref().ok_or_else(|| {
            Error::config("model.weights.w_phy", format!("city `{}` has no physics target", data.name))
        })?;
        if step % cfg.physics.every == 0 || memo.is_none() {
            let est = physics_alignment(params, cfg, schedule, &data.grid, target, rng.random())?;
            *memo = Some(PhysicsMemo { loss: est.loss, grads: est.grads.into_params_only() });
        }
        let m = memo.as_ref().expect("refreshed above");
        params.accumulate_scaled(&m.grads, cfg.weights.w_phy)?;
    }
    let phy = memo.as_ref().map_or(0.0, |m| m.loss);
    let total = total_loss(&cfg.weights, diff, if cfg.weights.w_phy > 0.0 { Some(phy) } else { None })?;
    Ok(LogRow { step, loss_diff: diff, loss_phy: phy, loss_total: total })
}
