//! Turning a city dataset into training material, and the plain training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conditioning::{init_private, init_shared, PromptContext};
use crate::diffusion::{accumulate_step_gradient, window_out_of_home_flow, CityData, LogRow, ModelConfig, PhysicsTarget};
use crate::error::{Error, Result};
use crate::mobility::{CityDataset, FlowMatrix, GridSpec, Trajectory};
use crate::nn::optim::Optimizer;
use crate::nn::ParamSet;
use crate::physics::{DecayModel, DecayParams};
use crate::rng::substream;

/// Which trajectories a city contributes for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    /// Disaster-period trajectories, prompted with the fitted decay model.
    Disaster,
    /// Normal-period trajectories only, prompted as disaster-free; disaster
    /// structure can enter only through the flow-alignment term.
    Normal,
}

/// Whole-day pieces of each trajectory.
pub fn day_windows(trajs: &[Trajectory], grid: &GridSpec) -> Vec<Trajectory> {
    trajs
        .iter()
        .flat_map(|t| t.split_days(grid))
        .filter(|d| d.len() == grid.slots_per_day && d.start_slot() % grid.slots_per_day == 0)
        .collect()
}

/// The whole day containing the disaster onset, as `(start, len)`.
pub fn disaster_window(onset_slot: usize, grid: &GridSpec) -> (usize, usize) {
    (grid.day_of(onset_slot) * grid.slots_per_day, grid.slots_per_day)
}

fn pick(trajs: &[Trajectory], idx: &[usize]) -> Vec<Trajectory> {
    idx.iter().filter_map(|&i| trajs.get(i).cloned()).collect()
}

/// Restricts trajectories to a slot window, dropping users without points in it.
pub fn restrict(trajs: &[Trajectory], start: usize, len: usize) -> Vec<Trajectory> {
    trajs.iter().filter_map(|t| t.window(start, len)).collect()
}

/// Builds training material from a dataset and fitted decay parameters.
pub fn prepare_city(ds: &CityDataset, fitted: &DecayParams, mode: DataMode) -> Result<CityData> {
    ds.validate()?;
    let grid = &ds.grid;
    let decay = PromptContext::with_decay(DecayModel::new(*fitted, grid, &ds.field)?, grid);
    let (source, prompt) = match mode {
        DataMode::Disaster => {
            if ds.disaster.is_empty() {
                return Err(Error::InsufficientData(format!("city `{}` has no disaster trajectories", ds.name)));
            }
            (&ds.disaster, decay.clone())
        }
        DataMode::Normal => (&ds.normal, PromptContext::no_disaster(grid)),
    };
    let train = day_windows(&pick(source, &ds.splits.train), grid);
    let val = day_windows(&pick(source, &ds.splits.val), grid);
    if train.is_empty() {
        return Err(Error::InsufficientData(format!("city `{}` has no full-day training windows", ds.name)));
    }
    let (start, len) = disaster_window(ds.field.onset_slot, grid);
    let normal_train = restrict(&pick(&ds.normal, &ds.splits.train), start, len);
    let normal_flow = window_out_of_home_flow(&normal_train, grid, start, len)?;
    let model = decay.decay.as_ref().expect("decay prompt");
    let mut target = FlowMatrix::zeros(grid.n_locations(), len);
    for loc in 0..grid.n_locations() {
        for s in 0..len {
            target.set(loc, s, model.ratio(loc, start + s) * normal_flow.get(loc, s));
        }
    }
    let physics = PhysicsTarget { start_slot: start, len, target, population: normal_train.len() as f64, prompt: decay };
    Ok(CityData { name: ds.name.clone(), grid: grid.clone(), train, val, prompt, physics: Some(physics) })
}

/// Fresh shared and private parameters for one city.
pub fn init_model(cfg: &ModelConfig, grid: &GridSpec, city: &str, seed: u64) -> Result<ParamSet> {
    let shared = init_shared(&cfg.predictor, seed)?;
    let private = init_private(&cfg.predictor, &cfg.codec, grid, city, seed)?;
    shared.union(&private)
}

/// Seeded batches of training windows, reshuffled every pass.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: crate::rng::StreamRng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64, name: &str) -> Self {
        let mut rng = substream(seed, name, 0);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        if n == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(n) {
            if self.pos == n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs `steps` optimizer steps on the total loss over `data.train`.
pub fn train_steps(
    params: &mut ParamSet,
    cfg: &ModelConfig,
    data: &CityData,
    steps: usize,
    batch_size: usize,
    optimizer: &mut Optimizer,
    seed: u64,
) -> Result<Vec<LogRow>> {
    let schedule = cfg.schedule.build()?;
    data.window_len()?;
    let mut sampler = BatchSampler::new(data.train.len(), seed, "batches");
    let mut rng = substream(seed, "train", 0);
    let mut memo = None;
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx = sampler.next_batch(batch_size);
        let batch: Vec<&Trajectory> = idx.iter().map(|&i| &data.train[i]).collect();
        let row = accumulate_step_gradient(params, cfg, &schedule, data, &batch, step, &mut rng, &mut memo)?;
        optimizer.step(params, |_| true)?;
        log::debug!("step {step}: diff {:.5} phy {:.5} total {:.5}", row.loss_diff, row.loss_phy, row.loss_total);
        log.push(row);
    }
    Ok(log)
}

/// Mean diffusion loss over up to `max_windows` windows with fixed noise.
pub fn evaluate_loss(params: &ParamSet, cfg: &ModelConfig, data: &CityData, windows: &[Trajectory], max_windows: usize, seed: u64) -> Result<f64> {
    let schedule = cfg.schedule.build()?;
    let mut rng = substream(seed, "eval-loss", 0);
    let mut eval_cfg = cfg.clone();
    eval_cfg.guidance.p_drop = 0.0;
    let take = windows.len().min(max_windows);
    if take == 0 {
        return Err(Error::InsufficientData(format!("city `{}` has no windows to evaluate", data.name)));
    }
    let mut total = 0.0;
    for chunk in windows[..take].chunks(32) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        let (l, _) = crate::diffusion::diffusion_loss(params, &eval_cfg, &schedule, &refs, &data.grid, &data.prompt, &mut rng)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / take as f64)
}

/// Central-difference check of the diffusion loss through the whole prompt
/// and predictor stack, on random day windows of `grid` under a synthetic
/// decay field. One example in the batch uses the null condition.
pub fn gradcheck_model(
    cfg: &ModelConfig,
    grid: &GridSpec,
    n_windows: usize,
    opts: &crate::nn::gradcheck::GradCheckOptions,
    seed: u64,
) -> Result<crate::nn::gradcheck::GradCheckReport> {
    use rand::Rng;

    cfg.validate()?;
    grid.validate()?;
    let params = init_model(cfg, grid, "gradcheck", seed)?;
    let schedule = cfg.schedule.build()?;
    let (l, t_n) = (grid.n_locations(), grid.n_slots());
    let center = l / 2;
    let onset = grid.slots_per_day / 3;
    let mut v = vec![0.0; l * t_n];
    for loc in 0..l {
        let d = grid.distance_km(loc, center);
        for t in onset..t_n {
            v[loc * t_n + t] = (-d * d / 4.0).exp();
        }
    }
    let field = crate::mobility::DisasterField::new(l, t_n, v, onset, "synthetic", "gradcheck")?;
    let decay = DecayParams { k0: 0.6, alpha_decay: 0.15, rho_km: 2.0 * grid.cell_km };
    let prompt = PromptContext::with_decay(DecayModel::new(decay, grid, &field)?, grid);
    let mut rng = substream(seed, "gradcheck-data", 0);
    let len = grid.slots_per_day;
    let windows: Vec<Trajectory> = (0..n_windows.max(1))
        .map(|i| {
            let locs: Vec<usize> = (0..len).map(|_| rng.random_range(0..l)).collect();
            Trajectory::new(format!("w{i}"), 0, &locs)
        })
        .collect::<Result<_>>()?;
    let draws: Vec<crate::diffusion::NoiseDraw> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut d = crate::diffusion::draw_noise(&mut rng, w.len(), cfg.codec.spatial_width, &schedule, 0.0);
            d.drop_condition = i == 0 && windows.len() > 1;
            d
        })
        .collect();
    let refs: Vec<&Trajectory> = windows.iter().collect();
    crate::nn::gradcheck::grad_check(
        &params,
        |g| {
            crate::diffusion::diffusion_loss_with(
                g,
                |g, i, c| crate::conditioning::predict_noise(g, &cfg.predictor, i, c),
                &refs,
                &draws,
                &schedule,
                grid,
                &prompt,
            )
        },
        opts,
    )
}
