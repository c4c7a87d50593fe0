//! Shared/private parameter partition and first-order meta-learning across cities.
//!
//! Shared parameters (transformer, cross-attention, prompt MLP, null row, step
//! projection) are meta-learned; each city keeps its own private parameters
//! (embedding tables, input projection, output head).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conditioning::{init_private, init_shared};
use crate::diffusion::{accumulate_step_gradient, CityData, LogRow, ModelConfig};
use crate::error::{Error, Result};
use crate::mobility::{GridSpec, Trajectory};
use crate::nn::optim::{sgd_step, Optimizer, OptimizerKind};
use crate::nn::{ParamSet, Parameter, Tag};
use crate::rng::{derive_seed, substream};
use crate::training::{evaluate_loss, train_steps, BatchSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    #[serde(default = "default_lr_inner")]
    pub lr_inner: f64,
    #[serde(default = "default_lr_meta")]
    pub lr_meta: f64,
    #[serde(default = "default_lr_target")]
    pub lr_target: f64,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_meta_rounds")]
    pub meta_rounds: usize,
    #[serde(default = "default_target_steps")]
    pub target_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Optimizer for target adaptation; inner and meta steps are always plain SGD.
    #[serde(default = "default_target_optimizer")]
    pub target_optimizer: OptimizerKind,
    /// Validation windows scored per city and round.
    #[serde(default = "default_val_windows")]
    pub val_windows: usize,
}

fn default_lr_inner() -> f64 {
    0.05
}
fn default_lr_meta() -> f64 {
    0.05
}
fn default_lr_target() -> f64 {
    2e-3
}
fn default_inner_steps() -> usize {
    10
}
fn default_meta_rounds() -> usize {
    10
}
fn default_target_steps() -> usize {
    200
}
fn default_batch_size() -> usize {
    16
}
fn default_target_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_val_windows() -> usize {
    64
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            lr_inner: default_lr_inner(),
            lr_meta: default_lr_meta(),
            lr_target: default_lr_target(),
            inner_steps: default_inner_steps(),
            meta_rounds: default_meta_rounds(),
            target_steps: default_target_steps(),
            batch_size: default_batch_size(),
            target_optimizer: default_target_optimizer(),
            val_windows: default_val_windows(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (p, v) in [("meta.lr_inner", self.lr_inner), ("meta.lr_meta", self.lr_meta), ("meta.lr_target", self.lr_target)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(p, format!("learning rate {v} must be finite and >= 0")));
            }
        }
        for (p, v) in [
            ("meta.inner_steps", self.inner_steps),
            ("meta.meta_rounds", self.meta_rounds),
            ("meta.batch_size", self.batch_size),
            ("meta.val_windows", self.val_windows),
        ] {
            if v == 0 {
                return Err(Error::config(p, "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Meta-learned shared parameters plus one private set per city.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamPartition {
    pub shared: ParamSet,
    pub private: BTreeMap<String, ParamSet>,
}

/// Separator between city and parameter name when private sets are flattened.
const CITY_SEP: &str = "::";

impl ParamPartition {
    pub fn new(shared: ParamSet) -> Self {
        Self { shared, private: BTreeMap::new() }
    }

    /// Every parameter sits in exactly one set and carries the matching tag.
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.shared.iter().find(|p| p.tag != Tag::Shared) {
            return Err(Error::Integrity(format!("shared set holds `{}` tagged {}", p.name, p.tag)));
        }
        for (city, set) in &self.private {
            for p in set.iter() {
                if p.tag != Tag::Private(city.clone()) {
                    return Err(Error::Integrity(format!("private set of `{city}` holds `{}` tagged {}", p.name, p.tag)));
                }
                if self.shared.get(&p.name).is_some() {
                    return Err(Error::Integrity(format!("`{}` is both shared and private to `{city}`", p.name)));
                }
            }
        }
        Ok(())
    }

    /// The private set of `city`, created fresh on first use.
    pub fn private_for(&mut self, cfg: &ModelConfig, city: &str, grid: &GridSpec, seed: u64) -> Result<&ParamSet> {
        if !self.private.contains_key(city) {
            let p = fresh_private(cfg, city, grid, seed)?;
            self.private.insert(city.to_string(), p);
        }
        Ok(&self.private[city])
    }

    /// One flat set for checkpointing: shared names as-is, private names
    /// prefixed by their city.
    pub fn flatten(&self) -> Result<ParamSet> {
        let mut out = self.shared.clone();
        for (city, set) in &self.private {
            for p in set.iter() {
                let mut q = p.clone();
                q.name = format!("{city}{CITY_SEP}{}", p.name);
                out.insert(q)?;
            }
        }
        Ok(out)
    }

    /// Inverse of [`ParamPartition::flatten`], routing by tag.
    pub fn unflatten(flat: &ParamSet) -> Result<Self> {
        let mut out = Self::default();
        for p in flat.iter() {
            match &p.tag {
                Tag::Shared => {
                    out.shared.insert(p.clone())?;
                }
                Tag::Private(city) => {
                    let prefix = format!("{city}{CITY_SEP}");
                    let name = p.name.strip_prefix(&prefix).ok_or_else(|| {
                        Error::Integrity(format!("private parameter `{}` lacks the `{prefix}` prefix", p.name))
                    })?;
                    let mut q = p.clone();
                    q.name = name.to_string();
                    out.private.entry(city.clone()).or_default().insert(q)?;
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Freshly initialized private parameters, seeded per city.
pub fn fresh_private(cfg: &ModelConfig, city: &str, grid: &GridSpec, seed: u64) -> Result<ParamSet> {
    init_private(&cfg.predictor, &cfg.codec, grid, city, derive_seed(seed, &format!("private/{city}")))
}

pub fn fresh_shared(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    init_shared(&cfg.predictor, derive_seed(seed, "shared"))
}

/// Deep copy of `shared` joined with `private`.
pub fn assemble(shared: &ParamSet, private: &ParamSet) -> Result<ParamSet> {
    let mut model = shared.union(private)?;
    model.zero_grad();
    Ok(model)
}

/// `steps` SGD steps where `grad` fills the parameters' gradient buffers for
/// step `k` and returns that step's loss. Returns the last loss.
pub fn descend<G>(model: &mut ParamSet, steps: usize, lr: f64, mut grad: G) -> Result<Option<f64>>
where
    G: FnMut(&mut ParamSet, usize) -> Result<f64>,
{
    let mut last = None;
    for k in 0..steps {
        model.zero_grad();
        last = Some(grad(model, k)?);
        sgd_step(model, lr, |_| true)?;
    }
    Ok(last)
}

/// One descent step on the meta store's shared parameters, using gradients
/// left in the same-named parameters of `adapted` (first-order: the
/// gradient is taken at the adapted values). Private parameters are untouched.
pub fn apply_meta_gradient(shared: &mut ParamSet, adapted: &ParamSet, lr_meta: f64) -> Result<()> {
    if !(lr_meta >= 0.0) {
        return Err(Error::InvalidInput(format!("learning rate {lr_meta} must be >= 0")));
    }
    adapted.check_finite_grads()?;
    for p in shared.iter_mut().filter(|p| p.trainable) {
        let src = adapted
            .get(&p.name)
            .ok_or_else(|| Error::InvalidInput(format!("adapted model lacks shared parameter `{}`", p.name)))?;
        if src.grad.shape() != p.value.shape() {
            return Err(Error::InvalidShape(format!("gradient shape mismatch for `{}`", p.name)));
        }
        for (v, g) in p.value.data_mut().iter_mut().zip(src.grad.data()) {
            *v -= lr_meta * g;
        }
        p.value.quantize();
    }
    Ok(())
}

/// `steps` SGD steps on the total loss over seeded mini-batches of the city's
/// training windows. Returns the last step's log row.
pub fn inner_update(
    model: &mut ParamSet,
    cfg: &ModelConfig,
    data: &CityData,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Option<LogRow>> {
    let schedule = cfg.schedule.build()?;
    data.window_len()?;
    let mut sampler = BatchSampler::new(data.train.len(), seed, "inner-batches");
    let mut rng = substream(seed, "inner", 0);
    let mut memo = None;
    let mut last = None;
    descend(model, steps, lr, |m, k| {
        let idx = sampler.next_batch(batch_size);
        let batch: Vec<&Trajectory> = idx.iter().map(|&i| &data.train[i]).collect();
        let row = accumulate_step_gradient(m, cfg, &schedule, data, &batch, k, &mut rng, &mut memo)?;
        last = Some(row);
        Ok(row.loss_total)
    })?;
    Ok(last)
}

/// Gradient of the total loss on one validation batch of `adapted`, applied
/// to the meta store's shared parameters. Returns the batch loss.
pub fn meta_update(
    shared: &mut ParamSet,
    adapted: &mut ParamSet,
    cfg: &ModelConfig,
    data: &CityData,
    lr_meta: f64,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let schedule = cfg.schedule.build()?;
    let windows = if data.val.is_empty() { &data.train } else { &data.val };
    let mut sampler = BatchSampler::new(windows.len(), seed, "meta-batches");
    let idx = sampler.next_batch(batch_size);
    let batch: Vec<&Trajectory> = idx.iter().map(|&i| &windows[i]).collect();
    let mut rng = substream(seed, "meta", 0);
    let mut memo = None;
    let row = accumulate_step_gradient(adapted, cfg, &schedule, data, &batch, 0, &mut rng, &mut memo)?;
    apply_meta_gradient(shared, adapted, lr_meta)?;
    Ok(row.loss_total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub city: String,
    pub inner_loss: f64,
    pub meta_loss: f64,
    /// Diffusion loss of the adapted model on validation windows with fixed noise.
    pub val_loss: f64,
}

/// `meta_rounds` sweeps over the cities in a seeded shuffled order, each
/// visit performing assemble, inner update and meta update. Inner-updated
/// private parameters are kept for the city's next visit.
pub fn meta_train(store: &mut ParamPartition, cities: &[CityData], cfg: &ModelConfig, meta: &MetaConfig, seed: u64) -> Result<Vec<RoundLog>> {
    meta.validate()?;
    if cities.is_empty() {
        return Err(Error::InsufficientData("meta-training needs at least one source city".into()));
    }
    let mut log = Vec::new();
    for round in 0..meta.meta_rounds {
        let mut order: Vec<usize> = (0..cities.len()).collect();
        order.shuffle(&mut substream(seed, "meta-order", round as u64));
        for &ci in &order {
            let data = &cities[ci];
            let visit = derive_seed(seed, &format!("round{round}/{}", data.name));
            let private = store.private_for(cfg, &data.name, &data.grid, seed)?.clone();
            let mut adapted = assemble(&store.shared, &private)?;
            let inner = inner_update(&mut adapted, cfg, data, meta.inner_steps, meta.lr_inner, meta.batch_size, visit)?;
            let val_windows = if data.val.is_empty() { &data.train } else { &data.val };
            let val_loss = evaluate_loss(&adapted, cfg, data, val_windows, meta.val_windows, derive_seed(seed, "val"))?;
            let meta_loss = meta_update(&mut store.shared, &mut adapted, cfg, data, meta.lr_meta, meta.batch_size, visit)?;
            let private_names: Vec<String> = private.names();
            let kept = adapted.filter(|p| private_names.contains(&p.name));
            store.private.get_mut(&data.name).expect("created above").copy_values_from(&kept)?;
            log::info!("round {round} city {}: val loss {val_loss:.5}", data.name);
            log.push(RoundLog {
                round,
                city: data.name.clone(),
                inner_loss: inner.map_or(f64::NAN, |r| r.loss_total),
                meta_loss,
                val_loss,
            });
        }
    }
    store.validate()?;
    Ok(log)
}

/// Assembles the meta-shared parameters with a fresh private set for the
/// target city and fine-tunes for `target_steps` on its training windows.
/// The store is not modified.
pub fn adapt_target(shared: &ParamSet, target: &CityData, cfg: &ModelConfig, meta: &MetaConfig, seed: u64) -> Result<(ParamSet, Vec<LogRow>)> {
    meta.validate()?;
    if target.train.is_empty() {
        return Err(Error::InsufficientData(format!("target city `{}` has no training windows", target.name)));
    }
    let private = fresh_private(cfg, &target.name, &target.grid, seed)?;
    let mut model = assemble(shared, &private)?;
    let mut opt = Optimizer::new(meta.target_optimizer, meta.lr_target);
    let log = train_steps(&mut model, cfg, target, meta.target_steps, meta.batch_size, &mut opt, derive_seed(seed, "adapt"))?;
    Ok((model, log))
}

/// Shared parameters of `model` as a standalone set.
pub fn shared_part(model: &ParamSet) -> ParamSet {
    model.filter(|p: &Parameter| p.tag == Tag::Shared)
}
