//! The run configuration: one TOML file describing worlds, fitting, model,
//! meta-learning, evaluation and output paths, plus the single seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_BINS;
use crate::meta::MetaConfig;
use crate::mobility::GridSpec;
use crate::nn::optim::OptimizerKind;
use crate::physics::FitOptions;
use crate::rng::derive_seed;
use crate::synthworld::{DisasterScenario, WorldConfig};
use crate::training::DataMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CityRole {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityConfig {
    pub name: String,
    #[serde(default = "default_role")]
    pub role: CityRole,
    pub grid: GridSpec,
    pub n_users: usize,
    #[serde(default = "default_home_work")]
    pub home_work_fraction: f64,
    #[serde(default = "default_epr_rho")]
    pub epr_rho: f64,
    #[serde(default = "default_epr_gamma")]
    pub epr_gamma: f64,
    #[serde(default = "default_stay_prob")]
    pub stay_prob: f64,
    pub scenario: DisasterScenario,
}

fn default_role() -> CityRole {
    CityRole::Source
}
fn default_home_work() -> f64 {
    0.4
}
fn default_epr_rho() -> f64 {
    0.6
}
fn default_epr_gamma() -> f64 {
    0.21
}
fn default_stay_prob() -> f64 {
    0.6
}

impl CityConfig {
    /// World parameters with a seed derived from the run seed and city name.
    pub fn world(&self, run_seed: u64) -> WorldConfig {
        WorldConfig {
            grid: self.grid.clone(),
            n_users: self.n_users,
            home_work_fraction: self.home_work_fraction,
            epr_rho: self.epr_rho,
            epr_gamma: self.epr_gamma,
            stay_prob: self.stay_prob,
            seed: derive_seed(run_seed, &format!("world/{}", self.name)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub cities: Vec<CityConfig>,
}

/// Plain single-city training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_mode")]
    pub mode: DataMode,
    #[serde(default = "default_train_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

fn default_mode() -> DataMode {
    DataMode::Disaster
}
fn default_train_steps() -> usize {
    1500
}
fn default_batch() -> usize {
    16
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_lr() -> f64 {
    2e-3
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            steps: default_train_steps(),
            batch_size: default_batch(),
            optimizer: default_optimizer(),
            lr: default_lr(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgesPolicy {
    /// Equal-width bins over the real set's 1st to 99th percentile.
    RealPercentiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_edges")]
    pub edges: EdgesPolicy,
    /// Trajectories generated for evaluation.
    #[serde(default = "default_n_generate")]
    pub n_generate: usize,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}
fn default_edges() -> EdgesPolicy {
    EdgesPolicy::RealPercentiles
}
fn default_n_generate() -> usize {
    300
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { bins: default_bins(), edges: default_edges(), n_generate: default_n_generate() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    /// Output directory; relative paths resolve against the config file's directory.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

impl Default for IoSection {
    fn default() -> Self {
        Self { out_dir: default_out_dir() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSection,
    #[serde(default)]
    pub physics: FitOptions,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub io: IoSection,
}

/// Re-roots a component's field path under `prefix`, dropping the
/// component's own leading segment.
fn reroot(e: Error, prefix: &str) -> Error {
    match e {
        Error::InvalidConfig { path, msg } => {
            let rest = path.split_once('.').map_or(path.as_str(), |(_, r)| r);
            Error::InvalidConfig { path: format!("{prefix}.{rest}"), msg }
        }
        other => other,
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::config(path, format!("{v} must be finite and > 0")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.world.cities.is_empty() {
            return Err(Error::config("world.cities", "at least one city is required"));
        }
        for (i, c) in self.world.cities.iter().enumerate() {
            let at = format!("world.cities[{i}]");
            if c.name.is_empty() || c.name.contains(char::is_whitespace) || c.name.contains("::") {
                return Err(Error::config(format!("{at}.name"), "must be non-empty without whitespace or `::`"));
            }
            if self.world.cities[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::config(format!("{at}.name"), format!("duplicate city `{}`", c.name)));
            }
            c.grid.validate().map_err(|e| reroot(e, &format!("{at}.grid")))?;
            c.world(self.seed).validate().map_err(|e| reroot(e, &at))?;
            if let Err(e) = c.scenario.truth_decay.validate() {
                return Err(reroot(e, &format!("{at}.scenario.truth_decay")));
            }
            c.scenario.validate(&c.grid).map_err(|e| reroot(e, &format!("{at}.scenario")))?;
            if c.grid.n_locations() <= self.model.codec.spatial_width {
                return Err(Error::config(
                    "model.codec.spatial_width",
                    format!("must be below the {} locations of city `{}`", c.grid.n_locations(), c.name),
                ));
            }
        }
        let targets = self.world.cities.iter().filter(|c| c.role == CityRole::Target).count();
        if targets > 1 {
            return Err(Error::config("world.cities", "at most one city may have role = \"target\""));
        }
        if !self.world.cities.iter().any(|c| c.role == CityRole::Source) {
            return Err(Error::config("world.cities", "at least one city must have role = \"source\""));
        }
        let p = &self.physics;
        if !(p.min_support >= 0.0) {
            return Err(Error::config("physics.min_support", "must be >= 0"));
        }
        if p.max_iters == 0 {
            return Err(Error::config("physics.max_iters", "must be >= 1"));
        }
        for (name, g) in [("physics.k0_grid", &p.k0_grid), ("physics.alpha_grid", &p.alpha_grid)] {
            if g.is_empty() || g.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::config(name, "must be non-empty with finite values >= 0"));
            }
        }
        if p.rho_grid.is_empty() || p.rho_grid.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::config("physics.rho_grid", "must be non-empty with finite values > 0"));
        }
        positive("physics.tolerance", p.tolerance)?;
        self.model.validate()?;
        self.meta.validate()?;
        if self.train.steps == 0 {
            return Err(Error::config("train.steps", "must be >= 1"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        positive("train.lr", self.train.lr)?;
        if self.eval.bins == 0 {
            return Err(Error::config("eval.bins", "must be >= 1"));
        }
        if self.eval.n_generate == 0 {
            return Err(Error::config("eval.n_generate", "must be >= 1"));
        }
        if self.io.out_dir.as_os_str().is_empty() {
            return Err(Error::config("io.out_dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn city(&self, name: &str) -> Option<&CityConfig> {
        self.world.cities.iter().find(|c| c.name == name)
    }

    pub fn sources(&self) -> impl Iterator<Item = &CityConfig> {
        self.world.cities.iter().filter(|c| c.role == CityRole::Source)
    }

    /// The target city, or the first source city when none is marked.
    pub fn target(&self) -> &CityConfig {
        self.world
            .cities
            .iter()
            .find(|c| c.role == CityRole::Target)
            .unwrap_or_else(|| self.sources().next().expect("validated: a source city exists"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("cannot serialize config: {e}")))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parses and validates a config held in memory.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        Error::Parse { line, column, msg: e.message().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file; a relative `io.out_dir` is resolved against the
/// file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if cfg.io.out_dir.is_relative() {
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.io.out_dir = base.join(&cfg.io.out_dir);
    }
    Ok(cfg)
}
