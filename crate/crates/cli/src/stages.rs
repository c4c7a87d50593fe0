//! Pipeline stages over a run directory. Each stage reads persisted
//! artifacts, writes its outputs atomically and records a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dismob_core::config::{load_config, CityConfig, RunConfig};
use dismob_core::diffusion::{sample, CityData, SampleRequest};
use dismob_core::eval::{behavior_report, behavior_statistics, decay_metrics, histogram, percentile_edges, MetricReport};
use dismob_core::io::{log_to_csv, read_field, read_trajectories, to_csv, write_atomic, write_field, write_trajectories};
use dismob_core::meta::{adapt_target, assemble, fresh_shared, meta_train, ParamPartition};
use dismob_core::mobility::{aggregate_out_of_home_flow, CityDataset, Splits, Trajectory};
use dismob_core::nn::checkpoint::{load_checkpoint, save_checkpoint};
use dismob_core::nn::optim::Optimizer;
use dismob_core::nn::{ParamSet, Tag};
use dismob_core::physics::{fit_decay, DecayParams, FitReport};
use dismob_core::rng::derive_seed;
use dismob_core::synthworld::build_city_dataset;
use dismob_core::training::{disaster_window, init_model, prepare_city, restrict, train_steps, DataMode};
use dismob_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{sha256_hex, Outcome, Stage};
use crate::plots::histogram_svg;

/// Fitted decay parameters as written by `fit-physics`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsFit {
    pub k0: f64,
    pub alpha_decay: f64,
    pub rho_km: f64,
    pub rmse: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_support: usize,
}

impl PhysicsFit {
    fn new(p: DecayParams, r: &FitReport) -> Self {
        Self {
            k0: p.k0,
            alpha_decay: p.alpha_decay,
            rho_km: p.rho_km,
            rmse: r.rmse,
            converged: r.converged,
            iterations: r.iterations,
            n_support: r.n_support,
        }
    }

    pub fn params(&self) -> DecayParams {
        DecayParams { k0: self.k0, alpha_decay: self.alpha_decay, rho_km: self.rho_km }
    }
}

/// A loaded config bound to its output directory.
pub struct Run {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub config_sha256: String,
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Precondition(format!("missing artifact {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

impl Run {
    pub fn load(path: &Path) -> Result<Run> {
        let bytes = fs::read(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = load_config(path)?;
        Ok(Run { root: cfg.io.out_dir.clone(), cfg, config_sha256: sha256_hex(&bytes) })
    }

    fn seed(&self, stream: &str) -> u64 {
        derive_seed(self.cfg.seed, stream)
    }

    fn stage(&self, name: String, args: BTreeMap<String, String>, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Stage<'_> {
        Stage { name, args, inputs, outputs, root: &self.root, config_sha256: &self.config_sha256, seed: self.cfg.seed }
    }

    pub fn city(&self, name: Option<&str>) -> Result<&CityConfig> {
        match name {
            None => Ok(self.cfg.target()),
            Some(n) => self
                .cfg
                .city(n)
                .ok_or_else(|| Error::InvalidInput(format!("no city named `{n}` in the config"))),
        }
    }

    pub fn cities(&self, name: Option<&str>) -> Result<Vec<&CityConfig>> {
        match name {
            None => Ok(self.cfg.world.cities.iter().collect()),
            Some(_) => Ok(vec![self.city(name)?]),
        }
    }

    fn world_dir(&self, city: &str) -> PathBuf {
        self.root.join("world").join(city)
    }

    fn world_files(&self, city: &str) -> Vec<PathBuf> {
        let d = self.world_dir(city);
        ["normal.csv", "disaster.csv", "field.csv", "splits.json"].iter().map(|f| d.join(f)).collect()
    }

    pub fn physics_path(&self, city: &str) -> PathBuf {
        self.root.join("physics").join(format!("{city}.json"))
    }

    pub fn meta_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("meta.ckpt")
    }

    pub fn single_checkpoint(&self, city: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("single-{city}.ckpt"))
    }

    pub fn adapted_checkpoint(&self, city: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("adapted-{city}.ckpt"))
    }

    pub fn generated_path(&self, city: &str) -> PathBuf {
        self.root.join("generated").join(format!("{city}.csv"))
    }

    pub fn metrics_path(&self, city: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{city}.csv"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    pub fn make_world(&self, c: &CityConfig) -> Result<Outcome> {
        let outputs = self.world_files(&c.name);
        self.stage(format!("make-world-{}", c.name), BTreeMap::new(), vec![], outputs.clone()).run(|| {
            let ds = build_city_dataset(&c.name, &c.world(self.cfg.seed), &c.scenario)?;
            write_trajectories(&outputs[0], &ds.normal)?;
            write_trajectories(&outputs[1], &ds.disaster)?;
            write_field(&outputs[2], &ds.field)?;
            write_atomic(&outputs[3], &json_bytes(&ds.splits)?)?;
            log::info!("city {}: {} users", c.name, ds.normal.len());
            Ok(())
        })
    }

    pub fn load_dataset(&self, c: &CityConfig) -> Result<CityDataset> {
        let files = self.world_files(&c.name);
        if let Some(p) = files.iter().find(|p| !p.exists()) {
            return Err(Error::Precondition(format!("missing artifact {} (run `dismob make-world` first)", p.display())));
        }
        let sc = &c.scenario;
        let ds = CityDataset {
            name: c.name.clone(),
            grid: c.grid.clone(),
            normal: read_trajectories(&files[0], &c.grid)?,
            disaster: read_trajectories(&files[1], &c.grid)?,
            field: read_field(&files[2], &c.grid, sc.onset_slot, &sc.disaster_type, &c.name)?,
            splits: read_json::<Splits>(&files[3])?,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn fit_physics(&self, c: &CityConfig) -> Result<Outcome> {
        let out = self.physics_path(&c.name);
        self.stage(format!("fit-physics-{}", c.name), BTreeMap::new(), self.world_files(&c.name), vec![out.clone()])
            .run(|| {
                let ds = self.load_dataset(c)?;
                let normal = aggregate_out_of_home_flow(&ds.normal, &ds.grid)?;
                let observed = aggregate_out_of_home_flow(&ds.disaster, &ds.grid)?;
                let (p, r) = fit_decay(&normal, &observed, &ds.field, &ds.grid, &self.cfg.physics)?;
                let fit = PhysicsFit::new(p, &r);
                println!(
                    "{}: k0 {:.4} alpha_decay {:.4} rho_km {:.3} rmse {:.4e} converged {}",
                    c.name, fit.k0, fit.alpha_decay, fit.rho_km, fit.rmse, fit.converged
                );
                write_atomic(&out, &json_bytes(&fit)?)
            })
    }

    pub fn read_fit(&self, city: &str) -> Result<PhysicsFit> {
        let p = self.physics_path(city);
        if !p.exists() {
            return Err(Error::Precondition(format!("missing artifact {} (run `dismob fit-physics` first)", p.display())));
        }
        read_json(&p)
    }

    pub fn city_data(&self, c: &CityConfig, mode: DataMode) -> Result<CityData> {
        let ds = self.load_dataset(c)?;
        prepare_city(&ds, &self.read_fit(&c.name)?.params(), mode)
    }

    fn city_inputs(&self, city: &str) -> Vec<PathBuf> {
        let mut v = self.world_files(city);
        v.push(self.physics_path(city));
        v
    }

    pub fn train_meta(&self) -> Result<Outcome> {
        let sources: Vec<&CityConfig> = self.cfg.sources().collect();
        let inputs = sources.iter().flat_map(|c| self.city_inputs(&c.name)).collect();
        let ckpt = self.meta_checkpoint();
        let log_path = self.root.join("logs").join("meta-rounds.csv");
        self.stage("train-meta".into(), BTreeMap::new(), inputs, vec![ckpt.clone(), log_path.clone()]).run(|| {
            let cities = sources
                .iter()
                .map(|c| self.city_data(c, self.cfg.train.mode))
                .collect::<Result<Vec<_>>>()?;
            let seed = self.seed("train");
            let mut store = ParamPartition::new(fresh_shared(&self.cfg.model, seed)?);
            let log = meta_train(&mut store, &cities, &self.cfg.model, &self.cfg.meta, seed)?;
            if let Some(last) = log.last() {
                println!("meta-training: {} visits, last validation loss {:.5}", log.len(), last.val_loss);
            }
            let meta = BTreeMap::from([("kind".to_string(), json!("meta"))]);
            fs::create_dir_all(ckpt.parent().expect("has parent"))?;
            save_checkpoint(&ckpt, &store.flatten()?, &meta)?;
            write_atomic(&log_path, &to_csv(log.iter())?)
        })
    }

    pub fn train_single(&self, c: &CityConfig) -> Result<Outcome> {
        let ckpt = self.single_checkpoint(&c.name);
        let log_path = self.root.join("logs").join(format!("train-{}.csv", c.name));
        let name = format!("train-single-{}", c.name);
        self.stage(name, BTreeMap::new(), self.city_inputs(&c.name), vec![ckpt.clone(), log_path.clone()]).run(|| {
            let t = &self.cfg.train;
            let data = self.city_data(c, t.mode)?;
            let seed = self.seed("train");
            let mut params = init_model(&self.cfg.model, &c.grid, &c.name, seed)?;
            let mut opt = Optimizer::new(t.optimizer, t.lr);
            let log = train_steps(&mut params, &self.cfg.model, &data, t.steps, t.batch_size, &mut opt, seed)?;
            if let Some(last) = log.last() {
                println!("{}: {} steps, final loss {:.5}", c.name, log.len(), last.loss_total);
            }
            let meta = BTreeMap::from([("kind".to_string(), json!("single")), ("city".to_string(), json!(c.name))]);
            fs::create_dir_all(ckpt.parent().expect("has parent"))?;
            save_checkpoint(&ckpt, &params, &meta)?;
            write_atomic(&log_path, &log_to_csv(&log)?)
        })
    }

    pub fn adapt(&self, c: &CityConfig) -> Result<Outcome> {
        let mut inputs = vec![self.meta_checkpoint()];
        inputs.extend(self.city_inputs(&c.name));
        let ckpt = self.adapted_checkpoint(&c.name);
        let log_path = self.root.join("logs").join(format!("adapt-{}.csv", c.name));
        self.stage(format!("adapt-{}", c.name), BTreeMap::new(), inputs, vec![ckpt.clone(), log_path.clone()]).run(|| {
            let store = self.load_meta()?;
            let data = self.city_data(c, self.cfg.train.mode)?;
            let (model, log) = adapt_target(&store.shared, &data, &self.cfg.model, &self.cfg.meta, self.seed("train"))?;
            if let Some(last) = log.last() {
                println!("{}: adapted for {} steps, final loss {:.5}", c.name, log.len(), last.loss_total);
            }
            let meta = BTreeMap::from([("kind".to_string(), json!("adapted")), ("city".to_string(), json!(c.name))]);
            save_checkpoint(&ckpt, &model, &meta)?;
            write_atomic(&log_path, &log_to_csv(&log)?)
        })
    }

    fn load_meta(&self) -> Result<ParamPartition> {
        let ck = load_checkpoint(&self.meta_checkpoint())?;
        if ck.meta.get("kind") != Some(&json!("meta")) {
            return Err(Error::InvalidInput(format!("{} is not a meta checkpoint", self.meta_checkpoint().display())));
        }
        ParamPartition::unflatten(&ck.params)
    }

    /// Model parameters for `c` from any checkpoint kind. A meta checkpoint
    /// gets freshly initialized private parameters for cities it has not seen.
    pub fn model_from(&self, path: &Path, c: &CityConfig) -> Result<ParamSet> {
        let ck = load_checkpoint(path)?;
        if ck.meta.get("kind") == Some(&json!("meta")) {
            let mut store = ParamPartition::unflatten(&ck.params)?;
            let private = store.private_for(&self.cfg.model, &c.name, &c.grid, self.seed("train"))?.clone();
            return assemble(&store.shared, &private);
        }
        if let Some(p) = ck.params.iter().find(|p| matches!(&p.tag, Tag::Private(city) if *city != c.name)) {
            return Err(Error::InvalidInput(format!(
                "{} holds parameters for another city (`{}` is tagged {})",
                path.display(),
                p.name,
                p.tag
            )));
        }
        Ok(ck.params)
    }

    pub fn generate(&self, c: &CityConfig, checkpoint: Option<&Path>) -> Result<Outcome> {
        let ckpt = checkpoint.map_or_else(|| self.adapted_checkpoint(&c.name), Path::to_path_buf);
        if !ckpt.exists() {
            return Err(Error::Precondition(format!(
                "missing artifact: checkpoint {} not found (run `dismob adapt` or pass --checkpoint)",
                ckpt.display()
            )));
        }
        let out = self.generated_path(&c.name);
        let mut inputs = vec![ckpt.clone()];
        inputs.extend(self.city_inputs(&c.name));
        let args = BTreeMap::from([("checkpoint".to_string(), self.rel(&ckpt))]);
        self.stage(format!("generate-{}", c.name), args, inputs, vec![out.clone()]).run(|| {
            let params = self.model_from(&ckpt, c)?;
            let gen = self.sample_for(c, &params, self.seed("sample"))?;
            let (start, len) = disaster_window(c.scenario.onset_slot, &c.grid);
            println!("{}: generated {} trajectories over slots {start}..{}", c.name, gen.len(), start + len);
            write_trajectories(&out, &gen)
        })
    }

    /// `eval.n_generate` disaster-day trajectories under the city's decay prompt.
    pub fn sample_for(&self, c: &CityConfig, params: &ParamSet, seed: u64) -> Result<Vec<Trajectory>> {
        let data = self.city_data(c, DataMode::Disaster)?;
        let prompt = &data.physics.as_ref().expect("prepared with a decay target").prompt;
        let (start, len) = disaster_window(c.scenario.onset_slot, &c.grid);
        let m = &self.cfg.model;
        let req = SampleRequest { n_users: self.cfg.eval.n_generate, start_slot: start, len, omega: m.guidance.omega, seed };
        sample(params, m, &m.schedule.build()?, &c.grid, prompt, &req)
    }

    /// Test-split disaster trajectories over the disaster day.
    fn real_window(&self, c: &CityConfig, ds: &CityDataset) -> Vec<Trajectory> {
        let (start, len) = disaster_window(c.scenario.onset_slot, &c.grid);
        restrict(&self.test_sets(ds).0, start, len)
    }

    /// All six metrics of `gen` against the city's held-out users.
    pub fn score(&self, c: &CityConfig, gen: &[Trajectory]) -> Result<MetricReport> {
        let ds = self.load_dataset(c)?;
        let (test_dis, test_norm) = self.test_sets(&ds);
        let b = behavior_report(&self.real_window(c, &ds), gen, &c.grid, self.cfg.eval.bins)?;
        let d = decay_metrics(gen, &test_dis, &test_norm, &ds.field, &c.grid, &self.cfg.physics)?;
        let report = MetricReport::new(&b, &d);
        report.validate()?;
        Ok(report)
    }

    /// Test-split real trajectories: disaster and normal.
    fn test_sets(&self, ds: &CityDataset) -> (Vec<Trajectory>, Vec<Trajectory>) {
        let pick = |v: &[Trajectory]| ds.splits.test.iter().filter_map(|&i| v.get(i).cloned()).collect::<Vec<_>>();
        (pick(&ds.disaster), pick(&ds.normal))
    }

    pub fn evaluate(&self, c: &CityConfig, generated: Option<&Path>, plots: bool) -> Result<Outcome> {
        let gen_path = generated.map_or_else(|| self.generated_path(&c.name), Path::to_path_buf);
        let out = self.metrics_path(&c.name);
        let mut outputs = vec![out.clone()];
        let plot_dir = self.root.join("plots");
        let names = ["distance", "radius", "duration", "dailyloc"];
        if plots {
            outputs.extend(names.iter().map(|n| plot_dir.join(format!("{}-{n}.svg", c.name))));
        }
        let mut inputs = vec![gen_path.clone()];
        inputs.extend(self.world_files(&c.name));
        let args = BTreeMap::from([("generated".to_string(), self.rel(&gen_path)), ("plots".to_string(), plots.to_string())]);
        self.stage(format!("evaluate-{}", c.name), args, inputs, outputs.clone()).run(|| {
            let gen = read_trajectories(&gen_path, &c.grid)?;
            let report = self.score(c, &gen)?;
            print!("{}", report.to_csv());
            write_atomic(&out, report.to_csv().as_bytes())?;
            if plots {
                let ds = self.load_dataset(c)?;
                let real = self.real_window(c, &ds);
                let real_stats = behavior_statistics(&real, &c.grid);
                let gen_stats = behavior_statistics(&gen, &c.grid);
                for (k, name) in names.iter().enumerate() {
                    let edges = percentile_edges(&real_stats[k], self.cfg.eval.bins)?;
                    let hr = histogram(&real_stats[k], &edges)?;
                    let hg = histogram(&gen_stats[k], &edges)?;
                    let svg = histogram_svg(&format!("{} {name}", c.name), &edges, &hr.mass, &hg.mass);
                    write_atomic(&outputs[1 + k], svg.as_bytes())?;
                }
            }
            Ok(())
        })
    }

    /// world, physics fits, meta-training, target adaptation, generation and
    /// evaluation, each skipped when up to date.
    pub fn pipeline(&self) -> Result<()> {
        for c in &self.cfg.world.cities {
            self.make_world(c)?;
        }
        for c in &self.cfg.world.cities {
            self.fit_physics(c)?;
        }
        self.train_meta()?;
        let target = self.cfg.target();
        self.adapt(target)?;
        self.generate(target, None)?;
        self.evaluate(target, None, false)?;
        Ok(())
    }
}
