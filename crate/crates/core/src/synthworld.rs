//! Deterministic synthetic cities with known ground truth.
//!
//! Normal mobility follows an exploration / preferential-return walk anchored
//! at home (nights) and work. Disaster mobility thins out-of-home visits: each
//! one is replaced by a stay at home with probability `1 - H(i, t)` under the
//! scenario's true decay parameters, so fitting has a known answer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::{CityDataset, DisasterField, GridSpec, Splits, Trajectory};
use crate::physics::{DecayModel, DecayParams};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid: GridSpec,
    pub n_users: usize,
    pub home_work_fraction: f64,
    pub epr_rho: f64,
    pub epr_gamma: f64,
    /// Probability of keeping the previous daytime location for another slot.
    #[serde(default = "default_stay_prob")]
    pub stay_prob: f64,
    pub seed: u64,
}

fn default_stay_prob() -> f64 {
    0.6
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_users == 0 {
            return Err(Error::config("world.n_users", "must be at least 1"));
        }
        for (name, p) in [
            ("world.home_work_fraction", self.home_work_fraction),
            ("world.epr_rho", self.epr_rho),
            ("world.stay_prob", self.stay_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("probability {p} outside [0, 1]")));
            }
        }
        if !(self.epr_gamma >= 0.0) {
            return Err(Error::config("world.epr_gamma", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisasterScenario {
    pub epicenter: usize,
    pub peak_intensity: f64,
    pub spatial_sigma_km: f64,
    pub onset_slot: usize,
    pub duration_slots: usize,
    pub truth_decay: DecayParams,
    #[serde(default = "default_disaster_type")]
    pub disaster_type: String,
}

fn default_disaster_type() -> String {
    "rainstorm".into()
}

impl DisasterScenario {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.epicenter >= grid.n_locations() {
            return Err(Error::config(
                "scenario.epicenter",
                format!("cell {} outside grid of {} cells", self.epicenter, grid.n_locations()),
            ));
        }
        if !(self.peak_intensity > 0.0) {
            return Err(Error::config("scenario.peak_intensity", "must be > 0"));
        }
        if !(self.spatial_sigma_km > 0.0) {
            return Err(Error::config("scenario.spatial_sigma_km", "must be > 0"));
        }
        if self.duration_slots == 0 {
            return Err(Error::config("scenario.duration_slots", "must be at least 1"));
        }
        if self.onset_slot >= grid.n_slots() {
            return Err(Error::config("scenario.onset_slot", "onset after the last slot"));
        }
        self.truth_decay.validate()
    }
}

/// A generated city: per-cell attractiveness and per-user anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct City {
    pub grid: GridSpec,
    pub attractiveness: Vec<f64>,
    pub homes: Vec<usize>,
    pub works: Vec<usize>,
}

fn sample_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn make_city(config: &WorldConfig) -> Result<City> {
    config.validate()?;
    let grid = &config.grid;
    let l = grid.n_locations();
    let mut rng = substream(config.seed, "city", 0);
    let n_hotspots = (l / 16).max(1);
    let hotspots: Vec<usize> = (0..n_hotspots).map(|_| rng.random_range(0..l)).collect();
    let spread = 1.5 * grid.cell_km;
    let raw: Vec<f64> = (0..l)
        .map(|c| {
            0.2 + hotspots
                .iter()
                .map(|&h| (-grid.distance_km(c, h).powi(2) / (2.0 * spread * spread)).exp())
                .sum::<f64>()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let attractiveness: Vec<f64> = raw.iter().map(|v| v / total).collect();

    let work_weights: Vec<f64> = attractiveness.iter().map(|a| a * a).collect();
    let mut homes = Vec::with_capacity(config.n_users);
    let mut works = Vec::with_capacity(config.n_users);
    for u in 0..config.n_users {
        let mut r = substream(config.seed, "anchors", u as u64);
        let home = sample_weighted(&mut r, &attractiveness);
        let mut work = sample_weighted(&mut r, &work_weights);
        if l > 1 {
            while work == home {
                work = sample_weighted(&mut r, &work_weights);
            }
        }
        homes.push(home);
        works.push(work);
    }
    Ok(City { grid: grid.clone(), attractiveness, homes, works })
}

/// Gaussian-in-space, boxcar-in-time intensity field.
pub fn make_disaster(scenario: &DisasterScenario, grid: &GridSpec, city: &str) -> Result<DisasterField> {
    scenario.validate(grid)?;
    let (l, t_n) = (grid.n_locations(), grid.n_slots());
    let mut v = vec![0.0; l * t_n];
    let end = (scenario.onset_slot + scenario.duration_slots).min(t_n);
    let s2 = 2.0 * scenario.spatial_sigma_km * scenario.spatial_sigma_km;
    for loc in 0..l {
        let spatial = scenario.peak_intensity * (-grid.distance_km(loc, scenario.epicenter).powi(2) / s2).exp();
        for t in scenario.onset_slot..end {
            v[loc * t_n + t] = spatial;
        }
    }
    DisasterField::new(l, t_n, v, scenario.onset_slot, scenario.disaster_type.clone(), city)
}

pub fn user_id(index: usize) -> String {
    format!("u{index:05}")
}

/// Exploration and preferential return around fixed home/work anchors.
pub fn simulate_normal(city: &City, config: &WorldConfig) -> Result<Vec<Trajectory>> {
    let grid = &city.grid;
    let l = grid.n_locations();
    let t_n = grid.n_slots();
    let mut out = Vec::with_capacity(city.homes.len());
    for (u, (&home, &work)) in city.homes.iter().zip(&city.works).enumerate() {
        let mut rng = substream(config.seed, "normal", u as u64);
        let mut visits = vec![0.0f64; l];
        visits[home] += 1.0;
        visits[work] += 1.0;
        let mut seen = if home == work { 1usize } else { 2 };
        let mut locs = Vec::with_capacity(t_n);
        let mut current = home;
        for s in 0..t_n {
            if grid.is_night(s) {
                current = home;
            } else {
                let day_start = s == 0 || grid.is_night(s - 1);
                if day_start || rng.random::<f64>() >= config.stay_prob {
                    current = if rng.random::<f64>() < config.home_work_fraction {
                        work
                    } else {
                        let explore_p = config.epr_rho * (seen as f64).powf(-config.epr_gamma);
                        let unseen: Vec<f64> = (0..l)
                            .map(|c| if visits[c] == 0.0 { city.attractiveness[c] } else { 0.0 })
                            .collect();
                        if rng.random::<f64>() < explore_p && unseen.iter().any(|&w| w > 0.0) {
                            seen += 1;
                            sample_weighted(&mut rng, &unseen)
                        } else {
                            sample_weighted(&mut rng, &visits)
                        }
                    };
                    visits[current] += 1.0;
                }
            }
            locs.push(current);
        }
        out.push(Trajectory::new(user_id(u), 0, &locs)?);
    }
    Ok(out)
}

/// Thins out-of-home visits of `normal` according to the scenario's true decay law.
pub fn simulate_disaster(
    city: &City,
    normal: &[Trajectory],
    scenario: &DisasterScenario,
    grid: &GridSpec,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if *grid != city.grid {
        return Err(Error::InvalidInput("disaster grid differs from the city grid".into()));
    }
    if normal.len() != city.homes.len() {
        return Err(Error::InvalidInput(format!(
            "{} trajectories for {} city users",
            normal.len(),
            city.homes.len()
        )));
    }
    let field = make_disaster(scenario, grid, "")?;
    let model = DecayModel::new(scenario.truth_decay, grid, &field)?;
    let mut out = Vec::with_capacity(normal.len());
    for (u, traj) in normal.iter().enumerate() {
        traj.validate(grid)?;
        let home = city.homes[u];
        let mut rng = substream(seed, "disaster", u as u64);
        let locs: Vec<usize> = traj
            .points()
            .iter()
            .map(|p| {
                let draw = rng.random::<f64>();
                if p.loc != home && draw >= model.ratio(p.loc, p.slot) {
                    home
                } else {
                    p.loc
                }
            })
            .collect();
        out.push(Trajectory::new(traj.user_id.clone(), traj.start_slot(), &locs)?);
    }
    Ok(out)
}

/// Full synthetic city: world, disaster field, both trajectory sets and a
/// 60/20/20 user split.
pub fn build_city_dataset(name: &str, world: &WorldConfig, scenario: &DisasterScenario) -> Result<CityDataset> {
    let city = make_city(world)?;
    let normal = simulate_normal(&city, world)?;
    let disaster = simulate_disaster(&city, &normal, scenario, &world.grid, world.seed)?;
    let mut field = make_disaster(scenario, &world.grid, name)?;
    field.city = name.to_string();
    let ds = CityDataset {
        name: name.to_string(),
        grid: world.grid.clone(),
        splits: Splits::by_fraction(normal.len(), 0.6, 0.2),
        normal,
        disaster,
        field,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::aggregate_flow;

    fn world(rows: usize, cols: usize, users: usize, seed: u64) -> WorldConfig {
        WorldConfig {
            grid: GridSpec { rows, cols, cell_km: 1.0, slots_per_day: 24, days: 2, slot_minutes: 60 },
            n_users: users,
            home_work_fraction: 0.4,
            epr_rho: 0.6,
            epr_gamma: 0.21,
            stay_prob: 0.6,
            seed,
        }
    }

    fn scenario(epicenter: usize) -> DisasterScenario {
        DisasterScenario {
            epicenter,
            peak_intensity: 1.0,
            spatial_sigma_km: 1.5,
            onset_slot: 30,
            duration_slots: 10,
            truth_decay: DecayParams { k0: 0.6, alpha_decay: 0.15, rho_km: 2.0 },
            disaster_type: "storm".into(),
        }
    }

    #[test]
    fn single_cell_city() {
        let c = make_city(&world(1, 1, 3, 1)).unwrap();
        assert_eq!(c.attractiveness, vec![1.0]);
        assert_eq!(c.homes, vec![0, 0, 0]);
    }

    #[test]
    fn city_is_deterministic_and_normalized() {
        let a = make_city(&world(8, 8, 20, 7)).unwrap();
        let b = make_city(&world(8, 8, 20, 7)).unwrap();
        assert_eq!(a, b);
        assert!((a.attractiveness.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.attractiveness.iter().all(|&v| v > 0.0));
        assert!(a.homes.iter().zip(&a.works).all(|(h, w)| h != w));
    }

    #[test]
    fn zero_users_rejected() {
        assert!(make_city(&world(2, 2, 0, 1)).is_err());
    }

    #[test]
    fn disaster_field_shape() {
        let w = world(5, 5, 1, 1);
        let s = scenario(12);
        let f = make_disaster(&s, &w.grid, "c").unwrap();
        assert_eq!(f.at(12, 30), 1.0);
        assert_eq!(f.at(12, 29), 0.0);
        assert_eq!(f.at(12, 40), 0.0);
        for loc in 0..25 {
            assert_eq!(f.at(loc, 0), 0.0);
        }
        // cell 13 is 1 km from the epicenter; with sigma 1 km the factor is e^{-1/2}
        let s1 = DisasterScenario { spatial_sigma_km: 1.0, ..s.clone() };
        let f1 = make_disaster(&s1, &w.grid, "c").unwrap();
        assert!((f1.at(13, 31) - (-0.5f64).exp()).abs() < 1e-15);
        let bad = DisasterScenario { spatial_sigma_km: 0.0, ..s.clone() };
        assert!(make_disaster(&bad, &w.grid, "c").is_err());
        let bad = DisasterScenario { epicenter: 25, ..s };
        assert!(make_disaster(&bad, &w.grid, "c").is_err());
    }

    #[test]
    fn no_exploration_stays_on_anchors() {
        let mut w = world(6, 6, 30, 3);
        w.epr_rho = 0.0;
        let c = make_city(&w).unwrap();
        let trajs = simulate_normal(&c, &w).unwrap();
        for (u, t) in trajs.iter().enumerate() {
            assert!(t.points().iter().all(|p| p.loc == c.homes[u] || p.loc == c.works[u]));
            assert_eq!(t.len(), w.grid.n_slots());
        }
    }

    #[test]
    fn normal_is_deterministic_and_dense() {
        let w = world(6, 6, 25, 11);
        let c = make_city(&w).unwrap();
        let a = simulate_normal(&c, &w).unwrap();
        let b = simulate_normal(&c, &w).unwrap();
        assert_eq!(a, b);
        for t in &a {
            t.validate(&w.grid).unwrap();
            assert_eq!(t.start_slot(), 0);
        }
    }

    #[test]
    fn disaster_identity_without_field_effect() {
        let w = world(5, 5, 40, 2);
        let c = make_city(&w).unwrap();
        let normal = simulate_normal(&c, &w).unwrap();
        let mut s = scenario(12);
        s.truth_decay.k0 = 0.0;
        let dis = simulate_disaster(&c, &normal, &s, &w.grid, 5).unwrap();
        assert_eq!(dis, normal);
    }

    #[test]
    fn huge_k0_suppresses_everything_at_epicenter() {
        let w = world(5, 5, 200, 4);
        let c = make_city(&w).unwrap();
        let normal = simulate_normal(&c, &w).unwrap();
        let mut s = scenario(12);
        s.truth_decay.k0 = 1e300;
        let dis = simulate_disaster(&c, &normal, &s, &w.grid, 5).unwrap();
        for (u, t) in dis.iter().enumerate() {
            for p in t.points() {
                if p.slot >= 30 && p.slot < 40 && p.loc == 12 {
                    assert_eq!(c.homes[u], 12);
                }
            }
        }
        let before = aggregate_flow(&normal, &w.grid).unwrap();
        let after = aggregate_flow(&dis, &w.grid).unwrap();
        assert_eq!(before.total(), after.total());
    }

    #[test]
    fn disaster_only_moves_users_home() {
        let w = world(5, 5, 60, 8);
        let c = make_city(&w).unwrap();
        let normal = simulate_normal(&c, &w).unwrap();
        let dis = simulate_disaster(&c, &normal, &scenario(7), &w.grid, 1).unwrap();
        for (u, (a, b)) in normal.iter().zip(&dis).enumerate() {
            for (p, q) in a.points().iter().zip(b.points()) {
                assert!(q.loc == p.loc || q.loc == c.homes[u]);
            }
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let w = world(5, 5, 5, 8);
        let c = make_city(&w).unwrap();
        let normal = simulate_normal(&c, &w).unwrap();
        let other = GridSpec { rows: 4, ..w.grid.clone() };
        assert!(simulate_disaster(&c, &normal, &scenario(3), &other, 1).is_err());
    }
}
