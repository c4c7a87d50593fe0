#![allow(dead_code)]

use dismob_core::codec::CodecConfig;
use dismob_core::conditioning::PredictorConfig;
use dismob_core::diffusion::{ModelConfig, ScheduleConfig, ScheduleKind};
use dismob_core::mobility::{CityDataset, GridSpec};
use dismob_core::physics::DecayParams;
use dismob_core::synthworld::{build_city_dataset, DisasterScenario, WorldConfig};

pub const TRUTH: DecayParams = DecayParams { k0: 0.6, alpha_decay: 0.15, rho_km: 2.0 };

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        predictor: PredictorConfig {
            layers: 1,
            heads: 2,
            model_width: 16,
            d_k: 16,
            d_c: 4,
            prompt_mlp_widths: vec![8],
            ffn_width: 32,
            ..PredictorConfig::default()
        },
        codec: CodecConfig { spatial_width: 6, temporal_width: 3, radius_cells: 1.5 },
        schedule: ScheduleConfig { kind: ScheduleKind::Linear, steps: 20, beta_min: 1e-3, beta_max: 0.3 },
        ..ModelConfig::default()
    }
}

pub fn grid(rows: usize, cols: usize, days: usize) -> GridSpec {
    GridSpec { rows, cols, cell_km: 1.0, slots_per_day: 24, days, slot_minutes: 60 }
}

pub fn scenario(grid: &GridSpec) -> DisasterScenario {
    DisasterScenario {
        epicenter: grid.n_locations() / 2,
        peak_intensity: 1.0,
        spatial_sigma_km: 1.5,
        onset_slot: grid.slots_per_day + 8,
        duration_slots: 10,
        truth_decay: TRUTH,
        disaster_type: "rainstorm".into(),
    }
}

pub fn dataset(name: &str, grid: &GridSpec, users: usize, seed: u64) -> CityDataset {
    let world = WorldConfig {
        grid: grid.clone(),
        n_users: users,
        home_work_fraction: 0.4,
        epr_rho: 0.6,
        epr_gamma: 0.21,
        stay_prob: 0.6,
        seed,
    };
    build_city_dataset(name, &world, &scenario(grid)).unwrap()
}
